#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace rc = riskctrl;
namespace q = riskctrl::qubit;
using rc::testing::ScalarAffine;
using rc::testing::ScalarBilinear;

namespace {

const double kE = std::exp(1.0);

struct ConstantIntegrand {
    double c = 1.0;
    double value(double, const rc::Vector&, double) const { return c; }
    rc::Vector gradient(double, const rc::Vector& x, double) const { return rc::Vector::Zero(x.size()); }
};

// a(t, x, θ) = (1 + t) Σ_k (k + 1) x_k^2 / 2 + θ x_0, a smooth time-dependent
// density that is not a function of |x| alone.
struct QuadraticIntegrand {
    static rc::Vector diagonal(const rc::Vector& x) { return rc::Vector::LinSpaced(x.size(), 1.0, double(x.size())); }
    double value(double t, const rc::Vector& x, double theta) const {
        return 0.5 * (1.0 + t) * x.dot(diagonal(x).cwiseProduct(x)) + theta * x(0);
    }
    rc::Vector gradient(double t, const rc::Vector& x, double theta) const {
        rc::Vector g = (1.0 + t) * diagonal(x).cwiseProduct(x);
        g(0) += theta;
        return g;
    }
};

rc::CostMeasure mixed_measure(double horizon) {
    return {{{0.25 * horizon, 0.7}, {0.5 * horizon, 0.2}, {horizon, 1.0}}, 0.3};
}

template <class S, class A>
double cost_of(const S& sys, double theta, const rc::Control& u, const A& a, const rc::CostMeasure& nu,
               rc::Stepper stepper) {
    return rc::scenario_cost(rc::propagate_scenario(sys, theta, u, stepper), u.grid(), a, nu, theta);
}

// Max relative error of the discrete-adjoint gradient against a fourth-order
// central difference with step h on `probes` random coordinates; the
// denominator is floored at 1e-2 of the largest gradient entry so vanishing
// entries do not dominate.
template <class S, class A>
double adjoint_fd_error(const S& sys, double theta, const rc::Control& u, const A& a, const rc::CostMeasure& nu,
                        rc::Stepper stepper, int probes, std::uint64_t seed, double h = 1e-3) {
    const rc::ScenarioPath path = rc::propagate_scenario(sys, theta, u, stepper);
    rc::Matrix g;
    rc::adjoint_solve(sys, theta, u, path, a, nu, stepper, &g);
    const double scale = g.cwiseAbs().maxCoeff();
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<Eigen::Index> pick(0, g.size() - 1);
    auto shifted = [&](Eigen::Index i, double delta) {
        rc::Matrix v = u.values();
        v.data()[i] += delta;
        return cost_of(sys, theta, rc::Control(u.grid(), v), a, nu, stepper);
    };
    double worst = 0.0;
    for (int p = 0; p < probes; ++p) {
        const Eigen::Index i = pick(rng);
        const double fd =
            (8.0 * (shifted(i, h) - shifted(i, -h)) - (shifted(i, 2.0 * h) - shifted(i, -2.0 * h))) / (12.0 * h);
        worst = std::max(worst, std::abs(g.data()[i] - fd) / std::max(std::abs(g.data()[i]), 1e-2 * scale));
    }
    return worst;
}

}  // namespace

TEST(ScenarioCost, TerminalInfidelityWithoutControl) {
    const q::QubitSystem sys(1.0);
    const rc::ControlGrid grid(20.0, 640);
    const rc::Control u(grid, 1);
    const q::InfidelityIntegrand a;
    EXPECT_NEAR(cost_of(sys, 0.2, u, a, rc::CostMeasure::terminal(20.0), rc::Stepper::ExactBilinear), 1.0, 1e-14);
    EXPECT_NEAR(cost_of(sys, 0.2, u, a, rc::CostMeasure::terminal(20.0, 2.0), rc::Stepper::ExactBilinear), 2.0, 1e-14);
}

TEST(ScenarioCost, LebesguePartOfConstant) {
    const q::QubitSystem sys(1.0);
    const rc::ControlGrid grid(20.0, 640);
    EXPECT_NEAR(cost_of(sys, 0.0, rc::Control(grid, 1), ConstantIntegrand{}, rc::CostMeasure::lebesgue(),
                        rc::Stepper::ExactBilinear),
                20.0, 1e-12);
}

TEST(ScenarioCost, LinearInMeasure) {
    const q::QubitSystem sys(1.0);
    const rc::ControlGrid grid(4.0, 128);
    const rc::Control u = rc::testing::random_control(grid, 1, 1.0, 1);
    const QuadraticIntegrand a;
    const rc::CostMeasure nu1{{{1.0, 0.4}, {4.0, 1.0}}, 0.0};
    const rc::CostMeasure nu2{{{2.5, 0.3}}, 0.8};
    rc::CostMeasure both = nu1;
    both.atoms.insert(both.atoms.end(), nu2.atoms.begin(), nu2.atoms.end());
    both.lebesgue_weight = nu1.lebesgue_weight + nu2.lebesgue_weight;
    const auto j = [&](const rc::CostMeasure& nu) { return cost_of(sys, 0.1, u, a, nu, rc::Stepper::ExactBilinear); };
    EXPECT_NEAR(j(both), j(nu1) + j(nu2), 1e-12);
    rc::CostMeasure tripled = both;
    for (auto& at : tripled.atoms) at.weight *= 3.0;
    tripled.lebesgue_weight *= 3.0;
    EXPECT_NEAR(j(tripled), 3.0 * j(both), 1e-12);
}

TEST(CostMeasure, AtomsSnapToGrid) {
    const rc::ControlGrid grid(1.0, 10);
    EXPECT_EQ(rc::CostMeasure::snap(0.04, grid), 0);
    EXPECT_EQ(rc::CostMeasure::snap(0.26, grid), 3);
    EXPECT_EQ(rc::CostMeasure::snap(1.0, grid), 10);
    EXPECT_THROW(rc::CostMeasure({{1.2, 1.0}}, 0.0).validate(grid), std::invalid_argument);
    EXPECT_THROW(rc::CostMeasure({{-0.1, 1.0}}, 0.0).validate(grid), std::invalid_argument);
    EXPECT_THROW(rc::CostMeasure({}, 0.0).validate(grid), std::invalid_argument);
    EXPECT_THROW(rc::CostMeasure({{0.5, -1.0}}, 1.0).validate(grid), std::invalid_argument);
}

TEST(Adjoint, ZeroIntegrandGivesZero) {
    const q::QubitSystem sys(1.0);
    const rc::ControlGrid grid(4.0, 128);
    const rc::Control u = rc::testing::random_control(grid, 1, 1.0, 2);
    const rc::ScenarioPath path = rc::propagate_scenario(sys, 0.0, u, rc::Stepper::ExactBilinear);
    const rc::LinearIntegrand zero{rc::Vector::Zero(4)};
    for (rc::Stepper stepper : {rc::Stepper::ExactBilinear, rc::Stepper::RK4}) {
        rc::Matrix g;
        const rc::AdjointTrajectory adj = rc::adjoint_solve(sys, 0.0, u, path, zero, mixed_measure(4.0), stepper, &g);
        EXPECT_EQ(adj.plus.norm(), 0.0);
        EXPECT_EQ(adj.minus.norm(), 0.0);
        EXPECT_EQ(g.norm(), 0.0);
        EXPECT_EQ(rc::tracking_gradient(sys, 0.0, u, path, adj, stepper).norm(), 0.0);
    }
}

TEST(Adjoint, ScalarAnalyticAdjoint) {
    const rc::ControlGrid grid(1.0, 64);
    const rc::Control u = rc::testing::constant_control(grid, 1.0);
    const rc::ScenarioPath path = rc::propagate_scenario(ScalarBilinear{}, 0.0, u, rc::Stepper::ExactBilinear);
    const rc::AdjointTrajectory adj = rc::adjoint_solve(ScalarBilinear{}, 0.0, u, path, rc::LinearIntegrand{rc::Vector::Ones(1)},
                                                        rc::CostMeasure::terminal(1.0), rc::Stepper::ExactBilinear);
    EXPECT_EQ(adj.plus(0, grid.steps()), 0.0);
    for (int j = 0; j < grid.steps(); ++j) EXPECT_NEAR(adj.plus(0, j), std::exp(1.0 - grid.node(j)), 1e-12);
    ASSERT_EQ(adj.jumps.size(), 1u);
    EXPECT_EQ(adj.jumps[0].node, grid.steps());
    EXPECT_EQ(adj.jumps[0].jump(0), 1.0);
}

TEST(Adjoint, JumpConditionAtEveryAtom) {
    const q::QubitSystem sys(1.0);
    const rc::ControlGrid grid(4.0, 128);
    const rc::Control u = rc::testing::random_control(grid, 1, 1.0, 3);
    const QuadraticIntegrand a;
    const rc::CostMeasure nu{{{1.0, 0.7}, {2.0, 0.2}, {4.0, 1.0}}, 0.0};
    const rc::ScenarioPath path = rc::propagate_scenario(sys, 0.3, u, rc::Stepper::ExactBilinear);
    const rc::AdjointTrajectory adj = rc::adjoint_solve(sys, 0.3, u, path, a, nu, rc::Stepper::ExactBilinear);
    ASSERT_EQ(adj.jumps.size(), 3u);
    EXPECT_EQ(adj.plus.col(grid.steps()).norm(), 0.0);
    for (std::size_t k = 0; k < nu.atoms.size(); ++k) {
        const rc::AdjointJump& jump = adj.jumps[k];
        EXPECT_EQ(jump.node, rc::CostMeasure::snap(nu.atoms[k].time, grid));
        const rc::Vector expected =
            nu.atoms[k].weight * a.gradient(grid.node(jump.node), rc::Vector(path.col(jump.node)), 0.3);
        EXPECT_LT((adj.minus.col(jump.node) - adj.plus.col(jump.node) - expected).norm(), 1e-10);
        EXPECT_LT((jump.jump - expected).norm(), 1e-15);
    }
    // No jump between atoms.
    EXPECT_EQ(adj.minus.col(50), adj.plus.col(50));
}

TEST(TrackingGradient, ScalarIsConstantInTime) {
    const rc::ControlGrid grid(1.0, 64);
    const rc::Control u = rc::testing::constant_control(grid, 1.0);
    const rc::LinearIntegrand a{rc::Vector::Ones(1)};
    for (auto [stepper, tol] : {std::pair{rc::Stepper::ExactBilinear, 1e-12}, std::pair{rc::Stepper::RK4, 1e-8}}) {
        const rc::ScenarioPath path = rc::propagate_scenario(ScalarBilinear{}, 0.0, u, stepper);
        const rc::AdjointTrajectory adj =
            rc::adjoint_solve(ScalarBilinear{}, 0.0, u, path, a, rc::CostMeasure::terminal(1.0), stepper);
        const rc::Matrix g = rc::tracking_gradient(ScalarBilinear{}, 0.0, u, path, adj, stepper);
        for (int j = 0; j < grid.steps(); ++j) EXPECT_NEAR(g(j, 0), kE * grid.dt(), tol * kE * grid.dt());
    }
}

TEST(TrackingGradient, SweepAndStoredAdjointAgree) {
    const q::QubitSystem sys(1.0);
    const rc::ControlGrid grid(4.0, 128);
    const rc::Control u = rc::testing::random_control(grid, 1, 1.0, 4);
    for (rc::Stepper stepper : {rc::Stepper::ExactBilinear, rc::Stepper::RK4}) {
        const rc::ScenarioPath path = rc::propagate_scenario(sys, -0.1, u, stepper);
        rc::Matrix g;
        const rc::AdjointTrajectory adj =
            rc::adjoint_solve(sys, -0.1, u, path, QuadraticIntegrand{}, mixed_measure(4.0), stepper, &g);
        EXPECT_LT((g - rc::tracking_gradient(sys, -0.1, u, path, adj, stepper)).norm(), 1e-14 * (1.0 + g.norm()));
    }
}

TEST(TrackingGradient, QubitMatchesFiniteDifferences) {
    const q::QubitSystem sys(1.0);
    const rc::ControlGrid grid(20.0, 640);
    const rc::Control u = rc::testing::random_control(grid, 1, 0.5, 5);
    EXPECT_LE(adjoint_fd_error(sys, 0.2, u, q::InfidelityIntegrand{}, rc::CostMeasure::terminal(20.0),
                               rc::Stepper::ExactBilinear, 10, 6),
              1e-6);
}

TEST(TrackingGradient, DiscreteAdjointExactnessExactStepper) {
    const q::QubitSystem sys(1.0);
    const rc::ControlGrid grid(4.0, 64);
    double worst = 0.0;
    for (int probe = 0; probe < 10; ++probe) {
        const rc::Control u = rc::testing::random_control(grid, 1, 1.0, 100 + probe);
        const double theta = -0.5 + 0.1 * probe;
        worst = std::max(worst, adjoint_fd_error(sys, theta, u, q::InfidelityIntegrand{}, mixed_measure(4.0),
                                                 rc::Stepper::ExactBilinear, 10, probe));
    }
    EXPECT_LE(worst, 1e-8);
}

TEST(TrackingGradient, DiscreteAdjointExactnessRk4) {
    const q::QubitSystem sys(1.0);
    const rc::ControlGrid grid(4.0, 64);
    double worst = 0.0;
    for (int probe = 0; probe < 5; ++probe) {
        const rc::Control u = rc::testing::random_control(grid, 1, 1.0, 200 + probe);
        worst = std::max(worst, adjoint_fd_error(sys, 0.1 * probe, u, QuadraticIntegrand{}, mixed_measure(4.0),
                                                 rc::Stepper::RK4, 10, probe));
    }
    const rc::ControlGrid grid2(3.0, 120);
    for (int probe = 0; probe < 5; ++probe) {
        const rc::Control u = rc::testing::random_control(grid2, 2, 0.7, 300 + probe);
        worst = std::max(worst, adjoint_fd_error(rc::testing::Pendulumish{}, 0.2 * probe - 0.4, u, QuadraticIntegrand{},
                                                 mixed_measure(3.0), rc::Stepper::RK4, 10, probe));
    }
    EXPECT_LE(worst, 1e-6);
}

TEST(Adjoint, ConvergesToContinuousAdjoint) {
    const std::vector<int> steps = {16, 32, 64, 128};
    EXPECT_GE(rc::testing::scalar_adjoint_rate(steps), 2.0);
    for (std::size_t i = 1; i < steps.size(); ++i)
        EXPECT_LT(rc::testing::scalar_adjoint_error(steps[i]), rc::testing::scalar_adjoint_error(steps[i - 1]));
}

TEST(ControlCost, QuadraticValueAndGradient) {
    const rc::ControlGrid grid(2.0, 40);
    const rc::Control u = rc::testing::random_control(grid, 2, 1.0, 7);
    const rc::ControlCost cc{0.3};
    EXPECT_GE(cc.value(u), 0.0);
    EXPECT_NEAR(cc.value(u), 0.3 * rc::control_l2_norm_sq(u), 1e-15);
    const rc::Matrix g = cc.gradient(u);
    EXPECT_EQ(g, rc::Matrix(2.0 * 0.3 * grid.dt() * u.values()));
    rc::Matrix plus = u.values(), minus = u.values();
    plus(5, 1) += 1e-6;
    minus(5, 1) -= 1e-6;
    EXPECT_NEAR((cc.value(rc::Control(grid, plus)) - cc.value(rc::Control(grid, minus))) / 2e-6, g(5, 1), 1e-9);
}

TEST(AssembleGradient, SingleScenarioExpectation) {
    const rc::ControlGrid grid(1.0, 8);
    const rc::Control u = rc::testing::random_control(grid, 1, 1.0, 8);
    const rc::Matrix track = rc::testing::random_control(grid, 1, 1.0, 9).values();
    const rc::ControlCost cc{0.5};
    const std::vector<double> ones = {1.0};
    const std::vector<rc::Matrix> grads = {track};
    const rc::Matrix g = rc::assemble_gradient(rc::ParameterEnsemble({0.0}, {1.0}), ones, grads, u, cc);
    EXPECT_LT((g - (track + 2.0 * 0.5 * u.values() * grid.dt())).norm(), 1e-15);
}

TEST(AssembleGradient, WorstCaseIndicatorPicksScenario) {
    const rc::ControlGrid grid(1.0, 8);
    const rc::Control u = rc::testing::random_control(grid, 1, 1.0, 10);
    const rc::ParameterEnsemble ens = rc::ParameterEnsemble::uniform({0.0, 1.0, 2.0});
    std::vector<rc::Matrix> grads;
    for (int s = 0; s < 3; ++s) grads.push_back(rc::testing::random_control(grid, 1, 1.0, 20 + s).values());
    const std::vector<double> identifier = rc::risk_identifier(rc::RiskMeasure::worst_case(), std::vector{1.0, 3.0, 2.0},
                                                               ens.weights());
    const rc::Matrix g = rc::assemble_gradient(ens, identifier, grads, u, rc::ControlCost{0.0});
    EXPECT_LT((g - grads[1]).norm(), 1e-15);
}

TEST(AssembleGradient, StationaryPointCancels) {
    const rc::ControlGrid grid(2.0, 16);
    const rc::Control u = rc::testing::random_control(grid, 1, 1.0, 11);
    const rc::ControlCost cc{0.25};
    const std::vector<rc::Matrix> grads = {rc::Matrix(-2.0 * cc.alpha * grid.dt() * u.values())};
    const std::vector<double> ones = {1.0};
    const rc::Matrix g = rc::assemble_gradient(rc::ParameterEnsemble({0.0}, {1.0}), ones, grads, u, cc);
    EXPECT_LT(g.norm(), 1e-15);
    EXPECT_LT(rc::stationarity_residual(u, g, cc), 1e-14);
}

TEST(AssembleGradient, LengthMismatchThrows) {
    const rc::ControlGrid grid(1.0, 4);
    const rc::Control u(grid, 1);
    const std::vector<double> identifier = {1.0};
    const std::vector<rc::Matrix> grads = {rc::Matrix::Zero(4, 1), rc::Matrix::Zero(4, 1)};
    EXPECT_THROW(rc::assemble_gradient(rc::ParameterEnsemble::uniform({0.0, 1.0}), identifier, grads, u, {}),
                 std::invalid_argument);
}

TEST(AssembleGradient, UnitIdentifierIsRiskNeutralGradient) {
    rc::ExperimentConfig cfg;
    cfg.N = 6;
    cfg.T = 4.0;
    cfg.dt = 0.0625;
    const rc::QubitProblem problem = rc::make_qubit_problem(cfg, rc::make_uniform_grid(-0.5, 0.5, cfg.N), {});
    const rc::Control u = rc::gaussian_init(problem.grid(), 4, 0.5);
    const std::vector<rc::Matrix> grads = problem.scenario_gradients(u);
    const std::vector<double> ones(problem.ensemble().size(), 1.0);
    const rc::Matrix weighted = rc::assemble_gradient(problem.ensemble(), ones, grads, u, problem.control_cost());
    rc::Matrix neutral = problem.control_cost().gradient(u);
    for (std::size_t s = 0; s < grads.size(); ++s) neutral.noalias() += problem.ensemble().weight(s) * grads[s];
    EXPECT_EQ(weighted, neutral);
    EXPECT_EQ(problem.gradient(rc::RiskMeasure::expectation(), u), neutral);
}

TEST(Stationarity, UnconstrainedScaling) {
    const rc::ControlGrid grid(2.0, 32);
    const rc::Control u = rc::testing::random_control(grid, 1, 1.0, 12);
    const rc::Matrix g = rc::testing::random_control(grid, 1, 1.0, 13).values();
    const rc::ControlCost cc{0.1};
    const double r = rc::stationarity_residual(u, g, cc);
    EXPECT_NEAR(r, g.norm() / std::sqrt(grid.dt()), 1e-14 * r);
    for (double c : {-2.0, 0.5, 10.0}) EXPECT_NEAR(rc::stationarity_residual(u, c * g, cc), std::abs(c) * r, 1e-13 * r);
    EXPECT_EQ(rc::stationarity_residual(u, rc::Matrix::Zero(32, 1), cc), 0.0);
}

TEST(Stationarity, BoxProjection) {
    const rc::ControlGrid grid(1.0, 4);
    rc::Matrix v(4, 1);
    v << -0.5, 0.0, 0.2, 0.9;
    const rc::Control u(grid, v);
    const rc::ControlCost cc{0.5};
    EXPECT_EQ(rc::stationarity_residual(u, rc::Matrix::Zero(4, 1), cc, rc::Box{-1.0, 1.0}), 0.0);
    // Pushing the upper-bound component outward is stationary; inward is not.
    rc::Matrix g = rc::Matrix::Zero(4, 1);
    rc::Matrix at_bound = v;
    at_bound(3, 0) = 1.0;
    g(3, 0) = -0.3;
    EXPECT_EQ(rc::stationarity_residual(rc::Control(grid, at_bound), g, cc, rc::Box{-1.0, 1.0}), 0.0);
    g(3, 0) = 0.1;
    // Step g / (2 α dt) = 0.1 / 0.25 = 0.4 inward, scaled by sqrt(dt).
    EXPECT_NEAR(rc::stationarity_residual(rc::Control(grid, at_bound), g, cc, rc::Box{-1.0, 1.0}), 0.4 * 0.5, 1e-15);
}
