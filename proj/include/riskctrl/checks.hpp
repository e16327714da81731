#pragma once

// Self-checks behind `riskctrl check` and `riskctrl gradcheck`.

#include "riskctrl/experiment.hpp"

#include <random>
#include <string>
#include <vector>

namespace riskctrl::checks {

struct CheckResult {
    std::string name;
    bool passed;
    double measured;
    double tolerance;
};

/// Norm drift of exact qubit propagation over an ensemble.
inline CheckResult unitarity(int scenarios = 101, int steps = 640, double dt = 0.03125) {
    const qubit::QubitSystem sys(1.0);
    const ParameterEnsemble ens = make_uniform_grid(-0.5, 0.5, scenarios - 1);
    const ControlGrid grid(dt * steps, steps);
    const Control u = gaussian_init(grid, 7, 0.5);
    const EnsembleTrajectory traj = propagate_ensemble(sys, ens, u, Stepper::ExactBilinear);
    double drift = 0.0;
    for (const auto& path : traj.states)
        for (Eigen::Index j = 0; j < path.cols(); ++j) drift = std::max(drift, std::abs(path.col(j).norm() - 1.0));
    return {"unitarity", drift <= 1e-12, drift, 1e-12};
}

/// Closed-form Pauli exponential against the dense Padé exponential.
inline CheckResult pauli_exponential(int samples = 1000, std::uint64_t seed = 11) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(-2.0, 2.0);
    double worst = 0.0;
    for (int k = 0; k < samples; ++k) {
        const double scale = (k % 4 == 0) ? 1e-10 : 1.0;
        const qubit::Vector3 c(uni(rng) * scale, uni(rng) * scale, uni(rng) * scale);
        const double c0 = uni(rng);
        const double dt = 0.5 * (uni(rng) + 2.0);
        const qubit::Unitary closed = qubit::pauli_expm(c0, c, dt);
        const qubit::Unitary generator = -qubit::I * dt * qubit::pauli_combination(c0, c);
        const qubit::Unitary dense = expm(generator);
        worst = std::max(worst, (closed - dense).cwiseAbs().maxCoeff());
    }
    return {"pauli_exponential", worst <= 1e-12, worst, 1e-12};
}

/// Sorted-quantile AVaR against a scan of the variational objective over breakpoints.
inline CheckResult avar_breakpoints(int samples = 1000, std::uint64_t seed = 13) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    double worst = 0.0;
    for (int k = 0; k < samples; ++k) {
        const int count = 1 + static_cast<int>(uni(rng) * 12);
        std::vector<double> costs(count), weights(count);
        double total = 0.0;
        for (int s = 0; s < count; ++s) {
            costs[s] = uni(rng) * 4.0 - 1.0;
            weights[s] = 0.05 + uni(rng);
            total += weights[s];
        }
        for (double& w : weights) w /= total;
        const double beta = 0.01 + 0.98 * uni(rng);
        double scan = std::numeric_limits<double>::infinity();
        for (double t : costs) scan = std::min(scan, ru_objective(t, costs, weights, beta));
        worst = std::max(worst, std::abs(evaluate(RiskMeasure::avar(beta), costs, weights) - scan));
    }
    return {"avar_breakpoints", worst <= 1e-12, worst, 1e-12};
}

struct GradientAudit {
    double max_relative_error = 0.0;
    std::vector<Eigen::Index> coordinates;
};

/// Central finite differences of R(J_u) + α ρ(u) on a few coordinates.
template <class Problem>
GradientAudit gradient_audit(const Problem& problem, const RiskMeasure& risk, const Control& u, int coordinates,
                             double h, std::uint64_t seed) {
    const Matrix g = problem.gradient(risk, u);
    const Vector flat = u.flat();
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<Eigen::Index> pick(0, flat.size() - 1);
    GradientAudit audit;
    double scale = 0.0;
    std::vector<std::pair<double, double>> pairs;
    for (int c = 0; c < coordinates; ++c) {
        const Eigen::Index i = pick(rng);
        Vector plus = flat, minus = flat;
        plus(i) += h;
        minus(i) -= h;
        const double fd = (problem.objective(risk, problem.control(plus)) -
                           problem.objective(risk, problem.control(minus))) /
                          (2.0 * h);
        const double exact = g.data()[i];
        pairs.emplace_back(exact, fd);
        scale = std::max(scale, std::abs(exact));
        audit.coordinates.push_back(i);
    }
    for (const auto& [exact, fd] : pairs)
        audit.max_relative_error =
            std::max(audit.max_relative_error, std::abs(exact - fd) / std::max(std::abs(exact), 1e-3 * scale));
    return audit;
}

inline CheckResult qubit_gradient(int scenarios = 5, int steps = 64) {
    ExperimentConfig cfg;
    cfg.N = scenarios - 1;
    cfg.dt = cfg.T / steps;
    const QubitProblem problem = make_qubit_problem(cfg, make_uniform_grid(-0.5, 0.5, cfg.N), {});
    const Control u = gaussian_init(problem.grid(), 3, 0.5);
    const GradientAudit audit = gradient_audit(problem, RiskMeasure::expectation(), u, 10, 1e-5, 5);
    return {"qubit_gradient", audit.max_relative_error <= 1e-6, audit.max_relative_error, 1e-6};
}

inline std::vector<CheckResult> run_all() {
    return {unitarity(), pauli_exponential(), avar_breakpoints(), qubit_gradient()};
}

}  // namespace riskctrl::checks
