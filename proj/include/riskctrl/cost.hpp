#pragma once

// Scenario tracking cost J_u(θ) = ∫ a(t, x_u(t), θ) dν(t) for a measure ν made
// of atoms plus a multiple of Lebesgue measure, its discrete adjoint, and the
// risk-weighted gradient assembly.
//
// Gradients differentiate the time-stepping scheme itself, so they are exact
// gradients of the discrete objective.

#include "riskctrl/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace riskctrl {

/// Point mass ω δ_t.
struct Atom {
    double time;
    double weight;
};

/// ν = Σ_a ω_a δ_{t_a} + lebesgue_weight · dt.
struct CostMeasure {
    std::vector<Atom> atoms;
    double lebesgue_weight = 0.0;

    static CostMeasure terminal(double horizon, double weight = 1.0) { return {{{horizon, weight}}, 0.0}; }
    static CostMeasure lebesgue(double weight = 1.0) { return {{}, weight}; }

    /// Per-node quadrature weights on `grid`: atoms snapped to the nearest
    /// node, Lebesgue part by the trapezoidal rule.
    std::vector<double> node_weights(const ControlGrid& grid) const {
        validate(grid);
        const int steps = grid.steps();
        std::vector<double> w(static_cast<std::size_t>(steps) + 1, 0.0);
        for (const Atom& a : atoms) w[static_cast<std::size_t>(snap(a.time, grid))] += a.weight;
        if (lebesgue_weight != 0.0) {
            for (int j = 0; j <= steps; ++j) {
                const double trap = (j == 0 || j == steps) ? 0.5 : 1.0;
                w[static_cast<std::size_t>(j)] += lebesgue_weight * trap * grid.dt();
            }
        }
        return w;
    }

    /// Node index of an atom time; rejects times more than dt/2 off the grid.
    static int snap(double time, const ControlGrid& grid) {
        const double pos = time / grid.dt();
        const double node = std::round(pos);
        if (!std::isfinite(pos) || node < 0.0 || node > grid.steps() || std::abs(pos - node) > 0.5 + 1e-12)
            throw std::invalid_argument("CostMeasure: atom at t=" + std::to_string(time) +
                                        " is more than dt/2 away from the grid");
        return static_cast<int>(node);
    }

    void validate(const ControlGrid& grid) const {
        double mass = lebesgue_weight * grid.horizon();
        if (!(lebesgue_weight >= 0.0) || !std::isfinite(lebesgue_weight))
            throw std::invalid_argument("CostMeasure: lebesgue_weight must be finite and nonnegative");
        for (const Atom& a : atoms) {
            if (!(a.weight >= 0.0) || !std::isfinite(a.weight))
                throw std::invalid_argument("CostMeasure: atom weights must be finite and nonnegative");
            if (a.time < 0.0 || a.time > grid.horizon() + 0.5 * grid.dt())
                throw std::invalid_argument("CostMeasure: atom at t=" + std::to_string(a.time) +
                                            " lies outside [0, T]");
            mass += a.weight;
        }
        if (!(mass > 0.0) || !std::isfinite(mass)) throw std::invalid_argument("CostMeasure: total mass must be positive");
    }
};

/// Cost density a(t, x, θ) with its state gradient.
template <class A>
concept Integrand = requires(const A& a, double t, const Vector& x, double theta) {
    { a.value(t, x, theta) } -> std::convertible_to<double>;
    { a.gradient(t, x, theta) } -> std::convertible_to<Vector>;
};

/// a(t, x, θ) = c^T x; handy for linear functionals and tests.
struct LinearIntegrand {
    Vector coefficients;

    double value(double, const Vector& x, double) const { return coefficients.dot(x); }
    Vector gradient(double, const Vector&, double) const { return coefficients; }
};

/// Quadratic control cost α ρ(u) with ρ(u) = ||u||²_{L²} (no 1/2 factor),
/// so stationarity reads λ + 2αu = 0.
struct ControlCost {
    double alpha = 0.0;

    double value(const Control& u) const { return alpha * control_l2_norm_sq(u); }
    /// Gradient with respect to the coefficients u[j][i]: 2 α u dt.
    Matrix gradient(const Control& u) const { return (2.0 * alpha * u.grid().dt()) * u.values(); }
};

template <Integrand A>
double scenario_cost(const ScenarioPath& path, const ControlGrid& grid, const A& integrand, const CostMeasure& nu,
                     double theta) {
    if (path.cols() != grid.steps() + 1) throw std::invalid_argument("scenario_cost: path does not match grid");
    nu.validate(grid);
    double total = 0.0;
    for (const Atom& a : nu.atoms) {
        const int j = CostMeasure::snap(a.time, grid);
        total += a.weight * integrand.value(grid.node(j), Vector(path.col(j)), theta);
    }
    if (nu.lebesgue_weight != 0.0) {
        double trap = 0.0;
        const int steps = grid.steps();
        for (int j = 0; j <= steps; ++j) {
            const double f = integrand.value(grid.node(j), Vector(path.col(j)), theta);
            trap += (j == 0 || j == steps) ? 0.5 * f : f;
        }
        total += nu.lebesgue_weight * trap * grid.dt();
    }
    return total;
}

/// Jump of the adjoint at an atom: P(t⁻) - P(t⁺).
struct AdjointJump {
    int node;
    double time;
    Vector jump;
};

/// Discrete adjoint at the grid nodes.
///
/// plus[j] = P(t_j⁺) collects the sensitivity of the cost accrued strictly
/// after t_j; minus[j] = P(t_j⁻) also includes the contribution at node j.
/// plus[K] = 0 is the terminal condition.
struct AdjointTrajectory {
    ScenarioPath plus;
    ScenarioPath minus;
    std::vector<AdjointJump> jumps;
};

namespace detail {

// Reverse sweep through one RK4 step: returns A^T λ and accumulates
// (d next / d u)^T λ into control_adjoint.
template <ControlAffineSystem S>
Vector rk4_step_adjoint(const S& sys, const Vector& x, double theta, const RowVector& u, double dt,
                        const Vector& lambda, Eigen::Ref<RowVector> control_adjoint) {
    const Vector x1 = x;
    const Vector k1 = vector_field(sys, x1, theta, u);
    const Vector x2 = x + 0.5 * dt * k1;
    const Vector k2 = vector_field(sys, x2, theta, u);
    const Vector x3 = x + 0.5 * dt * k2;
    const Vector k3 = vector_field(sys, x3, theta, u);
    const Vector x4 = x + dt * k3;

    Vector bar_k1 = (dt / 6.0) * lambda;
    Vector bar_k2 = (dt / 3.0) * lambda;
    Vector bar_k3 = (dt / 3.0) * lambda;
    const Vector bar_k4 = (dt / 6.0) * lambda;
    Vector bar_x = lambda;

    auto stage = [&](const Vector& xs, const Vector& bar_k) {
        control_adjoint += (field_matrix(sys, xs, theta).transpose() * bar_k).transpose();
        return Vector(state_jacobian(sys, xs, theta, u).transpose() * bar_k);
    };

    const Vector bar_x4 = stage(x4, bar_k4);
    bar_x += bar_x4;
    bar_k3 += dt * bar_x4;
    const Vector bar_x3 = stage(x3, bar_k3);
    bar_x += bar_x3;
    bar_k2 += 0.5 * dt * bar_x3;
    const Vector bar_x2 = stage(x2, bar_k2);
    bar_x += bar_x2;
    bar_k1 += 0.5 * dt * bar_x2;
    bar_x += stage(x1, bar_k1);
    return bar_x;
}

}  // namespace detail

/// Reverse sweep of the adjoint with the atoms of ν as jumps.
///
/// When `control_gradient` is non-null it receives d(scenario_cost)/d u[j][i]
/// computed in the same sweep.
template <ControlAffineSystem S, Integrand A>
AdjointTrajectory adjoint_solve(const S& sys, double theta, const Control& u, const ScenarioPath& path,
                                const A& integrand, const CostMeasure& nu, Stepper stepper,
                                Matrix* control_gradient = nullptr) {
    require_compatible<S>(stepper);
    detail::check_path(path, u, sys.state_dim(), "adjoint_solve");
    const ControlGrid& grid = u.grid();
    const int steps = grid.steps();
    const int n = sys.state_dim();
    const double dt = grid.dt();
    const std::vector<double> weights = nu.node_weights(grid);

    std::vector<double> atom_weight(weights.size(), 0.0);
    for (const Atom& a : nu.atoms) atom_weight[static_cast<std::size_t>(CostMeasure::snap(a.time, grid))] += a.weight;

    AdjointTrajectory adj{ScenarioPath::Zero(n, steps + 1), ScenarioPath::Zero(n, steps + 1), {}};
    if (control_gradient) *control_gradient = Matrix::Zero(steps, sys.channels());

    auto add_node_source = [&](int j) {
        const double w = weights[static_cast<std::size_t>(j)];
        adj.minus.col(j) = adj.plus.col(j);
        if (w == 0.0) return;
        const Vector grad = integrand.gradient(grid.node(j), Vector(path.col(j)), theta);
        adj.minus.col(j) += w * grad;
        const double wa = atom_weight[static_cast<std::size_t>(j)];
        if (wa != 0.0) adj.jumps.push_back({j, grid.node(j), wa * grad});
    };

    add_node_source(steps);
    for (int j = steps - 1; j >= 0; --j) {
        const Vector lambda = adj.minus.col(j + 1);
        const Vector xj = path.col(j);
        const RowVector uj = u.row(j);
        bool done = false;
        if constexpr (BilinearSystem<S>) {
            if (stepper == Stepper::ExactBilinear) {
                if (control_gradient) {
                    const StepSensitivity sens = sys.exact_step_sensitivity(xj, theta, uj, dt);
                    adj.plus.col(j) = sens.transition.transpose() * lambda;
                    control_gradient->row(j) = (sens.control_jacobian.transpose() * lambda).transpose();
                } else {
                    adj.plus.col(j) = sys.exact_step(xj, theta, uj, dt).transition.transpose() * lambda;
                }
                done = true;
            }
        }
        if (!done) {
            RowVector g = RowVector::Zero(sys.channels());
            adj.plus.col(j) = detail::rk4_step_adjoint(sys, xj, theta, uj, dt, lambda, g);
            if (control_gradient) control_gradient->row(j) = g;
        }
        if (!adj.plus.col(j).allFinite()) throw DivergenceError(j);
        add_node_source(j);
    }
    std::reverse(adj.jumps.begin(), adj.jumps.end());
    return adj;
}

/// g[j][i] = d(scenario_cost)/d u[j][i] from a stored adjoint:
/// P(t_{j+1}⁻)^T d x_{j+1} / d u[j][i].
template <ControlAffineSystem S>
Matrix tracking_gradient(const S& sys, double theta, const Control& u, const ScenarioPath& path,
                         const AdjointTrajectory& adj, Stepper stepper) {
    require_compatible<S>(stepper);
    detail::check_path(path, u, sys.state_dim(), "tracking_gradient");
    const int steps = u.steps();
    const double dt = u.grid().dt();
    Matrix g = Matrix::Zero(steps, sys.channels());
    for (int j = 0; j < steps; ++j) {
        const Vector lambda = adj.minus.col(j + 1);
        const Vector xj = path.col(j);
        const RowVector uj = u.row(j);
        bool done = false;
        if constexpr (BilinearSystem<S>) {
            if (stepper == Stepper::ExactBilinear) {
                g.row(j) = (sys.exact_step_sensitivity(xj, theta, uj, dt).control_jacobian.transpose() * lambda)
                               .transpose();
                done = true;
            }
        }
        if (!done) {
            RowVector gj = RowVector::Zero(sys.channels());
            detail::rk4_step_adjoint(sys, xj, theta, uj, dt, lambda, gj);
            g.row(j) = gj;
        }
    }
    return g;
}

/// Σ_s w_s ϑ_s g_s + 2α u dt.
inline Matrix assemble_gradient(const ParameterEnsemble& ens, std::span<const double> identifier,
                                std::span<const Matrix> scenario_gradients, const Control& u, const ControlCost& cc) {
    if (identifier.size() != ens.size() || scenario_gradients.size() != ens.size())
        throw std::invalid_argument("assemble_gradient: identifier or gradient count differs from ensemble size");
    Matrix g = cc.gradient(u);
    for (std::size_t s = 0; s < ens.size(); ++s) {
        const double coeff = ens.weight(s) * identifier[s];
        if (coeff == 0.0) continue;
        if (scenario_gradients[s].rows() != g.rows() || scenario_gradients[s].cols() != g.cols())
            throw std::invalid_argument("assemble_gradient: scenario gradient has wrong shape");
        g.noalias() += coeff * scenario_gradients[s];
    }
    return g;
}

struct Box {
    double lower;
    double upper;
};

/// Unconstrained: discrete L² norm of the gradient density g/dt, i.e.
/// ||g|| dt^{-1/2}. With a box: discrete L² norm of
/// u - clip(u - g/(2α dt)), the distance to the pointwise Hamiltonian minimizer.
inline double stationarity_residual(const Control& u, const Matrix& gradient, const ControlCost& cc,
                                    std::optional<Box> bounds = std::nullopt) {
    const double dt = u.grid().dt();
    if (gradient.rows() != u.values().rows() || gradient.cols() != u.values().cols())
        throw std::invalid_argument("stationarity_residual: gradient shape differs from control");
    if (!bounds) return gradient.norm() / std::sqrt(dt);
    if (!(cc.alpha > 0.0)) throw std::invalid_argument("stationarity_residual: box form requires alpha > 0");
    const Matrix target = u.values() - gradient / (2.0 * cc.alpha * dt);
    const Matrix projected = target.cwiseMax(bounds->lower).cwiseMin(bounds->upper);
    return (u.values() - projected).norm() * std::sqrt(dt);
}

}  // namespace riskctrl
