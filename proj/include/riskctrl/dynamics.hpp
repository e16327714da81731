#pragma once

// Control-affine ensemble propagation x' = F0(x,θ) + Σ u_i F_i(x,θ), the
// linearized (variational) trajectory, and fundamental matrices.

#include "riskctrl/ensemble.hpp"
#include "riskctrl/parallel.hpp"

#include <concepts>
#include <stdexcept>
#include <string_view>

namespace riskctrl {

using RowVector = Eigen::RowVectorXd;

/// Capabilities every system must provide, per scenario parameter θ.
template <class S>
concept ControlAffineSystem = requires(const S& sys, const Vector& x, double theta, int i) {
    { sys.state_dim() } -> std::convertible_to<int>;
    { sys.channels() } -> std::convertible_to<int>;
    { sys.initial_state(theta) } -> std::convertible_to<Vector>;
    { sys.drift(x, theta) } -> std::convertible_to<Vector>;
    { sys.drift_jacobian(x, theta) } -> std::convertible_to<Matrix>;
    { sys.field(i, x, theta) } -> std::convertible_to<Vector>;
    { sys.field_jacobian(i, x, theta) } -> std::convertible_to<Matrix>;
};

/// Result of one exact step: next state and the state-transition matrix.
struct ExactStep {
    Vector next;
    Matrix transition;
};

/// Transition matrix of a step together with d(next)/d(u_i), column i.
struct StepSensitivity {
    Matrix transition;
    Matrix control_jacobian;
};

/// Systems that are linear in the state for frozen controls and can step exactly.
template <class S>
concept BilinearSystem = ControlAffineSystem<S> &&
    requires(const S& sys, const Vector& x, double theta, const RowVector& u, double dt) {
        { sys.exact_step(x, theta, u, dt) } -> std::convertible_to<ExactStep>;
        { sys.exact_step_sensitivity(x, theta, u, dt) } -> std::convertible_to<StepSensitivity>;
    };

enum class Stepper { ExactBilinear, RK4 };

inline std::string_view to_string(Stepper s) {
    return s == Stepper::ExactBilinear ? "exact" : "rk4";
}

template <ControlAffineSystem S>
void require_compatible(Stepper stepper) {
    if constexpr (!BilinearSystem<S>) {
        if (stepper == Stepper::ExactBilinear)
            throw std::invalid_argument("ExactBilinear stepper requires a system with exact_step");
    }
}

/// F0(x) + Σ u_i F_i(x)
template <ControlAffineSystem S>
Vector vector_field(const S& sys, const Vector& x, double theta, const RowVector& u) {
    Vector f = sys.drift(x, theta);
    for (int i = 0; i < sys.channels(); ++i)
        if (u(i) != 0.0) f.noalias() += u(i) * sys.field(i, x, theta);
    return f;
}

/// n x k matrix [F_1(x) ... F_k(x)].
template <ControlAffineSystem S>
Matrix field_matrix(const S& sys, const Vector& x, double theta) {
    Matrix b(sys.state_dim(), sys.channels());
    for (int i = 0; i < sys.channels(); ++i) b.col(i) = sys.field(i, x, theta);
    return b;
}

/// ∇F0(x) + Σ u_i ∇F_i(x)
template <ControlAffineSystem S>
Matrix state_jacobian(const S& sys, const Vector& x, double theta, const RowVector& u) {
    Matrix jac = sys.drift_jacobian(x, theta);
    for (int i = 0; i < sys.channels(); ++i)
        if (u(i) != 0.0) jac.noalias() += u(i) * sys.field_jacobian(i, x, theta);
    return jac;
}

/// Classical RK4 step with the control frozen over the step.
template <ControlAffineSystem S>
Vector rk4_step(const S& sys, const Vector& x, double theta, const RowVector& u, double dt) {
    const Vector k1 = vector_field(sys, x, theta, u);
    const Vector k2 = vector_field(sys, Vector(x + 0.5 * dt * k1), theta, u);
    const Vector k3 = vector_field(sys, Vector(x + 0.5 * dt * k2), theta, u);
    const Vector k4 = vector_field(sys, Vector(x + dt * k3), theta, u);
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// One step of the selected scheme.
template <ControlAffineSystem S>
Vector advance(const S& sys, const Vector& x, double theta, const RowVector& u, double dt, Stepper stepper) {
    if constexpr (BilinearSystem<S>) {
        if (stepper == Stepper::ExactBilinear) return sys.exact_step(x, theta, u, dt).next;
    } else {
        require_compatible<S>(stepper);
    }
    return rk4_step(sys, x, theta, u, dt);
}

/// States at all grid nodes for one parameter value. Throws DivergenceError
/// with the index of the first node whose state is not finite.
template <ControlAffineSystem S>
ScenarioPath propagate_scenario(const S& sys, double theta, const Control& u, Stepper stepper) {
    require_compatible<S>(stepper);
    if (u.channels() != sys.channels())
        throw std::invalid_argument("propagate_scenario: control channel count does not match system");
    const int steps = u.steps();
    const double dt = u.grid().dt();
    ScenarioPath path(sys.state_dim(), steps + 1);
    path.col(0) = sys.initial_state(theta);
    for (int j = 0; j < steps; ++j) {
        path.col(j + 1) = advance(sys, Vector(path.col(j)), theta, u.row(j), dt, stepper);
        if (!path.col(j + 1).allFinite()) throw DivergenceError(j + 1);
    }
    return path;
}

template <ControlAffineSystem S>
EnsembleTrajectory propagate_ensemble(const S& sys, const ParameterEnsemble& ens, const Control& u, Stepper stepper,
                                      Parallelism par = {}) {
    EnsembleTrajectory traj{std::vector<ScenarioPath>(ens.size()), u.grid()};
    parallel_for(ens.size(), par, [&](std::size_t s) {
        try {
            traj.states[s] = propagate_scenario(sys, ens.theta(s), u, stepper);
        } catch (const DivergenceError& e) {
            throw e.with_scenario(static_cast<long>(s));
        }
    });
    return traj;
}

namespace detail {

// Cubic Hermite interpolation of the base trajectory inside step j at
// fraction s in [0, 1], using the vector field at both nodes.
template <ControlAffineSystem S>
Vector hermite_state(const S& sys, const ScenarioPath& base, int j, double theta, const RowVector& u, double dt,
                     double s) {
    const Vector x0 = base.col(j);
    const Vector x1 = base.col(j + 1);
    const Vector f0 = vector_field(sys, x0, theta, u);
    const Vector f1 = vector_field(sys, x1, theta, u);
    const double s2 = s * s;
    const double s3 = s2 * s;
    const double h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    const double h10 = s3 - 2.0 * s2 + s;
    const double h01 = -2.0 * s3 + 3.0 * s2;
    const double h11 = s3 - s2;
    return h00 * x0 + h10 * dt * f0 + h01 * x1 + h11 * dt * f1;
}

// RK4 transition matrix of Y' = J(t) Y over [t_j, t_j + tau] along the base path.
template <ControlAffineSystem S>
Matrix variational_transition(const S& sys, const ScenarioPath& base, int j, double theta, const RowVector& u,
                              double dt, double tau) {
    const double frac = tau / dt;
    const Vector x_start = base.col(j);
    const Vector x_mid = hermite_state(sys, base, j, theta, u, dt, 0.5 * frac);
    const Vector x_end = hermite_state(sys, base, j, theta, u, dt, frac);
    const Matrix j0 = state_jacobian(sys, x_start, theta, u);
    const Matrix jm = state_jacobian(sys, x_mid, theta, u);
    const Matrix j1 = state_jacobian(sys, x_end, theta, u);
    const Matrix id = Matrix::Identity(base.rows(), base.rows());
    const Matrix k1 = j0;
    const Matrix k2 = jm * (id + 0.5 * tau * k1);
    const Matrix k3 = jm * (id + 0.5 * tau * k2);
    const Matrix k4 = j1 * (id + tau * k3);
    return id + (tau / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

// Transition over [t_j, t_j + tau] of the selected scheme, plus the base state at its end.
template <ControlAffineSystem S>
ExactStep partial_transition(const S& sys, const ScenarioPath& base, int j, double theta, const RowVector& u,
                             double dt, double tau, Stepper stepper) {
    if constexpr (BilinearSystem<S>) {
        if (stepper == Stepper::ExactBilinear) return sys.exact_step(Vector(base.col(j)), theta, u, tau);
    }
    return {hermite_state(sys, base, j, theta, u, dt, tau / dt),
            variational_transition(sys, base, j, theta, u, dt, tau)};
}

inline void check_path(const ScenarioPath& base, const Control& u, int state_dim, std::string_view who) {
    if (base.cols() != u.steps() + 1 || base.rows() != state_dim)
        throw std::invalid_argument(std::string(who) + ": base trajectory does not match control grid");
}

}  // namespace detail

/// Solves y' = J(x_u(t)) y + B(x_u(t)) v, y(0) = 0, with RK4 along the
/// stored base path. Sub-step base states come from cubic Hermite
/// interpolation between nodes.
template <ControlAffineSystem S>
ScenarioPath linearize_scenario(const S& sys, double theta, const Control& u, const Control& v,
                                const ScenarioPath& base) {
    if (!u.same_shape(v)) throw std::invalid_argument("linearize_scenario: u and v differ in shape");
    detail::check_path(base, u, sys.state_dim(), "linearize_scenario");
    const int steps = u.steps();
    const double dt = u.grid().dt();
    ScenarioPath y = ScenarioPath::Zero(sys.state_dim(), steps + 1);
    for (int j = 0; j < steps; ++j) {
        const RowVector uj = u.row(j);
        const Vector vj = v.row(j).transpose();
        const Vector x0 = base.col(j);
        const Vector x1 = base.col(j + 1);
        const Vector xm = detail::hermite_state(sys, base, j, theta, uj, dt, 0.5);
        const Matrix a0 = state_jacobian(sys, x0, theta, uj);
        const Matrix am = state_jacobian(sys, xm, theta, uj);
        const Matrix a1 = state_jacobian(sys, x1, theta, uj);
        const Vector b0 = field_matrix(sys, x0, theta) * vj;
        const Vector bm = field_matrix(sys, xm, theta) * vj;
        const Vector b1 = field_matrix(sys, x1, theta) * vj;
        const Vector yj = y.col(j);
        const Vector k1 = a0 * yj + b0;
        const Vector k2 = am * (yj + 0.5 * dt * k1) + bm;
        const Vector k3 = am * (yj + 0.5 * dt * k2) + bm;
        const Vector k4 = a1 * (yj + dt * k3) + b1;
        y.col(j + 1) = yj + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    return y;
}

/// M and its inverse at every grid node.
struct FundamentalMatrices {
    std::vector<Matrix> forward;  // M(t_j)
    std::vector<Matrix> inverse;  // M(t_j)^{-1}

    double max_inverse_defect() const {
        double worst = 0.0;
        for (std::size_t j = 0; j < forward.size(); ++j) {
            const Matrix defect = forward[j] * inverse[j] - Matrix::Identity(forward[j].rows(), forward[j].cols());
            worst = std::max(worst, defect.norm());
        }
        return worst;
    }
};

/// M' = J M, M(0) = I, and (M^{-1})' = -M^{-1} J. Each step multiplies M by
/// the step transition S_j and M^{-1} by S_j^{-1}; S_j is the exact step
/// matrix for ExactBilinear, or the RK4 transition of the variational
/// equation along the base path.
template <ControlAffineSystem S>
FundamentalMatrices fundamental_matrices(const S& sys, double theta, const Control& u, const ScenarioPath& base,
                                         Stepper stepper) {
    require_compatible<S>(stepper);
    detail::check_path(base, u, sys.state_dim(), "fundamental_matrices");
    const int n = sys.state_dim();
    const int steps = u.steps();
    const double dt = u.grid().dt();
    FundamentalMatrices fm;
    fm.forward.reserve(steps + 1);
    fm.inverse.reserve(steps + 1);
    fm.forward.push_back(Matrix::Identity(n, n));
    fm.inverse.push_back(Matrix::Identity(n, n));
    for (int j = 0; j < steps; ++j) {
        const Matrix step = detail::partial_transition(sys, base, j, theta, u.row(j), dt, dt, stepper).transition;
        fm.forward.push_back(step * fm.forward.back());
        fm.inverse.push_back(fm.inverse.back() * step.partialPivLu().inverse());
    }
    return fm;
}

/// Variation-of-constants form y(t_j) = M(t_j) ∫_0^{t_j} M^{-1} B v dt,
/// accumulated with Simpson's rule on each step (midpoint from a half step).
/// Kept as an independent cross-check of linearize_scenario.
template <ControlAffineSystem S>
ScenarioPath duhamel_linearized(const S& sys, double theta, const Control& u, const Control& v,
                                const ScenarioPath& base, const FundamentalMatrices& fm, Stepper stepper) {
    if (!u.same_shape(v)) throw std::invalid_argument("duhamel_linearized: u and v differ in shape");
    detail::check_path(base, u, sys.state_dim(), "duhamel_linearized");
    const int steps = u.steps();
    const double dt = u.grid().dt();
    ScenarioPath y = ScenarioPath::Zero(sys.state_dim(), steps + 1);
    Vector accumulated = Vector::Zero(sys.state_dim());
    for (int j = 0; j < steps; ++j) {
        const RowVector uj = u.row(j);
        const Vector vj = v.row(j).transpose();
        if (vj.isZero(0.0)) {
            y.col(j + 1) = fm.forward[j + 1] * accumulated;
            continue;
        }
        const ExactStep half = detail::partial_transition(sys, base, j, theta, uj, dt, 0.5 * dt, stepper);
        const Matrix inv_mid = fm.inverse[j] * half.transition.partialPivLu().inverse();
        const Vector g0 = fm.inverse[j] * (field_matrix(sys, Vector(base.col(j)), theta) * vj);
        const Vector gm = inv_mid * (field_matrix(sys, half.next, theta) * vj);
        const Vector g1 = fm.inverse[j + 1] * (field_matrix(sys, Vector(base.col(j + 1)), theta) * vj);
        accumulated += (dt / 6.0) * (g0 + 4.0 * gm + g1);
        y.col(j + 1) = fm.forward[j + 1] * accumulated;
    }
    return y;
}

}  // namespace riskctrl
