#pragma once

// Two-level quantum system  i ψ' = (H0(θ) + u H1) ψ  with
// H0(θ) = diag(E+θ, -E-θ) and H1 = σ_x.
//
// States are complex 2-vectors. The generic machinery sees the realified
// 4-vector (Re ψ1, Im ψ1, Re ψ2, Im ψ2).

#include "riskctrl/dynamics.hpp"
#include "riskctrl/expm.hpp"

#include <complex>
#include <numbers>
#include <stdexcept>
#include <utility>

namespace riskctrl::qubit {

using Complex = std::complex<double>;
using ComplexState = Eigen::Vector2cd;
using Unitary = Eigen::Matrix2cd;
using Vector3 = Eigen::Vector3d;
using Vector4 = Eigen::Vector4d;
using Matrix4 = Eigen::Matrix4d;

inline constexpr Complex I{0.0, 1.0};

inline Unitary pauli_x() { return (Unitary() << 0.0, 1.0, 1.0, 0.0).finished(); }
inline Unitary pauli_y() { return (Unitary() << 0.0, -I, I, 0.0).finished(); }
inline Unitary pauli_z() { return (Unitary() << 1.0, 0.0, 0.0, -1.0).finished(); }

/// c0 I + c . σ
inline Unitary pauli_combination(double c0, const Vector3& c) {
    return c0 * Unitary::Identity() + c(0) * pauli_x() + c(1) * pauli_y() + c(2) * pauli_z();
}

/// exp(-i dt (c0 I + c.σ)) in closed form:
/// e^{-i c0 dt} (cos(|c| dt) I - i sin(|c| dt) ĉ.σ).
inline Unitary pauli_expm(double c0, const Vector3& c, double dt) {
    const double norm = c.norm();
    const double angle = norm * dt;
    double cos_part;
    double sinc_dt;  // sin(|c| dt) / |c|
    if (std::abs(angle) < 1e-8) {
        const double a2 = angle * angle;
        cos_part = 1.0 - 0.5 * a2;
        sinc_dt = dt * (1.0 - a2 / 6.0);
    } else {
        cos_part = std::cos(angle);
        sinc_dt = std::sin(angle) / norm;
    }
    const Complex phase = std::exp(-I * (c0 * dt));
    const Unitary rotation = cos_part * Unitary::Identity() - I * sinc_dt * pauli_combination(0.0, c);
    return phase * rotation;
}

/// Realified view of a complex state.
inline Vector4 realify(const ComplexState& psi) {
    return Vector4(psi(0).real(), psi(0).imag(), psi(1).real(), psi(1).imag());
}

inline ComplexState complexify(const Eigen::Ref<const Eigen::VectorXd>& x) {
    if (x.size() != 4) throw std::invalid_argument("qubit: realified state must have 4 components");
    return ComplexState(Complex(x(0), x(1)), Complex(x(2), x(3)));
}

/// Real 4x4 matrix acting on realified states like the complex 2x2 matrix m.
inline Matrix4 realify(const Unitary& m) {
    Matrix4 r;
    for (int row = 0; row < 2; ++row)
        for (int col = 0; col < 2; ++col) {
            const Complex z = m(row, col);
            r.block<2, 2>(2 * row, 2 * col) << z.real(), -z.imag(), z.imag(), z.real();
        }
    return r;
}

/// Cached data of one exact step, reused for derivatives.
struct StepData {
    Vector3 coefficients;  // c, with H = c.σ
    double norm = 0.0;     // |c|
    Unitary propagator;    // exp(-i dt H)
};

/// Energy gap, target and initial state of the two-level ensemble.
class QubitSystem {
public:
    explicit QubitSystem(double energy = 1.0, ComplexState target = ComplexState(1.0, 0.0),
                         ComplexState initial = ComplexState(0.0, 1.0))
        : energy_(energy), target_(std::move(target)), initial_(std::move(initial)) {
        if (!(energy > 0.0)) throw std::invalid_argument("QubitSystem: E must be positive");
        if (std::abs(target_.norm() - 1.0) > 1e-12 || std::abs(initial_.norm() - 1.0) > 1e-12)
            throw std::invalid_argument("QubitSystem: target and initial state must have unit norm");
    }

    double energy() const noexcept { return energy_; }
    const ComplexState& target() const noexcept { return target_; }
    const ComplexState& initial() const noexcept { return initial_; }

    /// Pauli coefficients of H0(θ) + u H1.
    Vector3 coefficients(double theta, double u) const { return Vector3(u, 0.0, energy_ + theta); }

    Unitary drift_hamiltonian(double theta) const { return pauli_combination(0.0, coefficients(theta, 0.0)); }
    static Unitary control_hamiltonian() { return pauli_x(); }

    // ControlAffineSystem capabilities on the realified state.
    int state_dim() const noexcept { return 4; }
    int channels() const noexcept { return 1; }
    Vector initial_state(double) const { return realify(initial_); }
    Matrix drift_jacobian(const Vector&, double theta) const { return realify(Unitary(-I * drift_hamiltonian(theta))); }
    Vector drift(const Vector& x, double theta) const { return drift_jacobian(x, theta) * x; }
    Matrix field_jacobian(int, const Vector&, double) const { return realify(Unitary(-I * control_hamiltonian())); }
    Vector field(int i, const Vector& x, double theta) const { return field_jacobian(i, x, theta) * x; }

    ExactStep exact_step(const Vector& x, double theta, const RowVector& u, double dt) const {
        Matrix transition = realify(pauli_expm(0.0, coefficients(theta, u(0)), dt));
        Vector next = transition * x;
        return {std::move(next), std::move(transition)};
    }

    StepSensitivity exact_step_sensitivity(const Vector& x, double theta, const RowVector& u, double dt) const {
        const Unitary generator = -I * dt * pauli_combination(0.0, coefficients(theta, u(0)));
        const Unitary direction = -I * dt * control_hamiltonian();
        const auto [propagator, derivative] = expm_frechet(generator, direction);
        StepSensitivity out{realify(propagator), Matrix(4, 1)};
        out.control_jacobian.col(0) = realify(derivative) * x;
        return out;
    }

private:
    double energy_;
    ComplexState target_;
    ComplexState initial_;
};

/// ψ_next = exp(-i dt (H0(θ) + u H1)) ψ.
inline std::pair<ComplexState, StepData> qubit_step(const QubitSystem& sys, const ComplexState& psi, double theta,
                                                    double u, double dt) {
    if (std::abs(psi.norm() - 1.0) > 1e-9) throw std::invalid_argument("qubit_step: state must have unit norm");
    StepData data;
    data.coefficients = sys.coefficients(theta, u);
    data.norm = data.coefficients.norm();
    data.propagator = pauli_expm(0.0, data.coefficients, dt);
    ComplexState next = data.propagator * psi;
    return {next, data};
}

/// d(ψ_next)/du as a realified 4-vector, from the Fréchet derivative of the
/// step propagator in the direction -i dt H1.
inline Vector4 step_control_derivative(const StepData& data, const ComplexState& psi, double dt) {
    const Unitary generator = -I * dt * pauli_combination(0.0, data.coefficients);
    const Unitary direction = -I * dt * QubitSystem::control_hamiltonian();
    const Unitary derivative = expm_frechet(generator, direction).second;
    return realify(ComplexState(derivative * psi));
}

/// 1 - |<target|ψ>|^2 and its gradient with respect to the realified ψ.
struct Infidelity {
    double value;
    Vector4 gradient;
};

inline Infidelity overlap_infidelity(const ComplexState& psi, const ComplexState& target) {
    const Complex overlap = target.dot(psi);  // conj(target)^T psi
    Infidelity out{1.0 - std::norm(overlap), Vector4::Zero()};
    // d|z|^2 = 2 Re(conj(z) dz), dz/dRe ψ_k = conj(t_k), dz/dIm ψ_k = i conj(t_k)
    for (int k = 0; k < 2; ++k) {
        const Complex tk = std::conj(target(k));
        out.gradient(2 * k) = -2.0 * (std::conj(overlap) * tk).real();
        out.gradient(2 * k + 1) = -2.0 * (std::conj(overlap) * I * tk).real();
    }
    return out;
}

inline double overlap(const ComplexState& psi, const ComplexState& target) { return std::abs(target.dot(psi)); }

/// Terminal-cost integrand a(t, x, θ) = 1 - |<target|ψ(x)>|^2.
struct InfidelityIntegrand {
    ComplexState target = ComplexState(1.0, 0.0);

    double value(double, const Vector& x, double) const { return overlap_infidelity(complexify(x), target).value; }
    Vector gradient(double, const Vector& x, double) const {
        return overlap_infidelity(complexify(x), target).gradient;
    }
};

struct ReferenceControlParams {
    double eps1 = 0.5;
    double eps2 = 0.1;
    double v0 = -0.5;
    double v1 = 0.5;
};

/// Explicit ensemble-transfer pulse
/// 2ε1 (1 - cos(2π ε1 ε2 t)) cos(2Et + (v0-v1)/(π ε1 ε2) sin(π ε1 ε2 t) + (v0+v1) t).
inline double reference_control(double t, double energy, const ReferenceControlParams& p = {}) {
    constexpr double pi = std::numbers::pi;
    const double rate = pi * p.eps1 * p.eps2;
    const double envelope = 2.0 * p.eps1 * (1.0 - std::cos(2.0 * rate * t));
    const double phase = 2.0 * energy * t + (p.v0 - p.v1) / rate * std::sin(rate * t) + (p.v0 + p.v1) * t;
    return envelope * std::cos(phase);
}

/// Reference pulse sampled at the left endpoint of every control interval.
inline Control sample_reference_control(const ControlGrid& grid, double energy, const ReferenceControlParams& p = {}) {
    Matrix values(grid.steps(), 1);
    for (int j = 0; j < grid.steps(); ++j) values(j, 0) = reference_control(grid.node(j), energy, p);
    return Control(grid, std::move(values));
}

}  // namespace riskctrl::qubit
