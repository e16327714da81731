#pragma once

// Scenario ensembles, time grids, piecewise-constant controls and trajectory
// storage shared by every other part of the library.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace riskctrl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Finite atomic probability measure over the uncertain parameter.
///
/// The scenario index is the identity key; parameter values may coincide.
class ParameterEnsemble {
public:
    ParameterEnsemble(std::vector<double> thetas, std::vector<double> weights)
        : thetas_(std::move(thetas)), weights_(std::move(weights)) {
        if (thetas_.empty())
            throw std::invalid_argument("ParameterEnsemble: at least one scenario required");
        if (thetas_.size() != weights_.size())
            throw std::invalid_argument("ParameterEnsemble: thetas and weights differ in length");
        double total = 0.0;
        for (double w : weights_) {
            if (!(w >= 0.0) || !std::isfinite(w))
                throw std::invalid_argument("ParameterEnsemble: weights must be finite and nonnegative");
            total += w;
        }
        if (std::abs(total - 1.0) > 1e-12)
            throw std::invalid_argument("ParameterEnsemble: weights must sum to one");
    }

    /// Equal weights 1/S on the given atoms.
    static ParameterEnsemble uniform(std::vector<double> thetas) {
        if (thetas.empty())
            throw std::invalid_argument("ParameterEnsemble: at least one scenario required");
        const std::size_t count = thetas.size();
        std::vector<double> weights(count, 1.0 / static_cast<double>(count));
        return normalized(std::move(thetas), std::move(weights));
    }

    std::size_t size() const noexcept { return thetas_.size(); }
    double theta(std::size_t s) const { return thetas_.at(s); }
    double weight(std::size_t s) const { return weights_.at(s); }
    const std::vector<double>& thetas() const noexcept { return thetas_; }
    const std::vector<double>& weights() const noexcept { return weights_; }

    double mean_theta() const {
        double m = 0.0;
        for (std::size_t s = 0; s < size(); ++s) m += weights_[s] * thetas_[s];
        return m;
    }

private:
    // 1/S summed S times can miss 1 by a few ulps; rescale once so the
    // constructor invariant holds for every S.
    static ParameterEnsemble normalized(std::vector<double> thetas, std::vector<double> weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        for (double& w : weights) w /= total;
        return ParameterEnsemble(std::move(thetas), std::move(weights));
    }

    std::vector<double> thetas_;
    std::vector<double> weights_;
};

/// N+1 equally spaced atoms on [lo, hi] with weights 1/(N+1).
inline ParameterEnsemble make_uniform_grid(double theta_lo, double theta_hi, int count) {
    if (!std::isfinite(theta_lo) || !std::isfinite(theta_hi) || theta_lo > theta_hi)
        throw std::invalid_argument("make_uniform_grid: require finite theta_lo <= theta_hi");
    if (count < 1) throw std::invalid_argument("make_uniform_grid: N must be at least 1");
    std::vector<double> thetas(static_cast<std::size_t>(count) + 1);
    for (int n = 0; n <= count; ++n)
        thetas[static_cast<std::size_t>(n)] =
            theta_lo + (theta_hi - theta_lo) * static_cast<double>(n) / static_cast<double>(count);
    return ParameterEnsemble::uniform(std::move(thetas));
}

/// Uniform grid on [0, T] with K steps.
class ControlGrid {
public:
    ControlGrid(double horizon, int steps) : horizon_(horizon), steps_(steps) {
        if (steps < 1) throw std::invalid_argument("ControlGrid: at least one step required");
        if (!(horizon > 0.0) || !std::isfinite(horizon))
            throw std::invalid_argument("ControlGrid: horizon must be positive and finite");
        dt_ = horizon / static_cast<double>(steps);
    }

    /// Grid from a horizon and a step size; T/dt must be an integer.
    static ControlGrid from_step(double horizon, double dt) {
        if (!(dt > 0.0) || !std::isfinite(dt))
            throw std::invalid_argument("ControlGrid: dt must be positive and finite");
        const double ratio = horizon / dt;
        const double rounded = std::round(ratio);
        if (rounded < 1.0 || std::abs(ratio - rounded) > 1e-9 * std::max(1.0, ratio))
            throw std::invalid_argument("ControlGrid: T/dt is not an integer");
        return ControlGrid(horizon, static_cast<int>(rounded));
    }

    double horizon() const noexcept { return horizon_; }
    int steps() const noexcept { return steps_; }
    double dt() const noexcept { return dt_; }
    double node(int j) const noexcept { return dt_ * static_cast<double>(j); }

    bool operator==(const ControlGrid& other) const noexcept {
        return steps_ == other.steps_ && horizon_ == other.horizon_;
    }

private:
    double horizon_;
    int steps_;
    double dt_;
};

/// Multi-channel control, constant on [j dt, (j+1) dt).
///
/// values() is K x k: row j holds the channel values on interval j.
class Control {
public:
    Control(ControlGrid grid, int channels) : grid_(grid), values_(Matrix::Zero(grid.steps(), channels)) {
        if (channels < 1) throw std::invalid_argument("Control: at least one channel required");
    }

    Control(ControlGrid grid, Matrix values) : grid_(grid), values_(std::move(values)) {
        if (values_.rows() != grid_.steps())
            throw std::invalid_argument("Control: value rows must equal the number of grid steps");
        if (values_.cols() < 1) throw std::invalid_argument("Control: at least one channel required");
        if (!values_.allFinite()) throw std::invalid_argument("Control: values must be finite");
    }

    /// Rebuild a control from a flat coefficient vector (column-major K x k).
    static Control from_flat(ControlGrid grid, int channels, const Vector& flat) {
        if (flat.size() != static_cast<Eigen::Index>(grid.steps()) * channels)
            throw std::invalid_argument("Control: flat vector has wrong length");
        return Control(grid, Matrix(Eigen::Map<const Matrix>(flat.data(), grid.steps(), channels)));
    }

    const ControlGrid& grid() const noexcept { return grid_; }
    int channels() const noexcept { return static_cast<int>(values_.cols()); }
    int steps() const noexcept { return grid_.steps(); }
    const Matrix& values() const noexcept { return values_; }
    double operator()(int step, int channel) const { return values_(step, channel); }
    Eigen::RowVectorXd row(int step) const { return values_.row(step); }

    Vector flat() const { return Eigen::Map<const Vector>(values_.data(), values_.size()); }

    bool same_shape(const Control& other) const noexcept {
        return grid_ == other.grid_ && channels() == other.channels();
    }

private:
    ControlGrid grid_;
    Matrix values_;
};

/// Sum_j |u_j| dt with |.| the Euclidean norm across channels.
inline double control_l1_norm(const Control& u) {
    double total = 0.0;
    for (int j = 0; j < u.steps(); ++j) total += u.values().row(j).norm();
    return total * u.grid().dt();
}

/// Sum_j |u_j|^2 dt.
inline double control_l2_norm_sq(const Control& u) {
    double total = 0.0;
    for (int j = 0; j < u.steps(); ++j) total += u.values().row(j).squaredNorm();
    return total * u.grid().dt();
}

/// States of a single scenario: column j is the state at node j (n x (K+1)).
using ScenarioPath = Matrix;

/// Per-scenario state paths for a whole ensemble.
struct EnsembleTrajectory {
    std::vector<ScenarioPath> states;
    ControlGrid grid;

    std::size_t size() const noexcept { return states.size(); }
    const ScenarioPath& operator[](std::size_t s) const { return states.at(s); }
    Vector terminal(std::size_t s) const { return states.at(s).col(states.at(s).cols() - 1); }
};

/// Propagation produced a non-finite state.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(int step, long scenario = -1)
        : std::runtime_error(message(step, scenario)), step_(step), scenario_(scenario) {}

    int step() const noexcept { return step_; }
    long scenario() const noexcept { return scenario_; }

    DivergenceError with_scenario(long scenario) const { return DivergenceError(step_, scenario); }

private:
    static std::string message(int step, long scenario) {
        std::string msg = "non-finite state at step " + std::to_string(step);
        if (scenario >= 0) msg += " in scenario " + std::to_string(scenario);
        return msg;
    }

    int step_;
    long scenario_;
};

}  // namespace riskctrl
