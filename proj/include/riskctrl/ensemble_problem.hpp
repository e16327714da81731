#pragma once

#include "riskctrl/cost.hpp"
#include "riskctrl/risk.hpp"

#include <span>
#include <utility>
#include <vector>

namespace riskctrl {

/// Composite objective R(J_u) + α ρ(u) over an ensemble, exposed on flat
/// control coefficient vectors (column-major K x k).
///
/// Scenario loops run through parallel_for; every reduction over scenarios
/// is sequential in s, so results do not depend on the worker count.
template <ControlAffineSystem S, Integrand A>
class EnsembleProblem {
public:
    EnsembleProblem(S system, A integrand, ParameterEnsemble ensemble, ControlGrid grid, CostMeasure measure,
                    ControlCost control_cost, Stepper stepper, Parallelism par = {})
        : system_(std::move(system)),
          integrand_(std::move(integrand)),
          ensemble_(std::move(ensemble)),
          grid_(grid),
          measure_(std::move(measure)),
          control_cost_(control_cost),
          stepper_(stepper),
          par_(par) {
        require_compatible<S>(stepper_);
        measure_.validate(grid_);
    }

    const S& system() const noexcept { return system_; }
    const A& integrand() const noexcept { return integrand_; }
    const ParameterEnsemble& ensemble() const noexcept { return ensemble_; }
    const ControlGrid& grid() const noexcept { return grid_; }
    const CostMeasure& measure() const noexcept { return measure_; }
    const ControlCost& control_cost() const noexcept { return control_cost_; }
    Stepper stepper() const noexcept { return stepper_; }
    int channels() const { return system_.channels(); }
    Eigen::Index dimension() const { return static_cast<Eigen::Index>(grid_.steps()) * channels(); }

    void set_parallelism(Parallelism par) noexcept { par_ = par; }

    Control control(const Vector& flat) const { return Control::from_flat(grid_, channels(), flat); }

    std::span<const double> weights() const noexcept { return ensemble_.weights(); }

    EnsembleTrajectory trajectories(const Control& u) const {
        return propagate_ensemble(system_, ensemble_, u, stepper_, par_);
    }

    std::vector<double> scenario_costs(const Control& u) const {
        std::vector<double> costs(ensemble_.size());
        parallel_for(ensemble_.size(), par_, [&](std::size_t s) {
            const double theta = ensemble_.theta(s);
            try {
                const ScenarioPath path = propagate_scenario(system_, theta, u, stepper_);
                costs[s] = scenario_cost(path, grid_, integrand_, measure_, theta);
            } catch (const DivergenceError& e) {
                throw e.with_scenario(static_cast<long>(s));
            }
        });
        return costs;
    }
    std::vector<double> scenario_costs(const Vector& flat) const { return scenario_costs(control(flat)); }

    /// Per-scenario gradients of J_s; entries with a zero mask are left empty.
    std::vector<Matrix> scenario_gradients(const Control& u, std::span<const double> mask = {}) const {
        std::vector<Matrix> grads(ensemble_.size());
        parallel_for(ensemble_.size(), par_, [&](std::size_t s) {
            if (!mask.empty() && mask[s] == 0.0) return;
            const double theta = ensemble_.theta(s);
            try {
                const ScenarioPath path = propagate_scenario(system_, theta, u, stepper_);
                Matrix g;
                adjoint_solve(system_, theta, u, path, integrand_, measure_, stepper_, &g);
                grads[s] = std::move(g);
            } catch (const DivergenceError& e) {
                throw e.with_scenario(static_cast<long>(s));
            }
        });
        return grads;
    }

    /// Σ_s c_s ∇J_s(u), skipping c_s = 0.
    Matrix weighted_gradient(const Control& u, std::span<const double> coeffs) const {
        if (coeffs.size() != ensemble_.size())
            throw std::invalid_argument("weighted_gradient: one coefficient per scenario required");
        const std::vector<Matrix> grads = scenario_gradients(u, coeffs);
        Matrix total = Matrix::Zero(grid_.steps(), channels());
        for (std::size_t s = 0; s < grads.size(); ++s)
            if (coeffs[s] != 0.0) total.noalias() += coeffs[s] * grads[s];
        return total;
    }
    Vector weighted_gradient(const Vector& flat, std::span<const double> coeffs) const {
        const Matrix g = weighted_gradient(control(flat), coeffs);
        return Eigen::Map<const Vector>(g.data(), g.size());
    }

    double regularizer(const Vector& flat) const { return control_cost_.value(control(flat)); }
    Vector regularizer_gradient(const Vector& flat) const {
        const Matrix g = control_cost_.gradient(control(flat));
        return Eigen::Map<const Vector>(g.data(), g.size());
    }

    /// Unconstrained stationarity residual of a flat gradient.
    double stationarity(const Vector& flat, const Vector& gradient) const {
        const Control u = control(flat);
        const Matrix g = Eigen::Map<const Matrix>(gradient.data(), grid_.steps(), channels());
        return stationarity_residual(u, g, control_cost_);
    }

    /// R(J_u) + α ρ(u).
    double objective(const RiskMeasure& risk, const Control& u) const {
        return evaluate(risk, scenario_costs(u), weights()) + control_cost_.value(u);
    }

    /// Gradient of R(J_u) + α ρ(u) with the exact risk identifier.
    Matrix gradient(const RiskMeasure& risk, const Control& u) const {
        const std::vector<double> costs = scenario_costs(u);
        const std::vector<double> identifier = risk_identifier(risk, costs, weights());
        std::vector<double> mask(identifier.size());
        for (std::size_t s = 0; s < mask.size(); ++s) mask[s] = ensemble_.weight(s) * identifier[s];
        const std::vector<Matrix> grads = scenario_gradients(u, mask);
        std::vector<Matrix> filled(grads.size());
        for (std::size_t s = 0; s < grads.size(); ++s)
            filled[s] = mask[s] == 0.0 ? Matrix::Zero(grid_.steps(), channels()) : grads[s];
        return assemble_gradient(ensemble_, identifier, filled, u, control_cost_);
    }

private:
    S system_;
    A integrand_;
    ParameterEnsemble ensemble_;
    ControlGrid grid_;
    CostMeasure measure_;
    ControlCost control_cost_;
    Stepper stepper_;
    Parallelism par_;
};

}  // namespace riskctrl
