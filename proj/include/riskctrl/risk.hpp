#pragma once

// Risk measures over finitely many scenario costs: expectation, worst case,
// and average value-at-risk, with risk identifiers (dual weights ϑ) and a
// softplus-smoothed AVaR.
//
// AVaR_β(J) = inf_t { t + 1/(1-β) Σ_s w_s max(0, J_s - t) }.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace riskctrl {

class RiskMeasure {
public:
    enum class Kind { Expectation, WorstCase, AVaR };

    static RiskMeasure expectation() { return RiskMeasure(Kind::Expectation, 0.0); }
    static RiskMeasure worst_case() { return RiskMeasure(Kind::WorstCase, 0.0); }
    static RiskMeasure avar(double beta) {
        if (!(beta > 0.0 && beta < 1.0)) throw std::invalid_argument("AVaR: beta must lie in (0, 1)");
        return RiskMeasure(Kind::AVaR, beta);
    }

    Kind kind() const noexcept { return kind_; }
    double beta() const noexcept { return beta_; }

    std::string name() const {
        switch (kind_) {
            case Kind::Expectation: return "expectation";
            case Kind::WorstCase: return "worst_case";
            case Kind::AVaR: return "avar";
        }
        return "unknown";
    }

private:
    RiskMeasure(Kind kind, double beta) : kind_(kind), beta_(beta) {}

    Kind kind_;
    double beta_;
};

namespace detail {

inline void check_costs(std::span<const double> costs, std::span<const double> weights) {
    if (costs.empty() || costs.size() != weights.size())
        throw std::invalid_argument("risk: costs and weights must be nonempty and of equal length");
}

// Indices sorted by cost, ties by index.
inline std::vector<std::size_t> ascending_order(std::span<const double> costs) {
    std::vector<std::size_t> order(costs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return costs[a] < costs[b]; });
    return order;
}

inline void check_beta(double beta) {
    if (!(beta > 0.0 && beta < 1.0)) throw std::invalid_argument("AVaR: beta must lie in (0, 1)");
}

}  // namespace detail

/// t + 1/(1-β) Σ w_s max(0, J_s - t)
inline double ru_objective(double t, std::span<const double> costs, std::span<const double> weights, double beta) {
    detail::check_costs(costs, weights);
    detail::check_beta(beta);
    double excess = 0.0;
    for (std::size_t s = 0; s < costs.size(); ++s) excess += weights[s] * std::max(0.0, costs[s] - t);
    return t + excess / (1.0 - beta);
}

/// Upper β-quantile: the smallest cost whose cumulative weight reaches β.
inline double avar_threshold(std::span<const double> costs, std::span<const double> weights, double beta) {
    detail::check_costs(costs, weights);
    detail::check_beta(beta);
    const auto order = detail::ascending_order(costs);
    double cumulative = 0.0;
    for (std::size_t idx : order) {
        cumulative += weights[idx];
        if (cumulative >= beta) return costs[idx];
    }
    return costs[order.back()];
}

inline double evaluate(const RiskMeasure& r, std::span<const double> costs, std::span<const double> weights) {
    detail::check_costs(costs, weights);
    switch (r.kind()) {
        case RiskMeasure::Kind::Expectation: {
            double m = 0.0;
            for (std::size_t s = 0; s < costs.size(); ++s) m += weights[s] * costs[s];
            return m;
        }
        case RiskMeasure::Kind::WorstCase: return *std::max_element(costs.begin(), costs.end());
        case RiskMeasure::Kind::AVaR: {
            const double t = avar_threshold(costs, weights, r.beta());
            return ru_objective(t, costs, weights, r.beta());
        }
    }
    throw std::logic_error("evaluate: unknown risk measure");
}

/// Subgradient weights ϑ with Σ w ϑ = 1 and Σ w ϑ J = evaluate(r, J).
///
/// WorstCase picks the smallest maximizing index. AVaR fills ϑ = 1/(1-β)
/// from the largest costs down; the boundary cost level receives the
/// remaining mass, shared equally in ϑ (so proportionally to w) among tied
/// scenarios.
inline std::vector<double> risk_identifier(const RiskMeasure& r, std::span<const double> costs,
                                           std::span<const double> weights) {
    detail::check_costs(costs, weights);
    const std::size_t count = costs.size();
    std::vector<double> theta(count, 0.0);
    switch (r.kind()) {
        case RiskMeasure::Kind::Expectation: std::fill(theta.begin(), theta.end(), 1.0); return theta;
        case RiskMeasure::Kind::WorstCase: {
            const auto best = static_cast<std::size_t>(std::max_element(costs.begin(), costs.end()) - costs.begin());
            if (!(weights[best] > 0.0)) throw std::invalid_argument("risk_identifier: worst scenario has zero weight");
            theta[best] = 1.0 / weights[best];
            return theta;
        }
        case RiskMeasure::Kind::AVaR: break;
    }

    const double cap = 1.0 / (1.0 - r.beta());
    auto order = detail::ascending_order(costs);
    std::reverse(order.begin(), order.end());
    double mass = 0.0;
    std::size_t pos = 0;
    while (pos < count && mass < 1.0) {
        std::size_t end = pos;
        double group_weight = 0.0;
        while (end < count && costs[order[end]] == costs[order[pos]]) group_weight += weights[order[end++]];
        double value = cap;
        if (mass + cap * group_weight > 1.0) value = group_weight > 0.0 ? (1.0 - mass) / group_weight : 0.0;
        for (std::size_t k = pos; k < end; ++k) theta[order[k]] = value;
        mass += value * group_weight;
        pos = end;
    }
    return theta;
}

/// softplus_ε(z) = ε log(1 + e^{z/ε}), evaluated without overflow.
inline double softplus(double z, double eps) { return std::max(z, 0.0) + eps * std::log1p(std::exp(-std::abs(z) / eps)); }

/// d softplus_ε / dz = 1 / (1 + e^{-z/ε}).
inline double softplus_slope(double z, double eps) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z / eps));
    const double e = std::exp(z / eps);
    return e / (1.0 + e);
}

struct SmoothedAvar {
    double value;
    double d_threshold;
    std::vector<double> d_costs;
};

/// t + 1/(1-β) Σ w_s softplus_ε(J_s - t) with exact partials in t and J.
inline SmoothedAvar smoothed_avar(std::span<const double> costs, std::span<const double> weights, double beta,
                                  double t, double eps) {
    detail::check_costs(costs, weights);
    detail::check_beta(beta);
    if (!(eps > 0.0)) throw std::invalid_argument("smoothed_avar: eps must be positive");
    const double cap = 1.0 / (1.0 - beta);
    SmoothedAvar out{0.0, 1.0, std::vector<double>(costs.size())};
    double sum = 0.0;
    double slope_sum = 0.0;
    for (std::size_t s = 0; s < costs.size(); ++s) {
        const double z = costs[s] - t;
        sum += weights[s] * softplus(z, eps);
        const double slope = weights[s] * softplus_slope(z, eps);
        slope_sum += slope;
        out.d_costs[s] = cap * slope;
    }
    out.value = t + cap * sum;
    out.d_threshold = 1.0 - cap * slope_sum;
    return out;
}

}  // namespace riskctrl
