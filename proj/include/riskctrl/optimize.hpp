#pragma once

// First-order optimizers over flat coefficient vectors: Armijo gradient
// descent, the diminishing-step subgradient method, limited-memory BFGS, and
// a primal-dual continuation scheme for AVaR objectives.

#include "riskctrl/risk.hpp"

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <concepts>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace riskctrl {

using Vector = Eigen::VectorXd;

/// value(x) and value_and_gradient(x, g); the gradient may be any
/// subgradient for nonsmooth objectives.
template <class O>
concept Objective = requires(const O& o, const Vector& x, Vector& g) {
    { o.value(x) } -> std::convertible_to<double>;
    { o.value_and_gradient(x, g) } -> std::convertible_to<double>;
};

/// Objective built from two callables; mostly for tests and small problems.
struct FunctionObjective {
    std::function<double(const Vector&)> f;
    std::function<Vector(const Vector&)> grad;

    double value(const Vector& x) const { return f(x); }
    double value_and_gradient(const Vector& x, Vector& g) const {
        g = grad(x);
        return f(x);
    }
};

enum class Termination {
    MaxIterations,
    Converged,
    ZeroGradient,
    StepTooSmall,
    LineSearchFailed,
    MaxOuterIterations,
};

inline std::string to_string(Termination t) {
    switch (t) {
        case Termination::MaxIterations: return "max_iterations";
        case Termination::Converged: return "converged";
        case Termination::ZeroGradient: return "zero_gradient";
        case Termination::StepTooSmall: return "step_too_small";
        case Termination::LineSearchFailed: return "line_search_failed";
        case Termination::MaxOuterIterations: return "max_outer_iterations";
    }
    return "unknown";
}

struct OptReport {
    int iterations = 0;
    std::vector<double> objective_history;
    std::vector<double> stationarity_history;
    double wall_time = 0.0;  // seconds
    Termination reason = Termination::MaxIterations;
    int evaluations = 0;
    int gradient_evaluations = 0;
    bool degraded = false;
};

struct OptResult {
    Vector x;
    OptReport report;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

// Objectives may define their own stationarity measure; the gradient norm otherwise.
template <class O>
double stationarity_of(const O& o, const Vector& x, const Vector& g) {
    if constexpr (requires { { o.stationarity(x, g) } -> std::convertible_to<double>; })
        return o.stationarity(x, g);
    else
        return g.norm();
}

}  // namespace detail

struct ArmijoParams {
    int max_iters = 500;
    double armijo_c = 1e-4;
    double shrink = 0.5;
    double grow = 2.0;
    double min_step = 1e-14;
    double initial_step = 1.0;
};

/// Gradient descent with an adaptive Armijo step: a step s is accepted iff
/// f(x - s g) <= f(x) - c s |g|^2; acceptance multiplies s by `grow`,
/// rejection by `shrink`.
template <Objective O>
OptResult armijo_gd(const O& objective, Vector x, const ArmijoParams& p = {}) {
    const auto start = detail::Clock::now();
    OptResult out;
    OptReport& rep = out.report;
    Vector g;
    double f = objective.value_and_gradient(x, g);
    ++rep.gradient_evaluations;
    if (!std::isfinite(f) || !g.allFinite()) throw std::invalid_argument("armijo_gd: objective not finite at u0");
    rep.objective_history.push_back(f);
    rep.stationarity_history.push_back(detail::stationarity_of(objective, x, g));

    double step = p.initial_step;
    rep.reason = Termination::MaxIterations;
    for (int it = 1; it <= p.max_iters; ++it) {
        rep.iterations = it;
        const double gg = g.squaredNorm();
        if (gg == 0.0) {
            rep.reason = Termination::ZeroGradient;
            break;
        }
        bool accepted = false;
        Vector trial;
        while (step >= p.min_step) {
            trial = x - step * g;
            const double ft = objective.value(trial);
            ++rep.evaluations;
            if (std::isfinite(ft) && ft <= f - p.armijo_c * step * gg) {
                accepted = true;
                break;
            }
            step *= p.shrink;
        }
        if (!accepted) {
            rep.reason = Termination::StepTooSmall;
            break;
        }
        x = std::move(trial);
        step *= p.grow;
        f = objective.value_and_gradient(x, g);
        ++rep.gradient_evaluations;
        rep.objective_history.push_back(f);
        rep.stationarity_history.push_back(detail::stationarity_of(objective, x, g));
    }
    out.x = std::move(x);
    rep.wall_time = detail::seconds_since(start);
    return out;
}

struct SubgradientParams {
    double a0 = 0.125;
    int max_iters = 1000;
};

/// x_{m+1} = x_m - (a0 / sqrt(m)) g_m, m = 1, 2, ...; returns the iterate with
/// the lowest objective seen.
template <Objective O>
OptResult subgradient_method(const O& objective, Vector x, const SubgradientParams& p = {}) {
    const auto start = detail::Clock::now();
    OptResult out;
    OptReport& rep = out.report;
    Vector g;
    double best = std::numeric_limits<double>::infinity();
    Vector best_x = x;
    for (int m = 1; m <= p.max_iters; ++m) {
        rep.iterations = m;
        const double f = objective.value_and_gradient(x, g);
        ++rep.gradient_evaluations;
        rep.objective_history.push_back(f);
        rep.stationarity_history.push_back(detail::stationarity_of(objective, x, g));
        if (f < best) {
            best = f;
            best_x = x;
        }
        x -= (p.a0 / std::sqrt(static_cast<double>(m))) * g;
    }
    const double last = objective.value(x);
    ++rep.evaluations;
    if (last < best) best_x = x;
    rep.reason = Termination::MaxIterations;
    out.x = std::move(best_x);
    rep.wall_time = detail::seconds_since(start);
    return out;
}

struct LbfgsParams {
    int memory = 10;
    int max_iters = 100;
    double grad_tol = 1e-8;
    double armijo_c = 1e-4;
    double shrink = 0.5;
    int max_backtracks = 60;
};

/// Two-loop recursion: returns -H g for the L-BFGS inverse-Hessian
/// approximation built from the (s, y) pairs, oldest first.
inline Vector two_loop_recursion(const Vector& g, const std::deque<Vector>& s, const std::deque<Vector>& y) {
    const std::size_t m = s.size();
    Vector q = g;
    std::vector<double> alpha(m), rho(m);
    for (std::size_t k = m; k-- > 0;) {
        rho[k] = 1.0 / y[k].dot(s[k]);
        alpha[k] = rho[k] * s[k].dot(q);
        q -= alpha[k] * y[k];
    }
    if (m > 0) q *= s[m - 1].dot(y[m - 1]) / y[m - 1].squaredNorm();
    for (std::size_t k = 0; k < m; ++k) {
        const double b = rho[k] * y[k].dot(q);
        q += (alpha[k] - b) * s[k];
    }
    return -q;
}

struct LbfgsResult {
    Vector x;
    OptReport report;
    std::vector<double> directional_derivatives;  // g^T d per iteration
};

/// L-BFGS with Armijo backtracking. Pairs with s^T y <= 1e-12 |s||y| are
/// skipped. A failed line search clears the memory and retries once along -g.
template <Objective O>
LbfgsResult lbfgs(const O& objective, Vector x, const LbfgsParams& p = {}) {
    const auto start = detail::Clock::now();
    LbfgsResult out;
    OptReport& rep = out.report;
    Vector g;
    double f = objective.value_and_gradient(x, g);
    ++rep.gradient_evaluations;
    if (!std::isfinite(f) || !g.allFinite()) throw std::invalid_argument("lbfgs: objective not finite at x0");
    rep.objective_history.push_back(f);
    rep.stationarity_history.push_back(detail::stationarity_of(objective, x, g));
    std::deque<Vector> s_hist, y_hist;
    rep.reason = Termination::MaxIterations;

    if (g.norm() <= p.grad_tol) {
        rep.reason = Termination::Converged;
        out.x = std::move(x);
        rep.wall_time = detail::seconds_since(start);
        return out;
    }

    auto line_search = [&](const Vector& d, double slope, double step, Vector& xt, double& ft) {
        for (int b = 0; b <= p.max_backtracks; ++b) {
            xt = x + step * d;
            ft = objective.value(xt);
            ++rep.evaluations;
            if (std::isfinite(ft) && ft <= f + p.armijo_c * step * slope) return true;
            step *= p.shrink;
        }
        return false;
    };

    for (int it = 1; it <= p.max_iters; ++it) {
        rep.iterations = it;
        Vector d = p.memory > 0 ? two_loop_recursion(g, s_hist, y_hist) : Vector(-g);
        double slope = g.dot(d);
        if (!(slope < 0.0)) {
            s_hist.clear();
            y_hist.clear();
            d = -g;
            slope = -g.squaredNorm();
        }
        Vector xt;
        double ft = 0.0;
        double step = s_hist.empty() ? std::min(1.0, 1.0 / g.norm()) : 1.0;
        bool ok = line_search(d, slope, step, xt, ft);
        if (!ok && !s_hist.empty()) {
            s_hist.clear();
            y_hist.clear();
            d = -g;
            slope = -g.squaredNorm();
            ok = line_search(d, slope, std::min(1.0, 1.0 / g.norm()), xt, ft);
        }
        out.directional_derivatives.push_back(slope);
        if (!ok) {
            rep.reason = Termination::LineSearchFailed;
            break;
        }
        Vector g_new;
        const double f_new = objective.value_and_gradient(xt, g_new);
        ++rep.gradient_evaluations;
        Vector s = xt - x;
        Vector y = g_new - g;
        if (p.memory > 0 && s.dot(y) > 1e-12 * s.norm() * y.norm()) {
            s_hist.push_back(std::move(s));
            y_hist.push_back(std::move(y));
            if (static_cast<int>(s_hist.size()) > p.memory) {
                s_hist.pop_front();
                y_hist.pop_front();
            }
        }
        x = std::move(xt);
        f = f_new;
        g = std::move(g_new);
        rep.objective_history.push_back(f);
        rep.stationarity_history.push_back(detail::stationarity_of(objective, x, g));
        if (g.norm() <= p.grad_tol) {
            rep.reason = Termination::Converged;
            break;
        }
    }
    out.x = std::move(x);
    rep.wall_time = detail::seconds_since(start);
    return out;
}

/// A finite family of scenario costs J_s(x) plus a smooth regularizer.
///
/// weighted_gradient(x, c) returns Σ_s c_s ∇J_s(x) and may skip c_s = 0.
template <class P>
concept ScenarioProblem = requires(const P& p, const Vector& x, std::span<const double> coeffs) {
    { p.weights() } -> std::convertible_to<std::span<const double>>;
    { p.scenario_costs(x) } -> std::convertible_to<std::vector<double>>;
    { p.weighted_gradient(x, coeffs) } -> std::convertible_to<Vector>;
    { p.regularizer(x) } -> std::convertible_to<double>;
    { p.regularizer_gradient(x) } -> std::convertible_to<Vector>;
};

namespace detail {

template <class P>
double problem_stationarity(const P& p, const Vector& x, const Vector& g) {
    if constexpr (requires { { p.stationarity(x, g) } -> std::convertible_to<double>; })
        return p.stationarity(x, g);
    else
        return g.norm();
}

}  // namespace detail

/// R(J(x)) + regularizer(x) as an Objective; the gradient uses the risk
/// identifier of `risk` as scenario weights.
template <ScenarioProblem P>
class RiskObjective {
public:
    RiskObjective(const P& problem, RiskMeasure risk) : problem_(&problem), risk_(risk) {}

    double value(const Vector& x) const {
        const std::vector<double> costs = problem_->scenario_costs(x);
        return evaluate(risk_, costs, problem_->weights()) + problem_->regularizer(x);
    }

    double value_and_gradient(const Vector& x, Vector& g) const {
        const std::vector<double> costs = problem_->scenario_costs(x);
        const std::span<const double> w = problem_->weights();
        const std::vector<double> identifier = risk_identifier(risk_, costs, w);
        std::vector<double> coeffs(costs.size());
        for (std::size_t s = 0; s < costs.size(); ++s) coeffs[s] = w[s] * identifier[s];
        g = problem_->weighted_gradient(x, coeffs) + problem_->regularizer_gradient(x);
        return evaluate(risk_, costs, w) + problem_->regularizer(x);
    }

    double stationarity(const Vector& x, const Vector& g) const { return detail::problem_stationarity(*problem_, x, g); }

    const RiskMeasure& risk() const noexcept { return risk_; }

private:
    const P* problem_;
    RiskMeasure risk_;
};

struct PrimalDualParams {
    double beta = 0.95;
    double eps0 = 1e-1;
    double eps_factor = 0.25;
    double eps_min = 1e-5;
    double outer_tol = 1e-4;
    int max_outer = 20;
    LbfgsParams inner{10, 50, 1e-8, 1e-4, 0.5, 60};
};

struct PrimalDualResult {
    Vector x;
    double threshold = 0.0;                 // t*
    std::vector<double> identifier;         // exact risk identifier at x
    std::vector<double> smoothed_identifier;  // dual estimate from the surrogate
    OptReport report;
    int inner_iterations = 0;
};

/// Epigraph-smoothing continuation for min_x AVaR_β(J(x)) + regularizer(x).
///
/// Each outer iteration minimizes the surrogate
///   t + 1/(1-β) Σ w_s softplus_ε(J_s(x) - t) + regularizer(x)
/// over (x, t) with L-BFGS, warm-started, then shrinks ε down to eps_min.
/// Stops once ε has reached eps_min and the stationarity residual built
/// with the exact risk identifier is below outer_tol. Reported objectives
/// use the exact AVaR; the best such iterate is returned.
template <ScenarioProblem P>
PrimalDualResult primal_dual_avar(const P& problem, const Vector& x0, const PrimalDualParams& p = {}) {
    if (!(p.beta > 0.0 && p.beta < 1.0)) throw std::invalid_argument("primal_dual_avar: beta must lie in (0, 1)");
    if (!(p.eps0 > 0.0) || !(p.eps_min > 0.0) || !(p.eps_factor > 0.0 && p.eps_factor < 1.0))
        throw std::invalid_argument("primal_dual_avar: smoothing schedule must be positive and strictly decreasing");
    const auto start = detail::Clock::now();
    const RiskMeasure risk = RiskMeasure::avar(p.beta);
    const std::span<const double> w = problem.weights();
    const Eigen::Index dim = x0.size();

    PrimalDualResult out;
    OptReport& rep = out.report;

    auto exact_state = [&](const Vector& x, std::vector<double>& costs, std::vector<double>& identifier,
                           double& objective) {
        costs = problem.scenario_costs(x);
        identifier = risk_identifier(risk, costs, w);
        std::vector<double> coeffs(costs.size());
        for (std::size_t s = 0; s < costs.size(); ++s) coeffs[s] = w[s] * identifier[s];
        const Vector g = problem.weighted_gradient(x, coeffs) + problem.regularizer_gradient(x);
        ++rep.gradient_evaluations;
        objective = evaluate(risk, costs, w) + problem.regularizer(x);
        return detail::problem_stationarity(problem, x, g);
    };

    std::vector<double> costs, identifier;
    double objective = 0.0;
    double residual = exact_state(x0, costs, identifier, objective);
    rep.objective_history.push_back(objective);
    rep.stationarity_history.push_back(residual);

    Vector z(dim + 1);
    z.head(dim) = x0;
    z(dim) = avar_threshold(costs, w, p.beta);

    out.x = x0;
    out.threshold = z(dim);
    out.identifier = identifier;
    double best = objective;

    double eps = p.eps0;
    rep.reason = Termination::MaxOuterIterations;
    for (int outer = 1; outer <= p.max_outer; ++outer) {
        rep.iterations = outer;
        struct Surrogate {
            const P* problem;
            std::span<const double> w;
            double beta, eps;
            Eigen::Index dim;
            int* evaluations;

            double value(const Vector& z) const {
                ++*evaluations;
                const Vector x = z.head(dim);
                const std::vector<double> c = problem->scenario_costs(x);
                return smoothed_avar(c, w, beta, z(dim), eps).value + problem->regularizer(x);
            }
            double value_and_gradient(const Vector& z, Vector& g) const {
                const Vector x = z.head(dim);
                const std::vector<double> c = problem->scenario_costs(x);
                const SmoothedAvar sm = smoothed_avar(c, w, beta, z(dim), eps);
                g.resize(dim + 1);
                g.head(dim) = problem->weighted_gradient(x, sm.d_costs) + problem->regularizer_gradient(x);
                g(dim) = sm.d_threshold;
                return sm.value + problem->regularizer(x);
            }
        };
        int surrogate_evals = 0;
        const Surrogate surrogate{&problem, w, p.beta, eps, dim, &surrogate_evals};
        try {
            LbfgsResult inner = lbfgs(surrogate, z, p.inner);
            out.inner_iterations += inner.report.iterations;
            rep.gradient_evaluations += inner.report.gradient_evaluations;
            if (inner.report.reason == Termination::LineSearchFailed) rep.degraded = true;
            z = std::move(inner.x);
        } catch (const std::exception&) {
            rep.degraded = true;
        }
        rep.evaluations += surrogate_evals;

        const Vector x = z.head(dim);
        residual = exact_state(x, costs, identifier, objective);
        rep.objective_history.push_back(objective);
        rep.stationarity_history.push_back(residual);

        const SmoothedAvar sm = smoothed_avar(costs, w, p.beta, z(dim), eps);
        double mass = 0.0;
        for (double d : sm.d_costs) mass += d;
        out.smoothed_identifier.assign(costs.size(), 0.0);
        for (std::size_t s = 0; s < costs.size(); ++s)
            out.smoothed_identifier[s] = w[s] > 0.0 ? sm.d_costs[s] / (w[s] * mass) : 0.0;

        if (objective <= best) {
            best = objective;
            out.x = x;
            out.threshold = z(dim);
            out.identifier = identifier;
        }
        if (eps <= p.eps_min && residual <= p.outer_tol) {
            rep.reason = Termination::Converged;
            break;
        }
        eps = std::max(eps * p.eps_factor, p.eps_min);
    }
    rep.wall_time = detail::seconds_since(start);
    return out;
}

}  // namespace riskctrl
