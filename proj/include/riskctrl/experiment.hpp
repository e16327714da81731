#pragma once

// Ensemble qubit-transfer experiment: optimize the expectation objective,
// warm-start the worst-case and AVaR objectives from its result, evaluate
// all controls (plus the explicit reference pulse) over the ensemble, and
// write CSV/JSON artifacts.

#include "riskctrl/ensemble_problem.hpp"
#include "riskctrl/optimize.hpp"
#include "riskctrl/qubit.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace riskctrl {

inline constexpr const char* kVersion = "0.1.0";

/// Invalid or unknown configuration entry; key() names the offending field.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key, const std::string& what)
        : std::runtime_error(key.empty() ? what : "config key \"" + key + "\": " + what), key_(std::move(key)) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

struct ExperimentConfig {
    double E = 1.0;
    double theta_lo = -0.5;
    double theta_hi = 0.5;
    int N = 100;
    double T = 20.0;
    double dt = 0.03125;
    double alpha = 0.0625;
    double beta = 0.95;
    std::uint64_t seed = 1;
    double init_std = 0.1;

    int gd_iters = 500;
    double armijo_c = 1e-4;
    double armijo_shrink = 0.5;
    double armijo_grow = 2.0;
    double armijo_min_step = 1e-14;
    double armijo_initial_step = 1.0;

    double subgrad_a0 = 0.125;
    int subgrad_iters = 1000;

    double pd_eps0 = 1e-1;
    double pd_eps_factor = 0.25;
    double pd_eps_min = 1e-5;
    double pd_outer_tol = 1e-4;
    int pd_max_outer = 20;
    int lbfgs_memory = 10;
    int lbfgs_max_iters = 50;
    double lbfgs_grad_tol = 1e-8;

    bool mean_control = false;

    ControlGrid grid() const { return ControlGrid::from_step(T, dt); }
};

namespace detail {

using ConfigMember = std::variant<double ExperimentConfig::*, int ExperimentConfig::*,
                                  std::uint64_t ExperimentConfig::*, bool ExperimentConfig::*>;

struct ConfigField {
    const char* name;
    ConfigMember member;
};

inline const std::vector<ConfigField>& config_fields() {
    using C = ExperimentConfig;
    static const std::vector<ConfigField> fields = {
        {"E", &C::E},
        {"theta_lo", &C::theta_lo},
        {"theta_hi", &C::theta_hi},
        {"N", &C::N},
        {"T", &C::T},
        {"dt", &C::dt},
        {"alpha", &C::alpha},
        {"beta", &C::beta},
        {"seed", &C::seed},
        {"init_std", &C::init_std},
        {"gd_iters", &C::gd_iters},
        {"armijo_c", &C::armijo_c},
        {"armijo_shrink", &C::armijo_shrink},
        {"armijo_grow", &C::armijo_grow},
        {"armijo_min_step", &C::armijo_min_step},
        {"armijo_initial_step", &C::armijo_initial_step},
        {"subgrad_a0", &C::subgrad_a0},
        {"subgrad_iters", &C::subgrad_iters},
        {"pd_eps0", &C::pd_eps0},
        {"pd_eps_factor", &C::pd_eps_factor},
        {"pd_eps_min", &C::pd_eps_min},
        {"pd_outer_tol", &C::pd_outer_tol},
        {"pd_max_outer", &C::pd_max_outer},
        {"lbfgs_memory", &C::lbfgs_memory},
        {"lbfgs_max_iters", &C::lbfgs_max_iters},
        {"lbfgs_grad_tol", &C::lbfgs_grad_tol},
        {"mean_control", &C::mean_control},
    };
    return fields;
}

inline void require(bool ok, const char* key, const std::string& what) {
    if (!ok) throw ConfigError(key, what);
}

}  // namespace detail

/// Checks every invariant of the configuration.
inline void validate(const ExperimentConfig& c) {
    using detail::require;
    require(std::isfinite(c.E) && c.E > 0.0, "E", "must be positive");
    require(std::isfinite(c.theta_lo) && std::isfinite(c.theta_hi) && c.theta_lo <= c.theta_hi, "theta_lo",
            "require theta_lo <= theta_hi");
    require(c.N >= 1, "N", "must be at least 1");
    require(std::isfinite(c.T) && c.T > 0.0, "T", "must be positive");
    require(std::isfinite(c.dt) && c.dt > 0.0, "dt", "must be positive");
    try {
        (void)c.grid();
    } catch (const std::invalid_argument&) {
        throw ConfigError("dt", "T/dt must be an integer");
    }
    require(std::isfinite(c.alpha) && c.alpha > 0.0, "alpha", "must be positive");
    require(c.beta > 0.0 && c.beta < 1.0, "beta", "must lie in (0, 1)");
    require(std::isfinite(c.init_std) && c.init_std >= 0.0, "init_std", "must be nonnegative");
    require(c.gd_iters >= 0, "gd_iters", "must be nonnegative");
    require(c.armijo_c > 0.0 && c.armijo_c < 1.0, "armijo_c", "must lie in (0, 1)");
    require(c.armijo_shrink > 0.0 && c.armijo_shrink < 1.0, "armijo_shrink", "must lie in (0, 1)");
    require(c.armijo_grow >= 1.0, "armijo_grow", "must be at least 1");
    require(c.armijo_min_step > 0.0, "armijo_min_step", "must be positive");
    require(c.armijo_initial_step > 0.0, "armijo_initial_step", "must be positive");
    require(c.subgrad_a0 > 0.0, "subgrad_a0", "must be positive");
    require(c.subgrad_iters >= 0, "subgrad_iters", "must be nonnegative");
    require(c.pd_eps0 > 0.0, "pd_eps0", "must be positive");
    require(c.pd_eps_factor > 0.0 && c.pd_eps_factor < 1.0, "pd_eps_factor", "must lie in (0, 1)");
    require(c.pd_eps_min > 0.0 && c.pd_eps_min <= c.pd_eps0, "pd_eps_min", "must lie in (0, pd_eps0]");
    require(c.pd_outer_tol > 0.0, "pd_outer_tol", "must be positive");
    require(c.pd_max_outer >= 1, "pd_max_outer", "must be at least 1");
    require(c.lbfgs_memory >= 0, "lbfgs_memory", "must be nonnegative");
    require(c.lbfgs_max_iters >= 1, "lbfgs_max_iters", "must be at least 1");
    require(c.lbfgs_grad_tol >= 0.0, "lbfgs_grad_tol", "must be nonnegative");
}

/// Flat JSON object to config; unknown keys are rejected, missing keys keep defaults.
template <class Json>
ExperimentConfig parse_config(const Json& j) {
    if (!j.is_object()) throw ConfigError("", "configuration must be a flat JSON object");
    ExperimentConfig cfg;
    const auto& fields = detail::config_fields();
    for (const auto& [key, value] : j.items()) {
        const auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return key == f.name; });
        if (it == fields.end()) throw ConfigError(key, "unknown key");
        std::visit(
            [&](auto member) {
                using T = std::remove_reference_t<decltype(cfg.*member)>;
                if constexpr (std::is_same_v<T, bool>) {
                    if (!value.is_boolean()) throw ConfigError(key, "expected a boolean");
                    cfg.*member = value.template get<bool>();
                } else if constexpr (std::is_same_v<T, double>) {
                    if (!value.is_number()) throw ConfigError(key, "expected a number");
                    cfg.*member = value.template get<double>();
                } else if constexpr (std::is_same_v<T, std::uint64_t>) {
                    if (!value.is_number_unsigned()) throw ConfigError(key, "expected a nonnegative integer");
                    cfg.*member = value.template get<std::uint64_t>();
                } else {
                    if (!value.is_number_integer()) throw ConfigError(key, "expected an integer");
                    const auto v = value.template get<std::int64_t>();
                    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
                        throw ConfigError(key, "integer out of range");
                    cfg.*member = static_cast<int>(v);
                }
            },
            it->member);
    }
    validate(cfg);
    return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("", "cannot open config file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("", "cannot parse " + path.string() + ": " + e.what());
    }
    return parse_config(j);
}

/// Effective configuration as a flat JSON object (every key present).
inline nlohmann::ordered_json to_json(const ExperimentConfig& cfg) {
    nlohmann::ordered_json j;
    for (const auto& f : detail::config_fields())
        std::visit([&](auto member) { j[f.name] = cfg.*member; }, f.member);
    return j;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Uniform in [0, 1) from (key, counter); 53 random bits.
inline double counter_uniform(std::uint64_t key, std::uint64_t counter) {
    const std::uint64_t bits = splitmix64(splitmix64(key) ^ splitmix64(counter + 0x632be59bd9b4e019ULL));
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

}  // namespace detail

/// I.i.d. N(0, std²) coefficients; coefficient i depends only on (seed, i).
inline Control gaussian_init(const ControlGrid& grid, std::uint64_t seed, double init_std, int channels = 1) {
    Matrix values(grid.steps(), channels);
    if (init_std == 0.0) return Control(grid, Matrix::Zero(grid.steps(), channels));
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        const auto idx = static_cast<std::uint64_t>(i);
        const double u1 = 1.0 - detail::counter_uniform(seed, 2 * idx);  // (0, 1]
        const double u2 = detail::counter_uniform(seed, 2 * idx + 1);
        values.data()[i] = init_std * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }
    return Control(grid, std::move(values));
}

/// FNV-1a over the bytes of the control coefficients.
inline std::string control_hash(const Control& u) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const auto* bytes = reinterpret_cast<const unsigned char*>(u.values().data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(u.values().size()) * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
    return buf;
}

using QubitProblem = EnsembleProblem<qubit::QubitSystem, qubit::InfidelityIntegrand>;

inline QubitProblem make_qubit_problem(const ExperimentConfig& cfg, ParameterEnsemble ensemble, Parallelism par) {
    const ControlGrid grid = cfg.grid();
    return QubitProblem(qubit::QubitSystem(cfg.E), qubit::InfidelityIntegrand{}, std::move(ensemble), grid,
                        CostMeasure::terminal(grid.horizon()), ControlCost{cfg.alpha}, Stepper::ExactBilinear, par);
}

struct MethodSummary {
    double objective = 0.0;      // R(J(u)) + α ||u||²
    double mean_infidelity = 0.0;
    double avar_infidelity = 0.0;
    double worst_infidelity = 0.0;
    double min_overlap = 0.0;
    double stationarity = 0.0;
    double initial_stationarity = 0.0;
    double wall_time = 0.0;
    int iterations = 0;
    std::string termination;
};

struct MethodResult {
    std::string name;      // avg, worst, avar, ref, mean
    std::string status = "skipped";  // ok, failed: ..., skipped: ...
    RiskMeasure risk = RiskMeasure::expectation();
    std::optional<Control> control;
    std::vector<double> overlaps;
    std::vector<double> infidelities;
    MethodSummary summary;
    OptReport report;

    bool ok() const { return status == "ok"; }
};

struct ExperimentResult {
    ExperimentConfig config;
    std::vector<double> thetas;
    std::vector<MethodResult> methods;
    std::vector<std::string> log;
    std::string init_hash;
    std::string avg_hash;

    const MethodResult& method(const std::string& name) const {
        for (const auto& m : methods)
            if (m.name == name) return m;
        throw std::out_of_range("no method named " + name);
    }
};

using LogSink = std::function<void(const std::string&)>;

namespace detail {

inline void evaluate_method(const QubitProblem& problem, MethodResult& m) {
    const Control& u = *m.control;
    const EnsembleTrajectory traj = problem.trajectories(u);
    const auto& target = problem.integrand().target;
    m.overlaps.resize(traj.size());
    m.infidelities.resize(traj.size());
    for (std::size_t s = 0; s < traj.size(); ++s) {
        const qubit::ComplexState psi = qubit::complexify(traj.terminal(s));
        m.overlaps[s] = qubit::overlap(psi, target);
        m.infidelities[s] = qubit::overlap_infidelity(psi, target).value;
    }
    const std::vector<double> costs = problem.scenario_costs(u);
    const auto w = problem.weights();
    MethodSummary& sum = m.summary;
    sum.objective = evaluate(m.risk, costs, w) + problem.control_cost().value(u);
    sum.mean_infidelity = evaluate(RiskMeasure::expectation(), m.infidelities, w);
    sum.worst_infidelity = evaluate(RiskMeasure::worst_case(), m.infidelities, w);
    sum.min_overlap = *std::min_element(m.overlaps.begin(), m.overlaps.end());
    sum.stationarity = stationarity_residual(u, problem.gradient(m.risk, u), problem.control_cost());
}

}  // namespace detail

/// Runs every stage; a failed stage is recorded and the stages depending on
/// it are skipped.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, Parallelism par = {}, LogSink sink = {}) {
    validate(cfg);
    ExperimentResult result;
    result.config = cfg;
    auto log = [&](const std::string& line) {
        result.log.push_back(line);
        if (sink) sink(line);
    };

    const ParameterEnsemble ensemble = make_uniform_grid(cfg.theta_lo, cfg.theta_hi, cfg.N);
    result.thetas = ensemble.thetas();
    const QubitProblem problem = make_qubit_problem(cfg, ensemble, par);
    const ControlGrid grid = problem.grid();
    const RiskMeasure avar = RiskMeasure::avar(cfg.beta);

    log("riskctrl " + std::string(kVersion) + ": " + std::to_string(ensemble.size()) + " scenarios, " +
        std::to_string(grid.steps()) + " steps, E=" + std::to_string(cfg.E) + " seed=" + std::to_string(cfg.seed));

    const Control u0 = gaussian_init(grid, cfg.seed, cfg.init_std);
    result.init_hash = control_hash(u0);
    log("initial control hash " + result.init_hash);

    const ArmijoParams armijo{cfg.gd_iters,        cfg.armijo_c,        cfg.armijo_shrink,
                              cfg.armijo_grow,     cfg.armijo_min_step, cfg.armijo_initial_step};

    auto finish = [&](MethodResult& m, const Vector& x, const OptReport& rep) {
        m.control = problem.control(x);
        m.report = rep;
        m.summary.iterations = rep.iterations;
        m.summary.termination = to_string(rep.reason);
        m.summary.wall_time = rep.wall_time;
        if (!rep.stationarity_history.empty()) m.summary.initial_stationarity = rep.stationarity_history.front();
    };

    auto guarded = [&](MethodResult& m, auto&& body) {
        try {
            body();
            detail::evaluate_method(problem, m);
            m.summary.avar_infidelity = evaluate(avar, m.infidelities, problem.weights());
            m.status = "ok";
            char buf[256];
            std::snprintf(buf, sizeof buf, "%s: objective=%.12g min_overlap=%.6f avar_inf=%.6g stationarity=%.3e (%s, %.1fs)",
                          m.name.c_str(), m.summary.objective, m.summary.min_overlap, m.summary.avar_infidelity,
                          m.summary.stationarity, m.summary.termination.c_str(), m.summary.wall_time);
            log(buf);
        } catch (const std::exception& e) {
            m.status = std::string("failed: ") + e.what();
            m.control.reset();
            log(m.name + " " + m.status);
        }
    };

    MethodResult avg{"avg"};
    avg.risk = RiskMeasure::expectation();
    guarded(avg, [&] {
        log("avg: Armijo gradient descent, " + std::to_string(cfg.gd_iters) + " iterations");
        const RiskObjective objective(problem, avg.risk);
        const OptResult r = armijo_gd(objective, u0.flat(), armijo);
        finish(avg, r.x, r.report);
    });

    MethodResult worst{"worst"};
    worst.risk = RiskMeasure::worst_case();
    MethodResult avar_m{"avar"};
    avar_m.risk = avar;
    if (avg.ok()) {
        result.avg_hash = control_hash(*avg.control);
        const Vector start = avg.control->flat();
        guarded(worst, [&] {
            log("worst: subgradient method from u_avg (hash " + control_hash(problem.control(start)) + ")");
            const RiskObjective objective(problem, worst.risk);
            const OptResult r = subgradient_method(objective, start, SubgradientParams{cfg.subgrad_a0, cfg.subgrad_iters});
            finish(worst, r.x, r.report);
        });
        guarded(avar_m, [&] {
            log("avar: primal-dual smoothing from u_avg (hash " + control_hash(problem.control(start)) + ")");
            PrimalDualParams pd;
            pd.beta = cfg.beta;
            pd.eps0 = cfg.pd_eps0;
            pd.eps_factor = cfg.pd_eps_factor;
            pd.eps_min = cfg.pd_eps_min;
            pd.outer_tol = cfg.pd_outer_tol;
            pd.max_outer = cfg.pd_max_outer;
            pd.inner = LbfgsParams{cfg.lbfgs_memory, cfg.lbfgs_max_iters, cfg.lbfgs_grad_tol, 1e-4, 0.5, 60};
            const PrimalDualResult r = primal_dual_avar(problem, start, pd);
            finish(avar_m, r.x, r.report);
            if (r.report.degraded) log("avar: inner solve degraded");
        });
    } else {
        worst.status = avar_m.status = "skipped: avg stage failed";
    }

    MethodResult ref{"ref"};
    ref.risk = RiskMeasure::expectation();
    guarded(ref, [&] {
        ref.control = qubit::sample_reference_control(grid, cfg.E);
        ref.summary.termination = "none";
    });

    result.methods = {std::move(avg), std::move(worst), std::move(avar_m), std::move(ref)};

    if (cfg.mean_control) {
        MethodResult mean{"mean"};
        mean.risk = RiskMeasure::expectation();
        guarded(mean, [&] {
            log("mean: Armijo gradient descent on the mean parameter only");
            const QubitProblem nominal =
                make_qubit_problem(cfg, ParameterEnsemble({ensemble.mean_theta()}, {1.0}), par);
            const RiskObjective objective(nominal, mean.risk);
            const OptResult r = armijo_gd(objective, u0.flat(), armijo);
            finish(mean, r.x, r.report);
        });
        result.methods.push_back(std::move(mean));
    }
    return result;
}

namespace detail {

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << content;
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace detail

/// final_state.csv, controls.csv, summary.json, config.json and run.log in `outdir`.
inline std::vector<std::filesystem::path> write_artifacts(const ExperimentResult& result,
                                                          const std::filesystem::path& outdir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(outdir, ec);
    if (ec) throw std::runtime_error("cannot create " + outdir.string() + ": " + ec.message());

    const ControlGrid grid = result.config.grid();
    const auto& methods = result.methods;
    auto cell = [](const MethodResult& m, const std::vector<double>& v, std::size_t i) {
        return m.ok() ? detail::format_double(v[i]) : std::string("nan");
    };

    std::string state = "theta";
    for (const auto& m : methods) state += ",overlap_" + m.name;
    state += '\n';
    for (std::size_t s = 0; s < result.thetas.size(); ++s) {
        state += detail::format_double(result.thetas[s]);
        for (const auto& m : methods) state += "," + cell(m, m.overlaps, s);
        state += '\n';
    }

    std::string controls = "t";
    for (const auto& m : methods) controls += ",u_" + m.name;
    controls += '\n';
    for (int j = 0; j < grid.steps(); ++j) {
        controls += detail::format_double(grid.node(j));
        for (const auto& m : methods)
            controls += "," + (m.ok() ? detail::format_double((*m.control)(j, 0)) : std::string("nan"));
        controls += '\n';
    }

    nlohmann::ordered_json summary;
    summary["config"] = to_json(result.config);
    summary["seed"] = result.config.seed;
    summary["versions"] = {{"riskctrl", kVersion},
                           {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                         "." + std::to_string(EIGEN_MINOR_VERSION)},
                           {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                                 std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                                 std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
    summary["flags"] = {{"energy_gap_assumed", result.config.E == 1.0},
                        {"note", "E is a free model parameter; 1.0 is the default"}};
    summary["init_hash"] = result.init_hash;
    summary["avg_hash"] = result.avg_hash;
    nlohmann::ordered_json ms = nlohmann::ordered_json::object();
    for (const auto& m : methods) {
        nlohmann::ordered_json e;
        e["status"] = m.status;
        e["risk"] = m.risk.name();
        if (m.ok()) {
            const MethodSummary& s = m.summary;
            e["objective"] = s.objective;
            e["mean_infidelity"] = s.mean_infidelity;
            e["avar_infidelity"] = s.avar_infidelity;
            e["worst_infidelity"] = s.worst_infidelity;
            e["min_overlap"] = s.min_overlap;
            e["stationarity"] = s.stationarity;
            e["initial_stationarity"] = s.initial_stationarity;
            e["iterations"] = s.iterations;
            e["termination"] = s.termination;
            e["wall_time"] = s.wall_time;
        }
        ms[m.name] = e;
    }
    summary["methods"] = ms;

    std::string log;
    for (const auto& line : result.log) log += line + '\n';

    const std::vector<fs::path> files = {outdir / "final_state.csv", outdir / "controls.csv", outdir / "summary.json",
                                         outdir / "config.json", outdir / "run.log"};
    detail::write_file(files[0], state);
    detail::write_file(files[1], controls);
    detail::write_file(files[2], summary.dump(2) + '\n');
    detail::write_file(files[3], to_json(result.config).dump(2) + '\n');
    detail::write_file(files[4], log);
    return files;
}

}  // namespace riskctrl
