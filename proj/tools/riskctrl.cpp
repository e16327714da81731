#include "riskctrl/checks.hpp"
#include "riskctrl/experiment.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

riskctrl::ExperimentConfig config_from(const std::string& path, std::optional<std::uint64_t> seed) {
    riskctrl::ExperimentConfig cfg = path.empty() ? riskctrl::ExperimentConfig{} : riskctrl::load_config(path);
    if (seed) cfg.seed = *seed;
    riskctrl::validate(cfg);
    return cfg;
}

int run(const std::string& config_path, const std::string& outdir, unsigned threads,
        std::optional<std::uint64_t> seed) {
    const riskctrl::ExperimentConfig cfg = config_from(config_path, seed);
    const auto result = riskctrl::run_experiment(cfg, riskctrl::Parallelism{threads},
                                                 [](const std::string& line) { std::cerr << line << '\n'; });
    riskctrl::write_artifacts(result, outdir);
    for (const auto& m : result.methods)
        if (!m.ok()) return kExitNumerical;
    return 0;
}

int check() {
    bool ok = true;
    for (const auto& r : riskctrl::checks::run_all()) {
        std::printf("%-20s %s  measured=%.3e  tol=%.1e\n", r.name.c_str(), r.passed ? "PASS" : "FAIL", r.measured,
                    r.tolerance);
        ok = ok && r.passed;
    }
    return ok ? 0 : kExitNumerical;
}

int gradcheck(const std::string& config_path, int coordinates, double h, double tol) {
    const riskctrl::ExperimentConfig cfg = config_from(config_path, std::nullopt);
    const auto problem = riskctrl::make_qubit_problem(
        cfg, riskctrl::make_uniform_grid(cfg.theta_lo, cfg.theta_hi, cfg.N), riskctrl::Parallelism{0});
    const riskctrl::Control u = riskctrl::gaussian_init(problem.grid(), cfg.seed, std::max(cfg.init_std, 0.1));
    bool ok = true;
    for (const auto& risk : {riskctrl::RiskMeasure::expectation(), riskctrl::RiskMeasure::worst_case(),
                             riskctrl::RiskMeasure::avar(cfg.beta)}) {
        const auto audit = riskctrl::checks::gradient_audit(problem, risk, u, coordinates, h, cfg.seed);
        const bool pass = audit.max_relative_error <= tol;
        std::printf("%-12s max relative error %.3e over %d coordinates: %s\n", risk.name().c_str(),
                    audit.max_relative_error, coordinates, pass ? "PASS" : "FAIL");
        ok = ok && pass;
    }
    return ok ? 0 : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Risk-averse ensemble optimal control of a two-level quantum system"};
    app.require_subcommand(1);

    std::string config_path;
    std::string outdir;
    unsigned threads = 1;
    std::optional<std::uint64_t> seed;
    auto* run_cmd = app.add_subcommand("run", "Run the ensemble experiment and write artifacts");
    run_cmd->add_option("--config", config_path, "Flat JSON configuration file")->check(CLI::ExistingFile);
    run_cmd->add_option("--out", outdir, "Output directory")->required();
    run_cmd->add_option("--threads", threads, "Worker threads for scenario loops (0 = all cores)");
    run_cmd->add_option("--seed", seed, "Override the seed of the initial control");

    app.add_subcommand("check", "Run the built-in invariant checks");

    std::string grad_config;
    int coordinates = 10;
    double h = 1e-5;
    double tol = 1e-6;
    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference audit of the adjoint gradients");
    grad_cmd->add_option("--config", grad_config, "Flat JSON configuration file")->check(CLI::ExistingFile);
    grad_cmd->add_option("--coordinates", coordinates, "Number of random coordinates");
    grad_cmd->add_option("--step", h, "Central difference step");
    grad_cmd->add_option("--tol", tol, "Relative error tolerance");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (*run_cmd) return run(config_path, outdir, threads, seed);
        if (*grad_cmd) return gradcheck(grad_config, coordinates, h, tol);
        return check();
    } catch (const riskctrl::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const riskctrl::DivergenceError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitNumerical;
    }
}
