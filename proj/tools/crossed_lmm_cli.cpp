#include "crossed_lmm/crossed_lmm.hpp"
#include "crossed_lmm/io.hpp"

#include "CLI11.hpp"

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <thread>
#include <vector>

namespace {

using namespace crossed_lmm;

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitNotConverged = 2;

int resolve_jobs(int flag) {
    if (flag > 0) return flag;
    if (const char* env = std::getenv("CROSSED_LMM_JOBS"); env && *env) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (*end != '\0' || v < 1) throw SchemaError(0, "CROSSED_LMM_JOBS", "must be a positive integer");
        return static_cast<int>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

struct FitArgs {
    std::string data, prior, opts, init, out;
};

int cmd_fit(const FitArgs& a) {
    const TrialDataset data = io::read_dataset_file(a.data);
    const PriorSpec prior = io::prior_from_json(io::read_json_file(a.prior));
    EmOptions opts = a.opts.empty() ? EmOptions{} : io::em_options_from_json(io::read_json_file(a.opts));
    if (!a.init.empty()) {
        const auto j = io::read_json_file(a.init);
        opts.init = io::components_from_json(j.contains("components") ? j["components"] : j);
    }
    const FitResult fit = fit_em(data, prior, opts);
    auto out = io::open_output(a.out);
    out << io::to_json(fit).dump(2) << '\n';
    if (!fit.converged)
        std::cerr << "warning: EM stopped after " << fit.iterations << " iterations without converging\n";
    return fit.converged ? kExitOk : kExitNotConverged;
}

struct GenerateArgs {
    Index m = 10, t = 30, n = 5;
    std::uint64_t seed = 0;
    std::string out;
};

int cmd_generate(const GenerateArgs& a) {
    BatchSimConfig cfg;
    cfg.m = a.m;
    cfg.t = a.t;
    cfg.n = a.n;
    cfg.seed = a.seed;
    const TrialDataset data = generate_batch(cfg);
    auto out = io::open_output(a.out);
    io::write_dataset_csv(out, data);
    return kExitOk;
}

struct BenchArgs {
    std::vector<Index> m{10, 50, 100};
    Index t = 30, n = 5;
    int reps = 50;
    std::uint64_t seed = 0;
    std::string out, summary, opts;
    int jobs = 0;
};

int cmd_bench(const BenchArgs& a) {
    if (a.reps < 1) throw SchemaError(0, "reps", "must be at least 1");
    const EmOptions opts = a.opts.empty() ? EmOptions{} : io::em_options_from_json(io::read_json_file(a.opts));
    const PriorSpec prior = default_batch_prior();
    const int per_m = a.reps;
    const int total = static_cast<int>(a.m.size()) * per_m;
    std::vector<BenchRecord> records(static_cast<std::size_t>(total));
    parallel_for(total, resolve_jobs(a.jobs), [&](int k) {
        const Index m = a.m[static_cast<std::size_t>(k / per_m)];
        const int rep = k % per_m;
        records[static_cast<std::size_t>(k)] = run_bench_replication(bench_config(m, a.t, a.n, a.seed, rep), rep, prior, opts);
    });

    auto out = io::open_output(a.out);
    out << "label,m,t,n,replication,seconds,converged,iterations,abs_err_sigma2_eps,"
           "abs_err_Sigma_u_11,abs_err_Sigma_u_12,abs_err_Sigma_u_22,"
           "abs_err_Sigma_v_11,abs_err_Sigma_v_12,abs_err_Sigma_v_22\n";
    for (const BenchRecord& r : records) {
        out << r.label << ',' << r.m << ',' << r.t << ',' << r.n << ',' << r.replication + 1 << ','
            << io::format_double(r.seconds) << ',' << (r.converged ? "true" : "false") << ',' << r.iterations << ','
            << io::format_double(r.err_sigma2_eps) << ',' << io::format_double(r.err_Sigma_u(0, 0)) << ','
            << io::format_double(r.err_Sigma_u(0, 1)) << ',' << io::format_double(r.err_Sigma_u(1, 1)) << ','
            << io::format_double(r.err_Sigma_v(0, 0)) << ',' << io::format_double(r.err_Sigma_v(0, 1)) << ','
            << io::format_double(r.err_Sigma_v(1, 1)) << '\n';
    }

    std::ostringstream table;
    table << "datapoints,m,seconds\n";
    for (std::size_t g = 0; g < a.m.size(); ++g) {
        std::vector<double> secs;
        for (int rep = 0; rep < per_m; ++rep) secs.push_back(records[g * static_cast<std::size_t>(per_m) + rep].seconds);
        table << a.m[g] * a.t * a.n << ',' << a.m[g] << ',' << io::format_mean_sd(secs) << '\n';
    }
    std::cout << table.str();
    if (!a.summary.empty()) io::open_output(a.summary) << table.str();
    for (const BenchRecord& r : records)
        if (!r.converged) return kExitNotConverged;
    return kExitOk;
}

struct SimulateArgs {
    std::string env, alg, out, summary, log_dir;
    int reps = 20;
    std::uint64_t seed = 0;
    int jobs = 0;
};

int cmd_simulate(const SimulateArgs& a) {
    if (a.reps < 1) throw SchemaError(0, "reps", "must be at least 1");
    const MHealthConfig env_cfg =
        a.env.empty() ? MHealthConfig{} : io::mhealth_config_from_json(io::read_json_file(a.env));
    const FeatureMap fmap = FeatureMap::mhealth_default();
    io::AlgorithmConfig alg;
    alg.prior = io::default_bandit_prior(fmap);
    if (!a.alg.empty()) alg = io::algorithm_config_from_json(io::read_json_file(a.alg), fmap);

    std::vector<SimulationRecord> records(static_cast<std::size_t>(a.reps));
    const bool keep_logs = !a.log_dir.empty();
    parallel_for(a.reps, resolve_jobs(a.jobs), [&](int k) {
        records[static_cast<std::size_t>(k)] =
            run_simulation_replication(env_cfg, fmap, alg.prior, alg.em, alg.schedule, a.seed, k, keep_logs);
    });

    const int weeks = env_cfg.weeks_per_user;
    auto out = io::open_output(a.out);
    out << "replication";
    for (int w = 1; w <= weeks; ++w) out << ",week_" << w;
    out << '\n';
    for (const SimulationRecord& r : records) {
        out << r.replication + 1;
        for (double v : r.weekly_regret) out << ',' << io::format_double(v);
        out << '\n';
    }

    if (keep_logs) {
        std::filesystem::create_directories(a.log_dir);
        for (const SimulationRecord& r : records) {
            const auto path = std::filesystem::path(a.log_dir) / ("trial_" + std::to_string(r.replication + 1) + ".csv");
            auto log_out = io::open_output(path.string());
            io::write_trial_log_csv(log_out, r.log, fmap.actions);
        }
    }

    std::vector<double> secs;
    for (const auto& r : records) secs.push_back(r.variance_estimation_seconds);
    std::ostringstream table;
    table << "statistic,value\n";
    table << "variance_estimation_seconds," << io::format_mean_sd(secs) << '\n';
    for (int w = 0; w < weeks; ++w) {
        std::vector<double> reg;
        for (const auto& r : records) reg.push_back(r.weekly_regret[static_cast<std::size_t>(w)]);
        table << "regret_week_" << w + 1 << ',' << io::format_mean_sd(reg, 4, 4) << '\n';
    }
    std::cout << table.str();
    if (!a.summary.empty()) io::open_output(a.summary) << table.str();
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Empirical-Bayes fitting of crossed user x time linear mixed models"};
    app.require_subcommand(1);

    FitArgs fit_args;
    auto* fit = app.add_subcommand("fit", "Fit variance components by EM");
    fit->add_option("--data", fit_args.data, "Dataset CSV")->required();
    fit->add_option("--prior", fit_args.prior, "Prior JSON")->required();
    fit->add_option("--opts", fit_args.opts, "EM options JSON");
    fit->add_option("--init", fit_args.init, "Starting components (components JSON or a previous fit result)");
    fit->add_option("--out", fit_args.out, "Fit result JSON")->required();

    GenerateArgs gen_args;
    auto* gen = app.add_subcommand("generate", "Write a simulated batch dataset");
    gen->add_option("--m", gen_args.m, "Users")->check(CLI::PositiveNumber);
    gen->add_option("--t", gen_args.t, "Time points")->check(CLI::PositiveNumber);
    gen->add_option("--n", gen_args.n, "Replicates per user and time")->check(CLI::PositiveNumber);
    gen->add_option("--seed", gen_args.seed, "Root seed");
    gen->add_option("--out", gen_args.out, "Dataset CSV")->required();

    BenchArgs bench_args;
    auto* bench = app.add_subcommand("bench", "Time streamlined EM on simulated batch data");
    bench->add_option("--m", bench_args.m, "Comma-separated user counts")->delimiter(',')->check(CLI::PositiveNumber);
    bench->add_option("--t", bench_args.t, "Time points")->check(CLI::PositiveNumber);
    bench->add_option("--n", bench_args.n, "Replicates per user and time")->check(CLI::PositiveNumber);
    bench->add_option("--reps", bench_args.reps, "Replications per m");
    bench->add_option("--seed", bench_args.seed, "Root seed");
    bench->add_option("--opts", bench_args.opts, "EM options JSON");
    bench->add_option("--out", bench_args.out, "Per-replication CSV")->required();
    bench->add_option("--summary", bench_args.summary, "Summary CSV (also printed)");
    bench->add_option("--jobs", bench_args.jobs, "Worker threads (default: $CROSSED_LMM_JOBS or all cores)");

    SimulateArgs sim_args;
    auto* sim = app.add_subcommand("simulate", "Run Thompson-sampling trials in the mHealth environment");
    sim->add_option("--env", sim_args.env, "Environment config JSON");
    sim->add_option("--alg", sim_args.alg, "Algorithm config JSON");
    sim->add_option("--reps", sim_args.reps, "Replications");
    sim->add_option("--seed", sim_args.seed, "Root seed");
    sim->add_option("--out", sim_args.out, "Weekly regret CSV")->required();
    sim->add_option("--summary", sim_args.summary, "Summary CSV (also printed)");
    sim->add_option("--log-dir", sim_args.log_dir, "Directory for per-replication decision logs");
    sim->add_option("--jobs", sim_args.jobs, "Worker threads (default: $CROSSED_LMM_JOBS or all cores)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitError;
    }

    try {
        if (*fit) return cmd_fit(fit_args);
        if (*gen) return cmd_generate(gen_args);
        if (*bench) return cmd_bench(bench_args);
        if (*sim) return cmd_simulate(sim_args);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitError;
    }
    return kExitError;
}
