#pragma once

// Replication drivers for the batch timing study and the bandit simulation.
// Every replication draws its randomness from streams derived from one root
// seed and its own coordinates, so replications may run in any order or in
// parallel and still reproduce.

#include "crossed_lmm/bandit.hpp"
#include "crossed_lmm/em.hpp"
#include "crossed_lmm/rng.hpp"
#include "crossed_lmm/simenv.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace crossed_lmm {

struct BenchRecord {
    Index label = 0;  // number of data points m * t * n
    Index m = 0, t = 0, n = 0;
    int replication = 0;
    double seconds = 0.0;
    bool converged = false;
    int iterations = 0;
    // Element-wise |estimate - truth|.
    double err_sigma2_eps = 0.0;
    Eigen::MatrixXd err_Sigma_u, err_Sigma_v;
};

inline PriorSpec default_batch_prior() { return {Eigen::VectorXd::Zero(2), 100.0 * Eigen::MatrixXd::Identity(2, 2)}; }

inline BatchSimConfig bench_config(Index m, Index t, Index n, std::uint64_t seed, int replication) {
    BatchSimConfig cfg;
    cfg.m = m;
    cfg.t = t;
    cfg.n = n;
    cfg.seed = rng::derive(seed, "bench", {static_cast<std::uint64_t>(m), static_cast<std::uint64_t>(t),
                                           static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(replication)});
    return cfg;
}

// Generates one dataset, fits it and records only the fitting time.
inline BenchRecord run_bench_replication(const BatchSimConfig& cfg, int replication, const PriorSpec& prior,
                                         const EmOptions& opts) {
    const TrialDataset data = generate_batch(cfg);
    const auto start = std::chrono::steady_clock::now();
    const FitResult fit = fit_em(data, prior, opts);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    BenchRecord rec;
    rec.label = cfg.m * cfg.t * cfg.n;
    rec.m = cfg.m;
    rec.t = cfg.t;
    rec.n = cfg.n;
    rec.replication = replication;
    rec.seconds = seconds;
    rec.converged = fit.converged;
    rec.iterations = fit.iterations;
    rec.err_sigma2_eps = std::abs(fit.sigma_hat.sigma2_eps - cfg.true_sigma2_eps);
    rec.err_Sigma_u = (fit.sigma_hat.Sigma_u - cfg.true_Sigma_u).cwiseAbs();
    rec.err_Sigma_v = (fit.sigma_hat.Sigma_v - cfg.true_Sigma_v).cwiseAbs();
    return rec;
}

struct SimulationRecord {
    int replication = 0;
    std::vector<double> weekly_regret;
    double variance_estimation_seconds = 0.0;
    BanditTrialLog log;
};

inline SimulationRecord run_simulation_replication(MHealthConfig env_cfg, const FeatureMap& fmap,
                                                   const PriorSpec& prior, const EmOptions& em_opts,
                                                   const TrialSchedule& schedule, std::uint64_t seed, int replication,
                                                   bool keep_log = false) {
    env_cfg.seed = rng::derive(seed, "simulate-env", {env_cfg.seed, static_cast<std::uint64_t>(replication)});
    const MHealthEnv env = build_mhealth_env(env_cfg);
    const std::uint64_t trial_seed = rng::derive(seed, "simulate-trial", {static_cast<std::uint64_t>(replication)});
    BanditTrialLog log = run_trial(env, fmap, prior, em_opts, schedule, trial_seed);
    SimulationRecord rec;
    rec.replication = replication;
    rec.weekly_regret = log.weekly_regret;
    rec.variance_estimation_seconds = log.variance_estimation_seconds;
    if (keep_log) rec.log = std::move(log);
    return rec;
}

// Runs task(0..count-1) on `jobs` worker threads. The first exception thrown
// by any task is rethrown after all workers finish.
inline void parallel_for(int count, int jobs, const std::function<void(int)>& task) {
    if (jobs <= 1 || count <= 1) {
        for (int k = 0; k < count; ++k) task(k);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        while (true) {
            const int k = next.fetch_add(1);
            if (k >= count) return;
            try {
                task(k);
            } catch (...) {
                const std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next.store(count);
            }
        }
    };
    std::vector<std::thread> pool;
    const int n = std::min(jobs, count);
    pool.reserve(static_cast<std::size_t>(n));
    for (int w = 0; w < n; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace crossed_lmm
