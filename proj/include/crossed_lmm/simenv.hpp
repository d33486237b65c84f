#pragma once

// Generative environments: the batch study generator (random intercept and
// slope on one Uniform(0,1) predictor) and a staggered-entry mobile-health
// environment with heterogeneous, decaying treatment effects.

#include "crossed_lmm/dataset.hpp"
#include "crossed_lmm/error.hpp"
#include "crossed_lmm/linalg.hpp"
#include "crossed_lmm/rng.hpp"
#include "crossed_lmm/trial_log.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace crossed_lmm {

struct BatchSimConfig {
    Index m = 10;
    Index t = 30;
    Index n = 5;
    Eigen::VectorXd true_beta = Eigen::Vector2d(0.58, 1.98);
    Eigen::MatrixXd true_Sigma_u = (Eigen::Matrix2d() << 0.32, 0.09, 0.09, 0.42).finished();
    Eigen::MatrixXd true_Sigma_v = (Eigen::Matrix2d() << 0.30, 0.0, 0.0, 0.25).finished();
    double true_sigma2_eps = 0.3;
    std::uint64_t seed = 0;
};

inline void validate(const BatchSimConfig& cfg) {
    if (cfg.m < 1 || cfg.t < 1 || cfg.n < 1) throw DimensionMismatch("batch simulation needs m, t, n >= 1");
    if (cfg.true_beta.size() != 2 || cfg.true_Sigma_u.rows() != 2 || cfg.true_Sigma_u.cols() != 2 ||
        cfg.true_Sigma_v.rows() != 2 || cfg.true_Sigma_v.cols() != 2)
        throw DimensionMismatch("batch simulation truth must be two-dimensional");
    if (!(cfg.true_sigma2_eps >= 0.0)) throw NonSPD("true_sigma2_eps");
    psd_factor(cfg.true_Sigma_u, "true_Sigma_u");
    psd_factor(cfg.true_Sigma_v, "true_Sigma_v");
}

// Rows ordered by user, then time, then replicate; z = z_u = z_v = [1, x].
inline TrialDataset generate_batch(const BatchSimConfig& cfg) {
    validate(cfg);
    TrialDataset data(ModelDims{cfg.m, cfg.t, 2, 2, 2});
    data.reserve(cfg.m * cfg.t * cfg.n);
    const Eigen::MatrixXd Lu = psd_factor(cfg.true_Sigma_u, "true_Sigma_u");
    const Eigen::MatrixXd Lv = psd_factor(cfg.true_Sigma_v, "true_Sigma_v");
    const double sd = std::sqrt(cfg.true_sigma2_eps);

    std::vector<Eigen::VectorXd> v(static_cast<std::size_t>(cfg.t));
    for (Index tau = 0; tau < cfg.t; ++tau) {
        auto gen = rng::stream(cfg.seed, "batch-time", {static_cast<std::uint64_t>(tau)});
        v[static_cast<std::size_t>(tau)] = Lv * standard_normal(2, gen);
    }
    Eigen::Vector2d z;
    for (Index i = 0; i < cfg.m; ++i) {
        auto gen = rng::stream(cfg.seed, "batch-user", {static_cast<std::uint64_t>(i)});
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        std::normal_distribution<double> noise(0.0, 1.0);
        const Eigen::VectorXd u = Lu * standard_normal(2, gen);
        for (Index tau = 0; tau < cfg.t; ++tau) {
            const Eigen::VectorXd& vt = v[static_cast<std::size_t>(tau)];
            for (Index r = 0; r < cfg.n; ++r) {
                z << 1.0, unif(gen);
                const double y = z.dot(cfg.true_beta) + z.dot(u) + z.dot(vt) + sd * noise(gen);
                data.add_row(i, tau, r, y, z, z, z);
            }
        }
    }
    return data;
}

// The mobile-health environment family. Users enter in weekly cohorts,
// stay for weeks_per_user weeks and receive decisions_per_day decisions a
// day. Under action a in {0, 1} and context x ~ Uniform(0,1),
//
//   E[Y | x, a] = [1, x] beta + [1, x] u_i + a * delta_i * g(day),
//   g(day) = max(0, 1 - day / decay_horizon_days),
//
// with u_i ~ N(0, Sigma_u) and delta_i ~ N(delta_mean, delta_sd^2).
struct MHealthConfig {
    int n_users = 32;
    int weeks_per_user = 10;
    int decisions_per_day = 5;
    int cohort_size = 4;               // users joining per week
    Eigen::VectorXd beta = Eigen::Vector2d(0.58, 1.98);
    Eigen::MatrixXd Sigma_u = (Eigen::Matrix2d() << 0.32, 0.09, 0.09, 0.42).finished();
    double delta_mean = 0.5;
    double delta_sd = 0.5;
    double decay_horizon_days = 0.0;   // <= 0 means the study length
    double noise_var = 0.3;
    std::uint64_t seed = 0;
};

struct StepOutcome {
    double reward = 0.0;
    Eigen::VectorXd expected;  // per action
};

class MHealthEnv {
public:
    static constexpr int kActions = 2;

    explicit MHealthEnv(MHealthConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.n_users < 1 || cfg_.weeks_per_user < 1 || cfg_.decisions_per_day < 1 || cfg_.cohort_size < 1)
            throw DimensionMismatch("mHealth environment needs positive user, week, decision and cohort counts");
        if (cfg_.beta.size() != 2 || cfg_.Sigma_u.rows() != 2 || cfg_.Sigma_u.cols() != 2)
            throw DimensionMismatch("mHealth truth must be two-dimensional");
        if (!(cfg_.noise_var >= 0.0) || !(cfg_.delta_sd >= 0.0))
            throw DimensionMismatch("mHealth noise and effect spread must be non-negative");
        const Eigen::MatrixXd Lu = psd_factor(cfg_.Sigma_u, "Sigma_u");
        if (cfg_.decay_horizon_days <= 0.0) cfg_.decay_horizon_days = static_cast<double>(days_in_study());
        for (int i = 0; i < cfg_.n_users; ++i) {
            auto gen = rng::stream(cfg_.seed, "env-user", {static_cast<std::uint64_t>(i)});
            std::normal_distribution<double> nd(0.0, 1.0);
            u_.push_back(Lu * standard_normal(2, gen));
            delta_.push_back(cfg_.delta_mean + cfg_.delta_sd * nd(gen));
            entry_.push_back(7 * (i / cfg_.cohort_size));
        }
    }

    const MHealthConfig& config() const { return cfg_; }
    int users() const { return cfg_.n_users; }
    int days_in_study() const { return 7 * cfg_.weeks_per_user; }
    int decisions_per_day() const { return cfg_.decisions_per_day; }
    int entry_day(int i) const { return entry_[static_cast<std::size_t>(i)]; }
    int calendar_days() const { return *std::max_element(entry_.begin(), entry_.end()) + days_in_study(); }
    double treatment_effect(int i) const { return delta_[static_cast<std::size_t>(i)]; }
    const Eigen::VectorXd& user_effect(int i) const { return u_[static_cast<std::size_t>(i)]; }

    bool active(int i, int calendar_day) const {
        const int d = calendar_day - entry_day(i);
        return d >= 0 && d < days_in_study();
    }

    // Non-increasing, g(0) = 1, within [0, 1].
    double decay(int day_in_study) const {
        return std::clamp(1.0 - static_cast<double>(day_in_study) / cfg_.decay_horizon_days, 0.0, 1.0);
    }

    double context(int i, int day_in_study, int decision) const {
        check_window(i, day_in_study);
        auto gen = stream("env-context", i, day_in_study, decision);
        return std::uniform_real_distribution<double>(0.0, 1.0)(gen);
    }

    Eigen::VectorXd expected_rewards(int i, int day_in_study, double x) const {
        check_window(i, day_in_study);
        const Eigen::Vector2d z(1.0, x);
        const double base = z.dot(cfg_.beta) + z.dot(user_effect(i));
        Eigen::VectorXd out(kActions);
        out(0) = base;
        out(1) = base + treatment_effect(i) * decay(day_in_study);
        return out;
    }

    StepOutcome step(int i, int day_in_study, int decision, double x, int action) const {
        if (action < 0 || action >= kActions) throw IndexOutOfRange("action " + std::to_string(action));
        StepOutcome out;
        out.expected = expected_rewards(i, day_in_study, x);
        auto gen = stream("env-noise", i, day_in_study, decision);
        out.reward = out.expected(action) + std::sqrt(cfg_.noise_var) * std::normal_distribution<double>(0.0, 1.0)(gen);
        return out;
    }

private:
    std::mt19937_64 stream(std::string_view tag, int i, int d, int k) const {
        return rng::stream(cfg_.seed, tag,
                           {static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(k)});
    }

    void check_window(int i, int day_in_study) const {
        if (i < 0 || i >= cfg_.n_users) throw IndexOutOfRange("user " + std::to_string(i));
        if (day_in_study < 0 || day_in_study >= days_in_study())
            throw InactiveUser("user " + std::to_string(i) + " is not in the study on day " +
                               std::to_string(day_in_study));
    }

    MHealthConfig cfg_;
    std::vector<Eigen::VectorXd> u_;
    std::vector<double> delta_;
    std::vector<int> entry_;
};

inline MHealthEnv build_mhealth_env(const MHealthConfig& cfg) { return MHealthEnv(cfg); }

inline StepOutcome env_step(const MHealthEnv& env, int i, int day_in_study, int decision, double x, int action) {
    return env.step(i, day_in_study, decision, x, action);
}

// Mean regret of all decisions in each week-in-study 1..n_weeks (n_weeks = 0
// uses the largest week present).
inline std::vector<double> weekly_regret(const BanditTrialLog& log, int n_weeks = 0) {
    if (n_weeks <= 0)
        for (const auto& r : log.records) n_weeks = std::max(n_weeks, r.week_in_study);
    std::vector<double> sum(static_cast<std::size_t>(n_weeks), 0.0);
    std::vector<long> count(static_cast<std::size_t>(n_weeks), 0);
    for (const auto& r : log.records) {
        if (r.week_in_study < 1 || r.week_in_study > n_weeks) continue;
        sum[static_cast<std::size_t>(r.week_in_study - 1)] += r.regret;
        ++count[static_cast<std::size_t>(r.week_in_study - 1)];
    }
    for (int w = 0; w < n_weeks; ++w) {
        if (count[static_cast<std::size_t>(w)] == 0) throw EmptyWeek(w + 1);
        sum[static_cast<std::size_t>(w)] /= static_cast<double>(count[static_cast<std::size_t>(w)]);
    }
    return sum;
}

}  // namespace crossed_lmm
