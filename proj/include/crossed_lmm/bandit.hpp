#pragma once

// Thompson sampling with the crossed mixed-effects reward model.
//
// For user i at time tau the relevant parameter is theta = [beta; u_i; v_tau]
// with joint Gaussian posterior assembled from PosteriorBlocks. Action k is
// chosen with the posterior probability that its expected reward is the
// largest.

#include "crossed_lmm/dataset.hpp"
#include "crossed_lmm/em.hpp"
#include "crossed_lmm/error.hpp"
#include "crossed_lmm/linalg.hpp"
#include "crossed_lmm/model.hpp"
#include "crossed_lmm/rng.hpp"
#include "crossed_lmm/simenv.hpp"
#include "crossed_lmm/trial_log.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace crossed_lmm {

// Feature evaluators for the fixed, user and time design rows.
struct FeatureMap {
    using Evaluator = std::function<Eigen::VectorXd(const Eigen::VectorXd& context, int action)>;

    int actions = 2;
    Index p = 0, q_u = 0, q_v = 0;
    Evaluator f, f_u, f_v;

    Index theta_size() const { return p + q_u + q_v; }

    // [f; f_u; f_v] for one (context, action).
    Eigen::VectorXd joint(const Eigen::VectorXd& x, int a) const {
        const Eigen::VectorXd z = f(x, a), zu = f_u(x, a), zv = f_v(x, a);
        if (z.size() != p || zu.size() != q_u || zv.size() != q_v)
            throw DimensionMismatch("feature evaluator returned a row of the wrong length");
        Eigen::VectorXd out(theta_size());
        out << z, zu, zv;
        return out;
    }

    // K x (p + q_u + q_v); row k is joint(x, k).
    Eigen::MatrixXd design(const Eigen::VectorXd& x) const {
        Eigen::MatrixXd out(actions, theta_size());
        for (int k = 0; k < actions; ++k) out.row(k) = joint(x, k).transpose();
        return out;
    }

    // Scalar context x, binary action a: f = [1, x, a], f_u = [1, x, a],
    // f_v = [a] (a time-varying treatment effect).
    static FeatureMap mhealth_default() {
        FeatureMap fm;
        fm.actions = 2;
        fm.p = 3;
        fm.q_u = 3;
        fm.q_v = 1;
        fm.f = [](const Eigen::VectorXd& x, int a) { return Eigen::Vector3d(1.0, x(0), a).eval(); };
        fm.f_u = fm.f;
        fm.f_v = [](const Eigen::VectorXd&, int a) { return Eigen::VectorXd::Constant(1, a).eval(); };
        return fm;
    }
};

inline void validate(const FeatureMap& fm) {
    if (fm.actions < 2) throw DimensionMismatch("feature map needs at least two actions");
    if (!fm.f || !fm.f_u || !fm.f_v) throw DimensionMismatch("feature map evaluators are missing");
    if (fm.p < 1 || fm.q_u < 1 || fm.q_v < 1) throw DimensionMismatch("feature map dimensions must be positive");
}

struct JointPosterior {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

inline JointPosterior joint_posterior_theta(const PosteriorBlocks& post, Index i, Index tau) {
    if (i < 0 || i >= post.users()) throw IndexOutOfRange("user " + std::to_string(i));
    if (tau < 0 || tau >= post.times()) throw IndexOutOfRange("time " + std::to_string(tau));
    const auto ui = static_cast<std::size_t>(i);
    const auto vt = static_cast<std::size_t>(tau);
    const Index p = post.mu_beta_post.size(), qu = post.mu_u[ui].size(), qv = post.mu_v[vt].size();
    JointPosterior out;
    out.mean.resize(p + qu + qv);
    out.mean << post.mu_beta_post, post.mu_u[ui], post.mu_v[vt];
    Eigen::MatrixXd c(p + qu + qv, p + qu + qv);
    c.block(0, 0, p, p) = post.Sigma_beta_post;
    c.block(0, p, p, qu) = post.Cov_beta_u[ui];
    c.block(0, p + qu, p, qv) = post.Cov_beta_v[vt];
    c.block(p, p, qu, qu) = post.Sigma_u_post[ui];
    c.block(p, p + qu, qu, qv) = post.Cov_u_v[ui][vt];
    c.block(p + qu, p + qu, qv, qv) = post.Sigma_v_post[vt];
    c.block(p, 0, qu, p) = post.Cov_beta_u[ui].transpose();
    c.block(p + qu, 0, qv, p) = post.Cov_beta_v[vt].transpose();
    c.block(p + qu, p, qv, qu) = post.Cov_u_v[ui][vt].transpose();
    out.cov = symmetrize(c);
    return out;
}

// Posterior with no observations: beta ~ N(mu_beta, Sigma_beta), u and v at
// their random-effect distributions, all cross-covariances zero.
inline PosteriorBlocks prior_posterior(const ModelDims& d, const VarianceComponents& sigma, const PriorSpec& prior) {
    PosteriorBlocks post;
    post.mu_beta_post = prior.mu_beta;
    post.Sigma_beta_post = prior.Sigma_beta;
    post.mu_u.assign(static_cast<std::size_t>(d.m), Eigen::VectorXd::Zero(d.q_u));
    post.Sigma_u_post.assign(static_cast<std::size_t>(d.m), sigma.Sigma_u);
    post.Cov_beta_u.assign(static_cast<std::size_t>(d.m), Eigen::MatrixXd::Zero(d.p, d.q_u));
    post.mu_v.assign(static_cast<std::size_t>(d.t), Eigen::VectorXd::Zero(d.q_v));
    post.Sigma_v_post.assign(static_cast<std::size_t>(d.t), sigma.Sigma_v);
    post.Cov_beta_v.assign(static_cast<std::size_t>(d.t), Eigen::MatrixXd::Zero(d.p, d.q_v));
    post.Cov_u_v.assign(static_cast<std::size_t>(d.m), std::vector<Eigen::MatrixXd>(static_cast<std::size_t>(d.t),
                                                                                   Eigen::MatrixXd::Zero(d.q_u, d.q_v)));
    post.log_det_cov = log_det_spd(prior.Sigma_beta, "Sigma_beta") +
                       static_cast<double>(d.m) * log_det_spd(sigma.Sigma_u, "Sigma_u") +
                       static_cast<double>(d.t) * log_det_spd(sigma.Sigma_v, "Sigma_v");
    return post;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

enum class ProbabilityMethod { automatic, closed_form, monte_carlo };

// Pr(action k has the largest expected reward) for two actions:
// Phi(mu^T d / sqrt(d^T Sigma d)) with d = phi(x,1) - phi(x,0). A point-mass
// difference resolves ties toward action 0.
inline Eigen::VectorXd two_action_probability(const JointPosterior& theta, const Eigen::MatrixXd& design) {
    const Eigen::VectorXd d = (design.row(1) - design.row(0)).transpose();
    const double mean = d.dot(theta.mean);
    const double var = d.dot(theta.cov * d);
    double p1 = 0.0;
    if (var > 1e-300 && std::isfinite(var))
        p1 = normal_cdf(mean / std::sqrt(var));
    else
        p1 = mean > 0.0 ? 1.0 : 0.0;
    Eigen::VectorXd pi(2);
    pi << 1.0 - p1, p1;
    return pi;
}

// Monte Carlo estimate with n_draws common draws of theta; ties go to the
// lowest action index.
template <class Engine>
Eigen::VectorXd monte_carlo_probability(const JointPosterior& theta, const Eigen::MatrixXd& design, int n_draws,
                                        Engine& gen) {
    if (n_draws < 1) throw DimensionMismatch("n_draws must be at least 1");
    const Eigen::MatrixXd L = psd_factor(theta.cov, "posterior covariance of theta");
    const Index dim = theta.mean.size();
    const Index k = design.rows();
    const Eigen::VectorXd base = design * theta.mean;
    const Eigen::MatrixXd spread = design * L;
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(k);
    Eigen::VectorXd xi(dim), value(k);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (int s = 0; s < n_draws; ++s) {
        for (Index j = 0; j < dim; ++j) xi(j) = nd(gen);
        value.noalias() = spread * xi;
        value += base;
        Index best = 0;
        for (Index a = 1; a < k; ++a)
            if (value(a) > value(best)) best = a;
        counts(best) += 1.0;
    }
    return counts / static_cast<double>(n_draws);
}

template <class Engine>
Eigen::VectorXd randomization_probability(const JointPosterior& theta, const Eigen::VectorXd& x, const FeatureMap& fmap,
                                          int n_draws, Engine& gen,
                                          ProbabilityMethod method = ProbabilityMethod::automatic) {
    validate(fmap);
    if (n_draws < 1) throw DimensionMismatch("n_draws must be at least 1");
    if (theta.mean.size() != fmap.theta_size() || theta.cov.rows() != fmap.theta_size())
        throw DimensionMismatch("posterior of theta does not match the feature map");
    const Eigen::MatrixXd design = fmap.design(x);
    if (method == ProbabilityMethod::closed_form && fmap.actions != 2)
        throw DimensionMismatch("closed-form probability needs exactly two actions");
    if (method == ProbabilityMethod::closed_form ||
        (method == ProbabilityMethod::automatic && fmap.actions == 2)) {
        psd_factor(theta.cov, "posterior covariance of theta");
        return two_action_probability(theta, design);
    }
    return monte_carlo_probability(theta, design, n_draws, gen);
}

template <class Engine>
int sample_action(const Eigen::VectorXd& pi, Engine& gen) {
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(gen);
    double acc = 0.0;
    for (Index k = 0; k < pi.size(); ++k) {
        acc += pi(k);
        if (u < acc) return static_cast<int>(k);
    }
    for (Index k = pi.size() - 1; k >= 0; --k)
        if (pi(k) > 0.0) return static_cast<int>(k);
    return 0;
}

struct TrialSchedule {
    int refit_every_days = 1;  // hyper-parameters are refit after this many calendar days
    int n_draws = 10000;
    ProbabilityMethod method = ProbabilityMethod::automatic;
};

// Runs the Thompson-sampling trial over the environment's calendar.
//
// Each calendar day has decisions_per_day slots. At every slot the posterior
// is recomputed from all rewards observed so far under the current
// hyper-parameters and every active user receives a decision; the slot's
// rewards are added to the data afterwards. After every refit_every_days days
// the hyper-parameters are re-estimated by EM warm-started at the previous
// estimate. Until the first rewards arrive (or when the data cannot identify
// the posterior yet) the prior is used.
inline BanditTrialLog run_trial(const MHealthEnv& env, const FeatureMap& fmap, const PriorSpec& prior,
                                const EmOptions& em_opts, const TrialSchedule& schedule, std::uint64_t seed) {
    validate(fmap);
    validate(em_opts);
    validate(prior, fmap.p);
    if (fmap.actions != MHealthEnv::kActions) throw DimensionMismatch("feature map and environment disagree on K");
    if (schedule.refit_every_days < 1 || schedule.n_draws < 1) throw DimensionMismatch("invalid trial schedule");

    const int n_users = env.users();
    const int dpd = env.decisions_per_day();
    TrialDataset data(ModelDims{0, 0, fmap.p, fmap.q_u, fmap.q_v});
    data.reserve(static_cast<Index>(n_users) * env.days_in_study() * dpd);

    VarianceComponents sigma;
    if (em_opts.init) {
        sigma = *em_opts.init;
    } else {
        sigma.sigma2_eps = 1.0;
        sigma.Sigma_u = Eigen::MatrixXd::Identity(fmap.q_u, fmap.q_u);
        sigma.Sigma_v = Eigen::MatrixXd::Identity(fmap.q_v, fmap.q_v);
    }
    validate(sigma, fmap.q_u, fmap.q_v);

    BanditTrialLog log;
    log.records.reserve(static_cast<std::size_t>(n_users) * env.days_in_study() * dpd);
    std::vector<int> active;
    Eigen::VectorXd x(1);

    for (int day = 0; day < env.calendar_days(); ++day) {
        active.clear();
        Index m_cur = data.dims().m, t_cur = data.dims().t;
        for (int i = 0; i < n_users; ++i) {
            if (!env.active(i, day)) continue;
            active.push_back(i);
            m_cur = std::max<Index>(m_cur, i + 1);
            t_cur = std::max<Index>(t_cur, day - env.entry_day(i) + 1);
        }
        if (active.empty()) continue;
        data.grow(m_cur, t_cur);

        for (int slot = 0; slot < dpd; ++slot) {
            PosteriorBlocks post;
            bool from_data = !data.empty();
            if (from_data) {
                try {
                    post = posterior_streamlined(data, sigma, prior);
                } catch (const RankDeficient&) {
                    from_data = false;
                }
            }
            if (!from_data) post = prior_posterior(data.dims(), sigma, prior);

            const std::size_t first = log.records.size();
            for (int i : active) {
                const int tau = day - env.entry_day(i);
                const auto key = {static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(tau),
                                  static_cast<std::uint64_t>(slot)};
                DecisionRecord rec;
                rec.user = i;
                rec.time = tau;
                rec.decision = slot;
                rec.week_in_study = tau / 7 + 1;
                x(0) = env.context(i, tau, slot);
                rec.context = x;
                const JointPosterior theta = joint_posterior_theta(post, i, tau);
                auto mc = rng::stream(seed, "trial-mc", key);
                rec.pi = randomization_probability(theta, x, fmap, schedule.n_draws, mc, schedule.method);
                auto pick = rng::stream(seed, "trial-action", key);
                rec.action = sample_action(rec.pi, pick);
                const StepOutcome out = env.step(i, tau, slot, x(0), rec.action);
                rec.reward = out.reward;
                rec.expected = out.expected;
                rec.regret = out.expected.maxCoeff() - out.expected(rec.action);
                log.records.push_back(std::move(rec));
            }
            for (std::size_t r = first; r < log.records.size(); ++r) {
                const DecisionRecord& rec = log.records[r];
                data.add_row(rec.user, rec.time, rec.decision, rec.reward, fmap.f(rec.context, rec.action),
                             fmap.f_u(rec.context, rec.action), fmap.f_v(rec.context, rec.action));
            }
        }

        if ((day + 1) % schedule.refit_every_days == 0) {
            EmOptions opts = em_opts;
            opts.init = sigma;
            const auto start = std::chrono::steady_clock::now();
            const FitResult fit = fit_em(data, prior, opts);
            log.variance_estimation_seconds +=
                std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            sigma = fit.sigma_hat;
            ++log.refits;
        }
    }
    log.weekly_regret = weekly_regret(log, env.config().weeks_per_user);
    return log;
}

}  // namespace crossed_lmm
