#pragma once

// Empirical-Bayes estimation of (sigma2_eps, Sigma_u, Sigma_v) by EM.
//
// The E-step is either the full dense posterior or the streamlined two-level
// solve; both yield the same PosteriorBlocks. The M-step is closed form:
//
//   Sigma_u    = (1/m) sum_i   (mu_u_i mu_u_i^T + Sigma_u_i)
//   Sigma_v    = (1/t) sum_tau (mu_v_tau mu_v_tau^T + Sigma_v_tau)
//   sigma2_eps = (1/N) sum_rows E[(y - z beta - z_u u_i - z_v v_tau)^2]
//
// where the last expectation expands into the squared residual at the
// posterior mean plus the three variance traces and twice the three
// cross-covariance traces.

#include "crossed_lmm/dataset.hpp"
#include "crossed_lmm/dense_oracle.hpp"
#include "crossed_lmm/error.hpp"
#include "crossed_lmm/model.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace crossed_lmm {

enum class EStepMode { dense, streamlined };

struct EmOptions {
    double tol = 1e-5;
    int max_iter = 100;
    EStepMode e_step_mode = EStepMode::streamlined;
    std::optional<VarianceComponents> init;  // default_init(data) when empty
};

struct FitResult {
    VarianceComponents sigma_hat;
    PosteriorBlocks posterior;       // at sigma_hat
    std::vector<double> trace;       // em_objective after each M-step
    std::vector<VarianceComponents> path;  // starting point followed by every M-step output
    int iterations = 0;
    bool converged = false;
};

// Smallest eigenvalue allowed in an M-step output before it is repaired.
inline constexpr double kSpdJitter = 1e-10;

inline void validate(const EmOptions& opts) {
    if (!(opts.tol > 0.0)) throw DimensionMismatch("EM tolerance must be positive");
    if (opts.max_iter < 1) throw DimensionMismatch("EM max_iter must be at least 1");
}

// sigma2_eps = sample variance of y (1 when degenerate); Sigma_u = Sigma_v = I.
inline VarianceComponents default_init(const TrialDataset& data) {
    const ModelDims& d = data.dims();
    VarianceComponents s;
    const auto y = data.y();
    double var = 0.0;
    if (y.size() > 1) {
        const double mean = y.mean();
        var = (y.array() - mean).square().sum() / static_cast<double>(y.size() - 1);
    }
    s.sigma2_eps = (var > 0.0 && std::isfinite(var)) ? var : 1.0;
    s.Sigma_u = Eigen::MatrixXd::Identity(d.q_u, d.q_u);
    s.Sigma_v = Eigen::MatrixXd::Identity(d.q_v, d.q_v);
    return s;
}

inline void check_fit_data(const TrialDataset& data) {
    const ModelDims& d = data.dims();
    check_groups(d);
    const auto by_user = data.rows_by_user();
    for (std::size_t i = 0; i < by_user.size(); ++i)
        if (by_user[i].empty()) throw DegenerateData("user " + std::to_string(i + 1) + " has no observations");
    const auto per_time = data.rows_per_time();
    for (std::size_t k = 0; k < per_time.size(); ++k)
        if (per_time[k] == 0) throw DegenerateData("time " + std::to_string(k + 1) + " has no observations");
}

namespace detail {

inline Eigen::MatrixXd repaired_spd(Eigen::MatrixXd m, const std::string& name) {
    m = 0.5 * (m + m.transpose());
    if (!m.allFinite()) throw Diverged(name + " is not finite");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m, Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() >= kSpdJitter) return m;
    m.diagonal().array() += kSpdJitter;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> again(m, Eigen::EigenvaluesOnly);
    if (!(again.eigenvalues().minCoeff() > 0.0)) throw Diverged(name + " lost positive definiteness");
    return m;
}

inline double repaired_variance(double v) {
    if (!std::isfinite(v)) throw Diverged("sigma2_eps is not finite");
    if (v >= kSpdJitter) return v;
    v += kSpdJitter;
    if (!(v > 0.0)) throw Diverged("sigma2_eps is not positive");
    return v;
}

}  // namespace detail

// Closed-form M-step without any positive-definiteness repair.
inline VarianceComponents m_step_raw(const TrialDataset& data, const PosteriorBlocks& post) {
    check_posterior(data, post);
    const ModelDims& d = data.dims();
    VarianceComponents out;
    out.Sigma_u = Eigen::MatrixXd::Zero(d.q_u, d.q_u);
    for (Index i = 0; i < d.m; ++i) {
        const auto k = static_cast<std::size_t>(i);
        if (post.mu_u[k].size() != d.q_u || post.Sigma_u_post[k].rows() != d.q_u)
            throw DimensionMismatch("posterior u block has the wrong size");
        out.Sigma_u += post.mu_u[k] * post.mu_u[k].transpose() + post.Sigma_u_post[k];
    }
    out.Sigma_u /= static_cast<double>(d.m);
    out.Sigma_v = Eigen::MatrixXd::Zero(d.q_v, d.q_v);
    for (Index tau = 0; tau < d.t; ++tau) {
        const auto k = static_cast<std::size_t>(tau);
        if (post.mu_v[k].size() != d.q_v || post.Sigma_v_post[k].rows() != d.q_v)
            throw DimensionMismatch("posterior v block has the wrong size");
        out.Sigma_v += post.mu_v[k] * post.mu_v[k].transpose() + post.Sigma_v_post[k];
    }
    out.Sigma_v /= static_cast<double>(d.t);
    out.sigma2_eps = data.empty() ? 0.0 : expected_squared_residuals(data, post) / static_cast<double>(data.size());
    return out;
}

// M-step with the jitter repair: a component whose smallest eigenvalue is
// below kSpdJitter gets kSpdJitter added to its diagonal once; if that does
// not make it positive definite the fit has diverged.
inline VarianceComponents m_step(const TrialDataset& data, const PosteriorBlocks& post) {
    VarianceComponents out = m_step_raw(data, post);
    out.Sigma_u = detail::repaired_spd(std::move(out.Sigma_u), "Sigma_u");
    out.Sigma_v = detail::repaired_spd(std::move(out.Sigma_v), "Sigma_v");
    out.sigma2_eps = detail::repaired_variance(out.sigma2_eps);
    return out;
}

inline PosteriorBlocks e_step(const TrialDataset& data, const VarianceComponents& sigma, const PriorSpec& prior,
                              EStepMode mode) {
    return mode == EStepMode::dense ? posterior_dense(data, sigma, prior) : posterior_streamlined(data, sigma, prior);
}

// Alternate E- and M-steps until successive em_objective values differ by
// less than opts.tol, or max_iter M-steps. trace[l] is evaluated at the
// (l+1)-th M-step output under the posterior that produced it.
inline FitResult fit_em(const TrialDataset& data, const PriorSpec& prior, const EmOptions& opts) {
    validate(opts);
    check_fit_data(data);
    const ModelDims& d = data.dims();
    validate(prior, d.p);

    FitResult fit;
    VarianceComponents sigma = opts.init ? *opts.init : default_init(data);
    validate(sigma, d.q_u, d.q_v);
    fit.path.push_back(sigma);

    for (int iter = 1; iter <= opts.max_iter; ++iter) {
        const PosteriorBlocks post = e_step(data, sigma, prior, opts.e_step_mode);
        sigma = m_step(data, post);
        fit.trace.push_back(em_objective(data, sigma, prior, post));
        fit.path.push_back(sigma);
        fit.iterations = iter;
        const auto n = fit.trace.size();
        if (!std::isfinite(fit.trace.back())) throw Diverged("EM objective is not finite");
        if (n >= 2 && std::abs(fit.trace[n - 1] - fit.trace[n - 2]) < opts.tol) {
            fit.converged = true;
            break;
        }
    }
    fit.sigma_hat = sigma;
    fit.posterior = e_step(data, sigma, prior, opts.e_step_mode);
    return fit;
}

// Warm-started refit after the dataset has grown.
inline FitResult incremental_refit(const FitResult& prev, const TrialDataset& data, const PriorSpec& prior,
                                   EmOptions opts) {
    opts.init = prev.sigma_hat;
    return fit_em(data, prior, opts);
}

}  // namespace crossed_lmm
