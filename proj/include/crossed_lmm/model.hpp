#pragma once

// Block assembly of the posterior as a two-level least-squares problem, the
// streamlined posterior, and the closed-form expected complete-data
// log-likelihood.
//
// Level-1 blocks are users. Block i stacks, top to bottom:
//   - the rows of user i, scaled by 1/sigma_eps,
//   - p rows m^{-1/2} Sigma_beta^{-1/2}   (beta prior share),
//   - t*q_v rows m^{-1/2} (I_t (x) Sigma_v^{-1/2})   (v prior share),
//   - q_u rows Sigma_u^{-1/2}   (u_i prior, sparse columns only).
// The dense columns are [beta; v_1..v_t], the sparse columns are u_i.
// Summed over the m blocks the prior shares give back exactly one copy of
// Sigma_beta^{-1} and I_t (x) Sigma_v^{-1}.

#include "crossed_lmm/dataset.hpp"
#include "crossed_lmm/error.hpp"
#include "crossed_lmm/solver.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace crossed_lmm {

// Upper-triangular U with U^T U = S^{-1}.
inline Eigen::MatrixXd inverse_sqrt_upper(const Eigen::MatrixXd& S, const std::string& name) {
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success) throw NonSPD(name);
    const Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(S.rows(), S.cols()));
    Eigen::LLT<Eigen::MatrixXd> llt_inv(0.5 * (inv + inv.transpose()));
    if (llt_inv.info() != Eigen::Success) throw NonSPD(name);
    return llt_inv.matrixU();
}

inline void check_groups(const ModelDims& d) {
    if (d.m < 1 || d.t < 1) throw DimensionMismatch("model needs at least one user and one time point");
}

class BlockAssembler {
public:
    BlockAssembler(const TrialDataset& data, const VarianceComponents& sigma, const PriorSpec& prior)
        : data_(data), dims_(data.dims()) {
        check_groups(dims_);
        validate(prior, dims_.p);
        validate(sigma, dims_.q_u, dims_.q_v);
        inv_sd_ = 1.0 / std::sqrt(sigma.sigma2_eps);
        share_ = 1.0 / std::sqrt(static_cast<double>(dims_.m));
        Ubeta_ = inverse_sqrt_upper(prior.Sigma_beta, "Sigma_beta");
        Uu_ = inverse_sqrt_upper(sigma.Sigma_u, "Sigma_u");
        Uv_ = inverse_sqrt_upper(sigma.Sigma_v, "Sigma_v");
        beta_rhs_ = share_ * (Ubeta_ * prior.mu_beta);
        rows_ = data.rows_by_user();
    }

    Index blocks() const { return dims_.m; }
    Index dense_cols() const { return dims_.dense_size(); }
    Index sparse_cols() const { return dims_.q_u; }
    Index block_rows(Index i) const {
        return static_cast<Index>(rows_[static_cast<std::size_t>(i)].size()) + dims_.p + dims_.t * dims_.q_v +
               dims_.q_u;
    }

    TwoLevelBlock block(Index i) const {
        TwoLevelBlock blk;
        fill(i, blk);
        return blk;
    }

    // Writes block i into `blk`, reusing its storage when the shape allows.
    void fill(Index i, TwoLevelBlock& blk) const {
        const auto& rows = rows_[static_cast<std::size_t>(i)];
        const Index n = static_cast<Index>(rows.size());
        const Index p = dims_.p, qu = dims_.q_u, qv = dims_.q_v, t = dims_.t;
        const Index total = block_rows(i);

        blk.b.setZero(total);
        blk.B.setZero(total, dims_.dense_size());
        blk.Bdot.setZero(total, qu);

        for (Index k = 0; k < n; ++k) {
            const Index r = rows[static_cast<std::size_t>(k)];
            blk.b(k) = inv_sd_ * data_.y(r);
            blk.B.row(k).head(p) = inv_sd_ * data_.z(r).transpose();
            blk.B.row(k).segment(p + data_.time(r) * qv, qv) = inv_sd_ * data_.zv(r).transpose();
            blk.Bdot.row(k) = inv_sd_ * data_.zu(r).transpose();
        }
        Index off = n;
        blk.b.segment(off, p) = beta_rhs_;
        blk.B.block(off, 0, p, p) = share_ * Ubeta_;
        off += p;
        for (Index tau = 0; tau < t; ++tau) blk.B.block(off + tau * qv, p + tau * qv, qv, qv) = share_ * Uv_;
        off += t * qv;
        blk.Bdot.block(off, 0, qu, qu) = Uu_;
    }

private:
    const TrialDataset& data_;
    ModelDims dims_;
    double inv_sd_ = 1.0;
    double share_ = 1.0;
    Eigen::MatrixXd Ubeta_, Uu_, Uv_;
    Eigen::VectorXd beta_rhs_;
    std::vector<std::vector<Index>> rows_;
};

inline TwoLevelBlockInput assemble_blocks(const TrialDataset& data, const VarianceComponents& sigma,
                                          const PriorSpec& prior) {
    const BlockAssembler assembler(data, sigma, prior);
    TwoLevelBlockInput input;
    input.blocks.reserve(static_cast<std::size_t>(assembler.blocks()));
    for (Index i = 0; i < assembler.blocks(); ++i) input.blocks.push_back(assembler.block(i));
    return input;
}

// Map the solver output back to named posterior blocks.
inline PosteriorBlocks extract_posterior(const TwoLevelSolution& sol, const ModelDims& d) {
    const Index p = d.p, qv = d.q_v;
    PosteriorBlocks post;
    post.mu_beta_post = sol.x1.head(p);
    post.Sigma_beta_post = sol.A11.topLeftCorner(p, p);
    post.mu_v.resize(static_cast<std::size_t>(d.t));
    post.Sigma_v_post.resize(static_cast<std::size_t>(d.t));
    post.Cov_beta_v.resize(static_cast<std::size_t>(d.t));
    for (Index tau = 0; tau < d.t; ++tau) {
        const Index off = p + tau * qv;
        const auto k = static_cast<std::size_t>(tau);
        post.mu_v[k] = sol.x1.segment(off, qv);
        post.Sigma_v_post[k] = sol.A11.block(off, off, qv, qv);
        post.Cov_beta_v[k] = sol.A11.block(0, off, p, qv);
    }
    post.log_det_cov = -sol.log_det_normal;
    post.mu_u = sol.x2;
    post.Sigma_u_post = sol.A22;
    post.Cov_beta_u.resize(static_cast<std::size_t>(d.m));
    post.Cov_u_v.resize(static_cast<std::size_t>(d.m));
    for (Index i = 0; i < d.m; ++i) {
        const auto k = static_cast<std::size_t>(i);
        const Eigen::MatrixXd& a12 = sol.A12[k];
        post.Cov_beta_u[k] = a12.topRows(p);
        auto& row = post.Cov_u_v[k];
        row.resize(static_cast<std::size_t>(d.t));
        for (Index tau = 0; tau < d.t; ++tau)
            row[static_cast<std::size_t>(tau)] = a12.block(p + tau * qv, 0, qv, a12.cols()).transpose();
    }
    return post;
}

inline PosteriorBlocks posterior_streamlined(const TrialDataset& data, const VarianceComponents& sigma,
                                             const PriorSpec& prior) {
    const BlockAssembler assembler(data, sigma, prior);
    const TwoLevelSolution sol =
        solve_two_level_streamed(assembler.blocks(), assembler.dense_cols(), assembler.sparse_cols(),
                                 [&](Index i, TwoLevelBlock& blk) { assembler.fill(i, blk); });
    return extract_posterior(sol, data.dims());
}

inline void check_posterior(const TrialDataset& data, const PosteriorBlocks& post) {
    const ModelDims& d = data.dims();
    if (post.users() != d.m || post.times() != d.t || post.mu_beta_post.size() != d.p ||
        post.Sigma_u_post.size() != static_cast<std::size_t>(d.m) ||
        post.Sigma_v_post.size() != static_cast<std::size_t>(d.t) ||
        post.Cov_beta_u.size() != static_cast<std::size_t>(d.m) ||
        post.Cov_beta_v.size() != static_cast<std::size_t>(d.t) ||
        post.Cov_u_v.size() != static_cast<std::size_t>(d.m))
        throw DimensionMismatch("posterior blocks do not match the dataset dimensions");
    for (const auto& row : post.Cov_u_v)
        if (row.size() != static_cast<std::size_t>(d.t))
            throw DimensionMismatch("Cov_u_v must hold one block per (user, time)");
}

// a^T M b without temporaries.
template <class A, class B>
double bilinear(const A& a, const Eigen::MatrixXd& M, const B& b) {
    double acc = 0.0;
    for (Index c = 0; c < M.cols(); ++c) acc += b(c) * a.dot(M.col(c));
    return acc;
}

// Sum over rows of E[(y - z beta - z_u u_i - z_v v_tau)^2] under the posterior:
// squared residual at the posterior mean plus the posterior variance of the
// linear predictor.
inline double expected_squared_residuals(const TrialDataset& data, const PosteriorBlocks& post) {
    check_posterior(data, post);
    double total = 0.0;
    for (Index r = 0; r < data.size(); ++r) {
        const auto i = static_cast<std::size_t>(data.user(r));
        const auto tau = static_cast<std::size_t>(data.time(r));
        const auto z = data.z(r);
        const auto zu = data.zu(r);
        const auto zv = data.zv(r);
        const double resid = data.y(r) - z.dot(post.mu_beta_post) - zu.dot(post.mu_u[i]) - zv.dot(post.mu_v[tau]);
        const double var = bilinear(z, post.Sigma_beta_post, z) + bilinear(zu, post.Sigma_u_post[i], zu) +
                           bilinear(zv, post.Sigma_v_post[tau], zv) +
                           2.0 * (bilinear(z, post.Cov_beta_u[i], zu) + bilinear(z, post.Cov_beta_v[tau], zv) +
                                  bilinear(zu, post.Cov_u_v[i][tau], zv));
        total += resid * resid + var;
    }
    return total;
}

inline double log_det_spd(const Eigen::MatrixXd& S, const std::string& name) {
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success) throw NonSPD(name);
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

// E[log p(Y | theta, sigma2_eps)] under the posterior.
inline double expected_data_loglik(const TrialDataset& data, const VarianceComponents& sigma,
                                   const PosteriorBlocks& post) {
    const double n = static_cast<double>(data.size());
    const double s = expected_squared_residuals(data, post);
    return -0.5 * n * std::log(2.0 * std::numbers::pi * sigma.sigma2_eps) - 0.5 * s / sigma.sigma2_eps;
}

// E[log p(theta | Sigma)] under the posterior: beta prior plus the u and v
// random-effect densities.
inline double expected_prior_loglik(const VarianceComponents& sigma, const PriorSpec& prior,
                                    const PosteriorBlocks& post) {
    constexpr double log2pi = 1.8378770664093454835606594728112;
    auto gaussian_term = [&](const Eigen::MatrixXd& cov, const std::string& name, const Eigen::MatrixXd& second_moment,
                             double count) {
        Eigen::LLT<Eigen::MatrixXd> llt(cov);
        if (llt.info() != Eigen::Success) throw NonSPD(name);
        const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
        const double tr = llt.solve(second_moment).trace();
        return -0.5 * count * (static_cast<double>(cov.rows()) * log2pi + logdet) - 0.5 * tr;
    };

    const Eigen::VectorXd dbeta = post.mu_beta_post - prior.mu_beta;
    double out = gaussian_term(prior.Sigma_beta, "Sigma_beta", dbeta * dbeta.transpose() + post.Sigma_beta_post, 1.0);

    Eigen::MatrixXd su = Eigen::MatrixXd::Zero(sigma.Sigma_u.rows(), sigma.Sigma_u.cols());
    for (std::size_t i = 0; i < post.mu_u.size(); ++i)
        su += post.mu_u[i] * post.mu_u[i].transpose() + post.Sigma_u_post[i];
    out += gaussian_term(sigma.Sigma_u, "Sigma_u", su, static_cast<double>(post.mu_u.size()));

    Eigen::MatrixXd sv = Eigen::MatrixXd::Zero(sigma.Sigma_v.rows(), sigma.Sigma_v.cols());
    for (std::size_t k = 0; k < post.mu_v.size(); ++k)
        sv += post.mu_v[k] * post.mu_v[k].transpose() + post.Sigma_v_post[k];
    out += gaussian_term(sigma.Sigma_v, "Sigma_v", sv, static_cast<double>(post.mu_v.size()));
    return out;
}

// Expected complete-data log-likelihood E[log p(Y|theta,Sigma) + log p(theta|Sigma)]
// with the expectation taken under `post`.
inline double expected_cd_loglik(const TrialDataset& data, const VarianceComponents& sigma, const PriorSpec& prior,
                                 const PosteriorBlocks& post) {
    return expected_data_loglik(data, sigma, post) + expected_prior_loglik(sigma, prior, post);
}

// Differential entropy of the Gaussian posterior of theta.
inline double posterior_entropy(const PosteriorBlocks& post, const ModelDims& d) {
    constexpr double log2pi = 1.8378770664093454835606594728112;
    return 0.5 * static_cast<double>(d.theta_size()) * (1.0 + log2pi) + 0.5 * post.log_det_cov;
}

// Expected complete-data log-likelihood plus the posterior entropy. Equals
// log_marginal_likelihood when `post` is the exact posterior at `sigma` and
// is below it otherwise.
inline double em_objective(const TrialDataset& data, const VarianceComponents& sigma, const PriorSpec& prior,
                           const PosteriorBlocks& post) {
    return expected_cd_loglik(data, sigma, prior, post) + posterior_entropy(post, data.dims());
}

}  // namespace crossed_lmm
