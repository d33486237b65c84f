#pragma once

// Full-matrix reference computations for small instances. Everything here
// materializes objects of side p + m*q_u + t*q_v and is guarded accordingly;
// it exists to check the streamlined path, not to replace it.

#include "crossed_lmm/dataset.hpp"
#include "crossed_lmm/error.hpp"
#include "crossed_lmm/model.hpp"
#include "crossed_lmm/solver.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace crossed_lmm {

inline constexpr Index kDenseGuard = 2000;
inline constexpr Index kDenseObservationGuard = 5000;

inline void check_dense_guard(const ModelDims& d) {
    if (d.theta_size() > kDenseGuard)
        throw TooLarge("full system of side " + std::to_string(d.theta_size()) + " exceeds the dense guard of " +
                       std::to_string(kDenseGuard));
}

// Positions in theta = [beta; u_1..u_m; v_1..v_t].
struct ThetaLayout {
    ModelDims d;
    Index beta(Index k) const { return k; }
    Index u(Index i, Index k = 0) const { return d.p + i * d.q_u + k; }
    Index v(Index tau, Index k = 0) const { return d.p + d.m * d.q_u + tau * d.q_v + k; }
};

// theta = N(mu, (C^T R^{-1} C + D)^{-1}) with the pieces kept explicit.
struct DenseSystem {
    Eigen::MatrixXd C;       // N x (p + m q_u + t q_v)
    Eigen::MatrixXd D;       // prior precision, block diagonal
    Eigen::VectorXd r_diag;  // diagonal of R (all sigma2_eps)
    Eigen::VectorXd o;       // Sigma_beta^{-1} mu_beta, then zeros
    Eigen::VectorXd y;

    Eigen::MatrixXd normal_matrix() const { return C.transpose() * r_diag.cwiseInverse().asDiagonal() * C + D; }
    Eigen::VectorXd normal_rhs() const { return C.transpose() * r_diag.cwiseInverse().asDiagonal() * y + o; }
};

struct NormalEquations {
    Eigen::MatrixXd A;
    Eigen::VectorXd rhs;
};

inline Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& S, const std::string& name) {
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success) throw NonSPD(name);
    return llt.solve(Eigen::MatrixXd::Identity(S.rows(), S.cols()));
}

inline DenseSystem assemble_dense_system(const TrialDataset& data, const VarianceComponents& sigma,
                                         const PriorSpec& prior) {
    const ModelDims& d = data.dims();
    check_groups(d);
    check_dense_guard(d);
    if (data.size() > kDenseObservationGuard)
        throw TooLarge("dense design with " + std::to_string(data.size()) + " rows exceeds the dense guard");
    validate(prior, d.p);
    validate(sigma, d.q_u, d.q_v);
    const ThetaLayout at{d};
    const Index n = data.size(), dim = d.theta_size();

    DenseSystem sys;
    sys.C = Eigen::MatrixXd::Zero(n, dim);
    sys.y = data.y();
    for (Index r = 0; r < n; ++r) {
        sys.C.row(r).segment(at.beta(0), d.p) = data.z(r).transpose();
        sys.C.row(r).segment(at.u(data.user(r)), d.q_u) = data.zu(r).transpose();
        sys.C.row(r).segment(at.v(data.time(r)), d.q_v) = data.zv(r).transpose();
    }
    sys.r_diag = Eigen::VectorXd::Constant(n, sigma.sigma2_eps);
    sys.D = Eigen::MatrixXd::Zero(dim, dim);
    const Eigen::MatrixXd beta_prec = spd_inverse(prior.Sigma_beta, "Sigma_beta");
    const Eigen::MatrixXd u_prec = spd_inverse(sigma.Sigma_u, "Sigma_u");
    const Eigen::MatrixXd v_prec = spd_inverse(sigma.Sigma_v, "Sigma_v");
    sys.D.block(0, 0, d.p, d.p) = beta_prec;
    for (Index i = 0; i < d.m; ++i) sys.D.block(at.u(i), at.u(i), d.q_u, d.q_u) = u_prec;
    for (Index tau = 0; tau < d.t; ++tau) sys.D.block(at.v(tau), at.v(tau), d.q_v, d.q_v) = v_prec;
    sys.o = Eigen::VectorXd::Zero(dim);
    sys.o.head(d.p) = beta_prec * prior.mu_beta;
    return sys;
}

// Normal equations C^T R^{-1} C + D and C^T R^{-1} y + o, accumulated one
// observation at a time (each row touches p + q_u + q_v entries of theta).
inline NormalEquations dense_normal_equations(const TrialDataset& data, const VarianceComponents& sigma,
                                              const PriorSpec& prior) {
    const ModelDims& d = data.dims();
    check_groups(d);
    check_dense_guard(d);
    validate(prior, d.p);
    validate(sigma, d.q_u, d.q_v);
    const ThetaLayout at{d};
    const Index dim = d.theta_size();
    const Index width = d.p + d.q_u + d.q_v;

    NormalEquations ne{Eigen::MatrixXd::Zero(dim, dim), Eigen::VectorXd::Zero(dim)};
    const Eigen::MatrixXd beta_prec = spd_inverse(prior.Sigma_beta, "Sigma_beta");
    const Eigen::MatrixXd u_prec = spd_inverse(sigma.Sigma_u, "Sigma_u");
    const Eigen::MatrixXd v_prec = spd_inverse(sigma.Sigma_v, "Sigma_v");
    ne.A.block(0, 0, d.p, d.p) = beta_prec;
    for (Index i = 0; i < d.m; ++i) ne.A.block(at.u(i), at.u(i), d.q_u, d.q_u) = u_prec;
    for (Index tau = 0; tau < d.t; ++tau) ne.A.block(at.v(tau), at.v(tau), d.q_v, d.q_v) = v_prec;
    ne.rhs.head(d.p) = beta_prec * prior.mu_beta;

    std::vector<Index> idx(static_cast<std::size_t>(width));
    Eigen::VectorXd val(width);
    const double w = 1.0 / sigma.sigma2_eps;
    for (Index r = 0; r < data.size(); ++r) {
        Index k = 0;
        for (Index j = 0; j < d.p; ++j, ++k) idx[static_cast<std::size_t>(k)] = at.beta(j), val(k) = data.z(r)(j);
        for (Index j = 0; j < d.q_u; ++j, ++k)
            idx[static_cast<std::size_t>(k)] = at.u(data.user(r), j), val(k) = data.zu(r)(j);
        for (Index j = 0; j < d.q_v; ++j, ++k)
            idx[static_cast<std::size_t>(k)] = at.v(data.time(r), j), val(k) = data.zv(r)(j);
        for (Index a = 0; a < width; ++a) {
            const Index ia = idx[static_cast<std::size_t>(a)];
            ne.rhs(ia) += w * val(a) * data.y(r);
            for (Index b = 0; b < width; ++b) ne.A(ia, idx[static_cast<std::size_t>(b)]) += w * val(a) * val(b);
        }
    }
    return ne;
}

// Sum of B_i^T B_i over blocks, permuted from the block column order
// [beta; v | u_i] back to [beta; u; v].
inline NormalEquations reconstruct_dense(const TwoLevelBlockInput& input, const ModelDims& d) {
    check_dense_guard(d);
    if (static_cast<Index>(input.blocks.size()) != d.m || input.dense_cols() != d.dense_size() ||
        input.sparse_cols() != d.q_u)
        throw DimensionMismatch("blocks do not match the model dimensions");
    const ThetaLayout at{d};
    const Index P = d.dense_size();
    const Index dim = d.theta_size();
    NormalEquations ne{Eigen::MatrixXd::Zero(dim, dim), Eigen::VectorXd::Zero(dim)};

    std::vector<Index> map(static_cast<std::size_t>(P + d.q_u));
    for (Index i = 0; i < d.m; ++i) {
        const TwoLevelBlock& blk = input.blocks[static_cast<std::size_t>(i)];
        for (Index j = 0; j < P + d.q_u; ++j) {
            Index dst = 0;
            if (j < d.p)
                dst = at.beta(j);
            else if (j < P)
                dst = at.v(0) + (j - d.p);
            else
                dst = at.u(i, j - P);
            map[static_cast<std::size_t>(j)] = dst;
        }
        Eigen::MatrixXd M(blk.b.size(), P + d.q_u);
        M << blk.B, blk.Bdot;
        const Eigen::MatrixXd G = M.transpose() * M;
        const Eigen::VectorXd g = M.transpose() * blk.b;
        for (Index a = 0; a < P + d.q_u; ++a) {
            const Index ia = map[static_cast<std::size_t>(a)];
            ne.rhs(ia) += g(a);
            for (Index b = 0; b < P + d.q_u; ++b) ne.A(ia, map[static_cast<std::size_t>(b)]) += G(a, b);
        }
    }
    return ne;
}

struct DensePosterior {
    Eigen::VectorXd mu;
    Eigen::MatrixXd Sigma;
    double log_det_Sigma = 0.0;
};

inline DensePosterior dense_posterior_full(const TrialDataset& data, const VarianceComponents& sigma,
                                           const PriorSpec& prior) {
    const NormalEquations ne = dense_normal_equations(data, sigma, prior);
    Eigen::LLT<Eigen::MatrixXd> llt(ne.A);
    if (llt.info() != Eigen::Success) throw NonSPD("posterior precision");
    DensePosterior out;
    out.Sigma = llt.solve(Eigen::MatrixXd::Identity(ne.A.rows(), ne.A.cols()));
    out.Sigma = 0.5 * (out.Sigma + out.Sigma.transpose());
    out.mu = llt.solve(ne.rhs);
    out.log_det_Sigma = -2.0 * llt.matrixLLT().diagonal().array().log().sum();
    return out;
}

inline PosteriorBlocks slice_posterior(const DensePosterior& full, const ModelDims& d) {
    const ThetaLayout at{d};
    const Index p = d.p, qu = d.q_u, qv = d.q_v;
    PosteriorBlocks post;
    post.mu_beta_post = full.mu.head(p);
    post.Sigma_beta_post = full.Sigma.topLeftCorner(p, p);
    post.log_det_cov = full.log_det_Sigma;
    for (Index i = 0; i < d.m; ++i) {
        post.mu_u.push_back(full.mu.segment(at.u(i), qu));
        post.Sigma_u_post.push_back(full.Sigma.block(at.u(i), at.u(i), qu, qu));
        post.Cov_beta_u.push_back(full.Sigma.block(0, at.u(i), p, qu));
        std::vector<Eigen::MatrixXd> row;
        row.reserve(static_cast<std::size_t>(d.t));
        for (Index tau = 0; tau < d.t; ++tau) row.push_back(full.Sigma.block(at.u(i), at.v(tau), qu, qv));
        post.Cov_u_v.push_back(std::move(row));
    }
    for (Index tau = 0; tau < d.t; ++tau) {
        post.mu_v.push_back(full.mu.segment(at.v(tau), qv));
        post.Sigma_v_post.push_back(full.Sigma.block(at.v(tau), at.v(tau), qv, qv));
        post.Cov_beta_v.push_back(full.Sigma.block(0, at.v(tau), p, qv));
    }
    return post;
}

inline PosteriorBlocks posterior_dense(const TrialDataset& data, const VarianceComponents& sigma,
                                       const PriorSpec& prior) {
    return slice_posterior(dense_posterior_full(data, sigma, prior), data.dims());
}

// log N(Y; C [mu_beta; 0; 0], C G C^T + sigma2_eps I) with G the prior
// covariance blockdiag(Sigma_beta, I_m (x) Sigma_u, I_t (x) Sigma_v).
inline double log_marginal_likelihood(const TrialDataset& data, const VarianceComponents& sigma,
                                      const PriorSpec& prior) {
    const ModelDims& d = data.dims();
    const DenseSystem sys = assemble_dense_system(data, sigma, prior);
    const ThetaLayout at{d};
    const Index dim = d.theta_size();
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(dim, dim);
    G.topLeftCorner(d.p, d.p) = prior.Sigma_beta;
    for (Index i = 0; i < d.m; ++i) G.block(at.u(i), at.u(i), d.q_u, d.q_u) = sigma.Sigma_u;
    for (Index tau = 0; tau < d.t; ++tau) G.block(at.v(tau), at.v(tau), d.q_v, d.q_v) = sigma.Sigma_v;

    const Index n = data.size();
    Eigen::MatrixXd V = sys.C * G * sys.C.transpose();
    V.diagonal().array() += sigma.sigma2_eps;
    Eigen::VectorXd mean = sys.C.leftCols(d.p) * prior.mu_beta;
    Eigen::LLT<Eigen::MatrixXd> llt(V);
    if (llt.info() != Eigen::Success) throw NonSPD("marginal covariance");
    const Eigen::VectorXd white = llt.matrixL().solve(sys.y - mean);
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    return -0.5 * (static_cast<double>(n) * std::log(2.0 * std::numbers::pi) + logdet + white.squaredNorm());
}

}  // namespace crossed_lmm
