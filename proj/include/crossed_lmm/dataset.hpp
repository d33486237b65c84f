#pragma once

// Data and parameter types of the crossed (user x time) linear mixed model
//
//     y = z beta + z_u u_i + z_v v_tau + eps,   eps ~ N(0, sigma2_eps)
//     beta ~ N(mu_beta, Sigma_beta), u_i ~ N(0, Sigma_u), v_tau ~ N(0, Sigma_v).
//
// Users and times are 0-based internally; file formats are 1-based.

#include "crossed_lmm/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace crossed_lmm {

using Eigen::Index;

struct ModelDims {
    Index m = 0;    // users
    Index t = 0;    // time points
    Index p = 0;    // fixed effects
    Index q_u = 0;  // random effects per user
    Index q_v = 0;  // random effects per time

    // Length of theta = [beta; u_1..u_m; v_1..v_t].
    Index theta_size() const { return p + m * q_u + t * q_v; }
    // Width of the dense column group [beta; v_1..v_t] in the block form.
    Index dense_size() const { return p + t * q_v; }

    friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

// Observations in insertion order, feature rows stored contiguously.
class TrialDataset {
public:
    TrialDataset() = default;
    explicit TrialDataset(ModelDims dims) : dims_(dims) {
        if (dims.m < 0 || dims.t < 0 || dims.p < 1 || dims.q_u < 1 || dims.q_v < 1)
            throw DimensionMismatch("dataset needs m, t >= 0 and p, q_u, q_v >= 1");
    }

    const ModelDims& dims() const { return dims_; }
    Index size() const { return static_cast<Index>(y_.size()); }
    bool empty() const { return y_.empty(); }

    void add_row(Index user, Index time, Index rep, double y, const Eigen::Ref<const Eigen::VectorXd>& z,
                 const Eigen::Ref<const Eigen::VectorXd>& zu, const Eigen::Ref<const Eigen::VectorXd>& zv) {
        if (user < 0 || user >= dims_.m)
            throw IndexOutOfRange("user " + std::to_string(user) + " outside 0.." + std::to_string(dims_.m - 1));
        if (time < 0 || time >= dims_.t)
            throw IndexOutOfRange("time " + std::to_string(time) + " outside 0.." + std::to_string(dims_.t - 1));
        if (rep < 0) throw IndexOutOfRange("negative replicate index");
        if (z.size() != dims_.p || zu.size() != dims_.q_u || zv.size() != dims_.q_v)
            throw DimensionMismatch("feature row lengths do not match the dataset dimensions");
        user_.push_back(user);
        time_.push_back(time);
        rep_.push_back(rep);
        y_.push_back(y);
        z_.insert(z_.end(), z.data(), z.data() + z.size());
        zu_.insert(zu_.end(), zu.data(), zu.data() + zu.size());
        zv_.insert(zv_.end(), zv.data(), zv.data() + zv.size());
    }

    // Enlarge the user/time ranges (staggered data keeps growing).
    void grow(Index m, Index t) {
        if (m < dims_.m || t < dims_.t) throw DimensionMismatch("dataset groups can only grow");
        dims_.m = m;
        dims_.t = t;
    }

    void reserve(Index n) {
        const auto un = static_cast<std::size_t>(n);
        user_.reserve(un);
        time_.reserve(un);
        rep_.reserve(un);
        y_.reserve(un);
        z_.reserve(un * static_cast<std::size_t>(dims_.p));
        zu_.reserve(un * static_cast<std::size_t>(dims_.q_u));
        zv_.reserve(un * static_cast<std::size_t>(dims_.q_v));
    }

    Index user(Index r) const { return user_[idx(r)]; }
    Index time(Index r) const { return time_[idx(r)]; }
    Index rep(Index r) const { return rep_[idx(r)]; }
    double y(Index r) const { return y_[idx(r)]; }
    Eigen::Map<const Eigen::VectorXd> z(Index r) const { return {z_.data() + r * dims_.p, dims_.p}; }
    Eigen::Map<const Eigen::VectorXd> zu(Index r) const { return {zu_.data() + r * dims_.q_u, dims_.q_u}; }
    Eigen::Map<const Eigen::VectorXd> zv(Index r) const { return {zv_.data() + r * dims_.q_v, dims_.q_v}; }
    Eigen::Map<const Eigen::VectorXd> y() const { return {y_.data(), size()}; }

    std::vector<std::vector<Index>> rows_by_user() const {
        std::vector<std::vector<Index>> out(static_cast<std::size_t>(dims_.m));
        for (Index r = 0; r < size(); ++r) out[static_cast<std::size_t>(user(r))].push_back(r);
        return out;
    }

    std::vector<Index> rows_per_time() const {
        std::vector<Index> out(static_cast<std::size_t>(dims_.t), 0);
        for (Index r = 0; r < size(); ++r) ++out[static_cast<std::size_t>(time(r))];
        return out;
    }

private:
    static std::size_t idx(Index r) { return static_cast<std::size_t>(r); }

    ModelDims dims_{};
    std::vector<Index> user_, time_, rep_;
    std::vector<double> y_, z_, zu_, zv_;
};

struct PriorSpec {
    Eigen::VectorXd mu_beta;
    Eigen::MatrixXd Sigma_beta;
};

struct VarianceComponents {
    double sigma2_eps = 1.0;
    Eigen::MatrixXd Sigma_u;
    Eigen::MatrixXd Sigma_v;
};

// Posterior mean sub-vectors and the covariance sub-blocks of theta that the
// M-step and the bandit consume. Cov_u_v is indexed [user][time].
struct PosteriorBlocks {
    Eigen::VectorXd mu_beta_post;
    std::vector<Eigen::VectorXd> mu_u;
    std::vector<Eigen::VectorXd> mu_v;
    Eigen::MatrixXd Sigma_beta_post;
    std::vector<Eigen::MatrixXd> Sigma_u_post;
    std::vector<Eigen::MatrixXd> Sigma_v_post;
    std::vector<Eigen::MatrixXd> Cov_beta_u;  // p x q_u
    std::vector<Eigen::MatrixXd> Cov_beta_v;  // p x q_v
    std::vector<std::vector<Eigen::MatrixXd>> Cov_u_v;  // q_u x q_v
    double log_det_cov = 0.0;  // log det of the joint covariance of theta

    Index users() const { return static_cast<Index>(mu_u.size()); }
    Index times() const { return static_cast<Index>(mu_v.size()); }
};

inline bool is_spd(const Eigen::MatrixXd& m) {
    if (m.rows() != m.cols() || m.rows() == 0 || !m.allFinite()) return false;
    const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) return false;
    Eigen::LLT<Eigen::MatrixXd> llt(m);
    return llt.info() == Eigen::Success;
}

inline void validate(const PriorSpec& prior, Index p) {
    if (prior.mu_beta.size() != p || prior.Sigma_beta.rows() != p || prior.Sigma_beta.cols() != p)
        throw DimensionMismatch("prior dimensions do not match p = " + std::to_string(p));
    if (!is_spd(prior.Sigma_beta)) throw NonSPD("Sigma_beta");
}

inline void validate(const VarianceComponents& s, Index q_u, Index q_v) {
    if (s.Sigma_u.rows() != q_u || s.Sigma_u.cols() != q_u || s.Sigma_v.rows() != q_v || s.Sigma_v.cols() != q_v)
        throw DimensionMismatch("variance component dimensions do not match (q_u, q_v)");
    if (!(s.sigma2_eps > 0.0) || !std::isfinite(s.sigma2_eps)) throw NonSPD("sigma2_eps");
    if (!is_spd(s.Sigma_u)) throw NonSPD("Sigma_u");
    if (!is_spd(s.Sigma_v)) throw NonSPD("Sigma_v");
}

}  // namespace crossed_lmm
