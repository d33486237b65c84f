#pragma once

// Householder QR kernels used by the two-level least-squares solver. Neither
// routine forms Q; reflectors are applied to companion columns as they are
// generated.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace crossed_lmm::householder {

using Eigen::Index;

// Factor A (rows >= cols) in place. On return the upper triangle of the
// leading cols x cols block holds R, everything below the diagonal is zero,
// and Q^T has been applied to every column of `companions`.
inline void qr_in_place(Eigen::Ref<Eigen::MatrixXd> a, Eigen::Ref<Eigen::MatrixXd> companions) {
    const Index rows = a.rows();
    const Index cols = a.cols();
    Eigen::VectorXd v;
    Eigen::RowVectorXd w;
    for (Index k = 0; k < cols && k < rows; ++k) {
        const Index len = rows - k;
        auto x = a.col(k).tail(len);
        const double norm = x.norm();
        if (norm == 0.0) continue;  // zero column; R(k,k) stays 0 and the caller flags it
        const double alpha = x(0) >= 0.0 ? -norm : norm;
        v = x;
        v(0) -= alpha;
        const double vtv = v.squaredNorm();
        if (vtv == 0.0) continue;
        const double beta = 2.0 / vtv;

        if (k + 1 < cols) {
            auto trailing = a.block(k, k + 1, len, cols - k - 1);
            w.noalias() = v.transpose() * trailing;
            trailing.noalias() -= (beta * v) * w;
        }
        if (companions.cols() > 0) {
            auto rest = companions.bottomRows(len);
            w.noalias() = v.transpose() * rest;
            rest.noalias() -= (beta * v) * w;
        }
        a(k, k) = alpha;
        x.tail(len - 1).setZero();
    }
}

// Scratch space for absorb_rows, reusable across calls.
struct AbsorbWorkspace {
    Eigen::MatrixXd c;
    Eigen::VectorXd crhs;
    std::vector<Index> lead, order;
    Eigen::RowVectorXd s;
};

// Re-triangularize [R; C] with Householder reflections, where R is square
// upper triangular. R and rhs are updated to the factor and the leading
// entries of Q^T [rhs; crhs]. Rows of C are processed in order of their first
// non-zero column, so a reflector for column j touches only rows that are
// already non-zero there.
inline void absorb_rows(Eigen::Ref<Eigen::MatrixXd> r, Eigen::Ref<Eigen::VectorXd> rhs,
                        const Eigen::Ref<const Eigen::MatrixXd>& c_in, const Eigen::Ref<const Eigen::VectorXd>& crhs_in,
                        AbsorbWorkspace& ws) {
    const Index n = r.cols();
    const Index k = c_in.rows();
    if (k == 0 || n == 0) return;

    ws.lead.resize(static_cast<std::size_t>(k));
    for (Index i = 0; i < k; ++i) {
        Index j = 0;
        while (j < n && c_in(i, j) == 0.0) ++j;
        ws.lead[static_cast<std::size_t>(i)] = j;
    }
    ws.order.resize(static_cast<std::size_t>(k));
    std::iota(ws.order.begin(), ws.order.end(), Index{0});
    std::stable_sort(ws.order.begin(), ws.order.end(), [&](Index x, Index y) {
        return ws.lead[static_cast<std::size_t>(x)] < ws.lead[static_cast<std::size_t>(y)];
    });
    if (ws.c.rows() < k || ws.c.cols() != n) ws.c.resize(std::max(k, ws.c.rows()), n);
    if (ws.crhs.size() < k) ws.crhs.resize(k);
    auto c = ws.c.topRows(k);
    auto crhs = ws.crhs.head(k);
    for (Index i = 0; i < k; ++i) {
        const Index src = ws.order[static_cast<std::size_t>(i)];
        c.row(i) = c_in.row(src);
        crhs(i) = crhs_in(src);
    }
    std::sort(ws.lead.begin(), ws.lead.end());

    Index active = 0;
    for (Index j = 0; j < n; ++j) {
        while (active < k && ws.lead[static_cast<std::size_t>(active)] <= j) ++active;
        if (active == 0) continue;
        auto col = c.col(j).head(active);
        const double csq = col.squaredNorm();
        if (csq == 0.0) continue;
        const double rjj = r(j, j);
        const double norm = std::sqrt(rjj * rjj + csq);
        const double alpha = rjj >= 0.0 ? -norm : norm;
        const double v0 = rjj - alpha;
        const double beta = 2.0 / (v0 * v0 + csq);

        const Index rest = n - j - 1;
        if (rest > 0) {
            auto rrow = r.row(j).tail(rest);
            auto cblk = c.block(0, j + 1, active, rest);
            ws.s.noalias() = col.transpose() * cblk;
            ws.s += v0 * rrow;
            rrow -= (beta * v0) * ws.s;
            cblk.noalias() -= (beta * col) * ws.s;
        }
        auto crh = crhs.head(active);
        const double sr = v0 * rhs(j) + col.dot(crh);
        rhs(j) -= beta * v0 * sr;
        crh -= (beta * sr) * col;

        r(j, j) = alpha;
        col.setZero();
    }
}

// Largest |diagonal| and the index of the first diagonal entry that is
// "zero" relative to it, or -1 when the factor is numerically full rank.
inline Index first_small_pivot(const Eigen::Ref<const Eigen::MatrixXd>& r, double rel_tol) {
    const Index n = std::min(r.rows(), r.cols());
    if (n == 0) return -1;
    const double max_diag = r.diagonal().head(n).cwiseAbs().maxCoeff();
    for (Index i = 0; i < n; ++i) {
        const double d = std::abs(r(i, i));
        if (!(d >= rel_tol * max_diag) || d == 0.0) return i;
    }
    return -1;
}

}  // namespace crossed_lmm::householder
