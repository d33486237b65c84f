#pragma once

// Two-level sparse least squares.
//
// Minimizes ||b - B x||^2 for
//
//     B = [ B_1  Bdot_1                ]      b = [ b_1 ]
//         [ B_2         Bdot_2         ]          [ b_2 ]
//         [ ...                 ...    ]          [ ... ]
//         [ B_m                 Bdot_m ]          [ b_m ]
//
// where every B_i shares the same p_dense columns and Bdot_i owns its own
// q_sparse columns. x = [x1; x2_1; ...; x2_m]. Besides x, the solver returns
// the blocks of A^{-1} = (B^T B)^{-1} that line up with non-zero blocks of A:
// A11 (dense x dense), A22_i (block i x block i) and A12_i (dense x block i),
// together with log det(B^T B).
//
// Stage 1 factors each Bdot_i independently and rotates [b_i | B_i] into
// its frame. Stage 2 triangularizes the stacked remainders of those products.
// The stacked remainder is never formed: each block's remainder is absorbed
// into a running p_dense x p_dense triangular factor as soon as it is
// produced, so memory is O(p_dense^2 + m * q_sparse * p_dense) whatever the
// block heights.

#include "crossed_lmm/error.hpp"
#include "crossed_lmm/householder.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace crossed_lmm {

using Eigen::Index;

// |r_kk| below this fraction of the largest |r_ii| of the same factor is zero.
inline constexpr double kRankTolerance = 1e-12;

struct TwoLevelBlock {
    Eigen::VectorXd b;     // n_i
    Eigen::MatrixXd B;     // n_i x p_dense
    Eigen::MatrixXd Bdot;  // n_i x q_sparse
};

struct TwoLevelBlockInput {
    std::vector<TwoLevelBlock> blocks;

    Index dense_cols() const { return blocks.empty() ? 0 : blocks.front().B.cols(); }
    Index sparse_cols() const { return blocks.empty() ? 0 : blocks.front().Bdot.cols(); }
};

struct TwoLevelSolution {
    Eigen::VectorXd x1;
    Eigen::MatrixXd A11;
    std::vector<Eigen::VectorXd> x2;
    std::vector<Eigen::MatrixXd> A22;
    std::vector<Eigen::MatrixXd> A12;  // p_dense x q_sparse each
    double log_det_normal = 0.0;        // log det(B^T B)
};

namespace detail {

inline void check_block(const TwoLevelBlock& blk, Index i, Index p_dense, Index q_sparse) {
    const Index n = blk.b.size();
    auto where = [&] { return "block " + std::to_string(i) + ": "; };
    if (blk.B.rows() != n || blk.Bdot.rows() != n)
        throw DimensionMismatch(where() + "b, B and Bdot must have the same number of rows");
    if (blk.B.cols() != p_dense)
        throw DimensionMismatch(where() + "B has " + std::to_string(blk.B.cols()) + " columns, expected " +
                                std::to_string(p_dense));
    if (blk.Bdot.cols() != q_sparse)
        throw DimensionMismatch(where() + "Bdot has " + std::to_string(blk.Bdot.cols()) + " columns, expected " +
                                std::to_string(q_sparse));
    if (n < q_sparse)
        throw DimensionMismatch(where() + "fewer rows than sparse columns");
}

inline double log_abs_diag_sum(const Eigen::MatrixXd& r) { return r.diagonal().cwiseAbs().array().log().sum(); }

inline Eigen::MatrixXd symmetrized(const Eigen::MatrixXd& m) { return 0.5 * (m + m.transpose()); }

struct StageOneFactor {
    Eigen::MatrixXd R;   // q x q upper triangular
    Eigen::VectorXd c1;  // q
    Eigen::MatrixXd C1;  // q x p_dense
};

}  // namespace detail

// Streaming entry point. `source` either returns block i by value
// (`source(i)`) or fills a reused block in place (`source(i, block)`), for
// i = 0..m-1. Each block is requested exactly once, in order, and discarded
// after use, so callers can generate very large problems lazily.
template <class BlockSource>
TwoLevelSolution solve_two_level_streamed(Index m, Index p_dense, Index q_sparse, BlockSource&& source) {
    if (m < 1) throw DimensionMismatch("two-level problem needs at least one block");
    if (p_dense < 0 || q_sparse < 1) throw DimensionMismatch("invalid column group widths");

    Eigen::MatrixXd R = Eigen::MatrixXd::Zero(p_dense, p_dense);
    Eigen::VectorXd c = Eigen::VectorXd::Zero(p_dense);
    std::vector<detail::StageOneFactor> stage1(static_cast<std::size_t>(m));
    Index total_rows = 0;
    double log_det = 0.0;
    TwoLevelBlock blk;
    Eigen::MatrixXd comp_buf;
    householder::AbsorbWorkspace ws;

    for (Index i = 0; i < m; ++i) {
        if constexpr (std::is_invocable_v<BlockSource&, Index, TwoLevelBlock&>)
            source(i, blk);
        else
            blk = source(i);
        detail::check_block(blk, i, p_dense, q_sparse);
        const Index n = blk.b.size();
        total_rows += n;

        if (comp_buf.rows() < n || comp_buf.cols() != 1 + p_dense)
            comp_buf.resize(std::max(n, comp_buf.rows()), 1 + p_dense);
        auto comp = comp_buf.topRows(n);
        comp.col(0) = blk.b;
        comp.rightCols(p_dense) = blk.B;
        householder::qr_in_place(blk.Bdot, comp);

        auto& f = stage1[static_cast<std::size_t>(i)];
        f.R = blk.Bdot.topRows(q_sparse).triangularView<Eigen::Upper>();
        if (householder::first_small_pivot(f.R, kRankTolerance) >= 0)
            throw RankDeficient(i, "block " + std::to_string(i) + ": sparse design is rank deficient");
        log_det += 2.0 * detail::log_abs_diag_sum(f.R);
        f.c1 = comp.col(0).head(q_sparse);
        f.C1 = comp.block(0, 1, q_sparse, p_dense);

        householder::absorb_rows(R, c, comp.bottomRightCorner(n - q_sparse, p_dense),
                                 comp.col(0).tail(n - q_sparse), ws);
    }

    if (total_rows < p_dense + m * q_sparse)
        throw RankDeficient(-1, "fewer rows (" + std::to_string(total_rows) + ") than unknowns (" +
                                    std::to_string(p_dense + m * q_sparse) + ")");
    if (householder::first_small_pivot(R, kRankTolerance) >= 0)
        throw RankDeficient(-1, "dense column group is rank deficient after eliminating the sparse blocks");

    TwoLevelSolution sol;
    sol.log_det_normal = log_det + 2.0 * detail::log_abs_diag_sum(R);
    const auto Ru = R.triangularView<Eigen::Upper>();
    sol.x1 = Ru.solve(c);
    const Eigen::MatrixXd Rinv = Ru.solve(Eigen::MatrixXd::Identity(p_dense, p_dense));
    sol.A11 = detail::symmetrized(Rinv * Rinv.transpose());

    sol.x2.resize(static_cast<std::size_t>(m));
    sol.A22.resize(static_cast<std::size_t>(m));
    sol.A12.resize(static_cast<std::size_t>(m));
    const Eigen::MatrixXd Iq = Eigen::MatrixXd::Identity(q_sparse, q_sparse);
    for (Index i = 0; i < m; ++i) {
        auto& f = stage1[static_cast<std::size_t>(i)];
        const auto Ri = f.R.triangularView<Eigen::Upper>();
        const Eigen::MatrixXd S = Ri.solve(f.C1);  // R_i^{-1} C1_i
        const auto k = static_cast<std::size_t>(i);
        sol.x2[k] = Ri.solve(f.c1 - f.C1 * sol.x1);
        sol.A12[k] = -sol.A11 * S.transpose();
        const Eigen::MatrixXd RiInv = Ri.solve(Iq);
        sol.A22[k] = detail::symmetrized(Ri.solve(RiInv.transpose() - f.C1 * sol.A12[k]));
        f = {};
    }
    return sol;
}

inline TwoLevelSolution solve_two_level(const TwoLevelBlockInput& input) {
    const Index m = static_cast<Index>(input.blocks.size());
    if (m == 0) throw DimensionMismatch("two-level problem needs at least one block");
    return solve_two_level_streamed(m, input.dense_cols(), input.sparse_cols(),
                                    [&](Index i) { return input.blocks[static_cast<std::size_t>(i)]; });
}

}  // namespace crossed_lmm
