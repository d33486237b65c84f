#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace crossed_lmm;
using testutil::random_matrix;

TEST(Householder, QrInPlaceReproducesNormalMatrixAndAppliesQt) {
    std::mt19937_64 g(11);
    const Eigen::MatrixXd a0 = random_matrix(9, 4, g);
    const Eigen::MatrixXd c0 = random_matrix(9, 3, g);
    Eigen::MatrixXd a = a0, c = c0;
    householder::qr_in_place(a, c);

    EXPECT_LT(a.bottomRows(5).cwiseAbs().maxCoeff(), 1e-300);
    EXPECT_LT(a.topRows(4).triangularView<Eigen::StrictlyLower>().toDenseMatrix().cwiseAbs().maxCoeff(), 1e-300);
    const Eigen::MatrixXd R = a.topRows(4);
    EXPECT_LT(testutil::rel_err(R.transpose() * R, a0.transpose() * a0), 1e-13);
    // Q^T is orthogonal: inner products of companions with themselves and
    // with A are preserved.
    EXPECT_LT(testutil::rel_err(c.transpose() * c, c0.transpose() * c0), 1e-13);
    EXPECT_LT(testutil::rel_err(R.transpose() * c.topRows(4), a0.transpose() * c0), 1e-13);
}

TEST(Householder, QrInPlaceLeastSquares) {
    std::mt19937_64 g(12);
    const Eigen::MatrixXd a0 = random_matrix(20, 5, g);
    const Eigen::VectorXd b0 = random_matrix(20, 1, g);
    Eigen::MatrixXd a = a0, b = b0;
    householder::qr_in_place(a, b);
    const Eigen::VectorXd x = a.topRows(5).triangularView<Eigen::Upper>().solve(b.topRows(5));
    const Eigen::VectorXd ref = a0.colPivHouseholderQr().solve(b0);
    EXPECT_LT(testutil::rel_err(x, ref), 1e-12);
}

TEST(Householder, QrInPlaceZeroColumnLeavesZeroPivot) {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(4, 2);
    a.col(1) << 1, 2, 3, 4;
    Eigen::MatrixXd c(4, 0);
    householder::qr_in_place(a, c);
    EXPECT_EQ(a(0, 0), 0.0);
    EXPECT_EQ(householder::first_small_pivot(a.topRows(2), 1e-12), 0);
}

TEST(Householder, AbsorbRowsMatchesStackedFactorization) {
    std::mt19937_64 g(13);
    const Index n = 6;
    Eigen::MatrixXd R = random_matrix(n, n, g).triangularView<Eigen::Upper>();
    Eigen::VectorXd rhs = random_matrix(n, 1, g);
    Eigen::MatrixXd C = random_matrix(10, n, g);
    // Leading zeros in some rows exercise the row ordering.
    C.block(0, 0, 3, 2).setZero();
    C.block(5, 0, 2, 4).setZero();
    const Eigen::VectorXd crhs = random_matrix(10, 1, g);

    Eigen::MatrixXd stacked(n + 10, n);
    stacked << R, C;
    Eigen::VectorXd srhs(n + 10);
    srhs << rhs, crhs;

    householder::AbsorbWorkspace ws;
    householder::absorb_rows(R, rhs, C, crhs, ws);
    EXPECT_LT(R.triangularView<Eigen::StrictlyLower>().toDenseMatrix().cwiseAbs().maxCoeff(), 1e-300);
    EXPECT_LT(testutil::rel_err(R.transpose() * R, stacked.transpose() * stacked), 1e-13);
    EXPECT_LT(testutil::rel_err(R.transpose() * rhs, stacked.transpose() * srhs), 1e-13);
}

TEST(Householder, AbsorbRowsIntoZeroFactorAndRepeatedCalls) {
    std::mt19937_64 g(14);
    const Index n = 4;
    Eigen::MatrixXd R = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
    Eigen::MatrixXd all(0, n);
    Eigen::VectorXd all_rhs(0);
    householder::AbsorbWorkspace ws;
    for (int round = 0; round < 3; ++round) {
        const Eigen::MatrixXd C = random_matrix(3 + round, n, g);
        const Eigen::VectorXd c = random_matrix(3 + round, 1, g);
        householder::absorb_rows(R, rhs, C, c, ws);
        Eigen::MatrixXd grown(all.rows() + C.rows(), n);
        grown << all, C;
        Eigen::VectorXd grown_rhs(all_rhs.size() + c.size());
        grown_rhs << all_rhs, c;
        all = grown;
        all_rhs = grown_rhs;
    }
    const Eigen::VectorXd x = R.triangularView<Eigen::Upper>().solve(rhs);
    EXPECT_LT(testutil::rel_err(x, all.colPivHouseholderQr().solve(all_rhs)), 1e-12);
}

TEST(Householder, FirstSmallPivotIsScaleRelative) {
    Eigen::MatrixXd r = Eigen::MatrixXd::Identity(3, 3);
    EXPECT_EQ(householder::first_small_pivot(r, 1e-12), -1);
    r(1, 1) = 1e-13;
    EXPECT_EQ(householder::first_small_pivot(r, 1e-12), 1);
    r *= 1e-20;  // uniformly tiny but well conditioned
    r(1, 1) = 1e-20;
    EXPECT_EQ(householder::first_small_pivot(r, 1e-12), -1);
    r(2, 2) = 0.0;
    EXPECT_EQ(householder::first_small_pivot(r, 1e-12), 2);
    EXPECT_EQ(householder::first_small_pivot(Eigen::MatrixXd(0, 0), 1e-12), -1);
}
