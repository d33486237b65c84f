#pragma once

#include "crossed_lmm/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace crossed_lmm {

using Eigen::Index;

inline Eigen::MatrixXd symmetrize(const Eigen::MatrixXd& m) { return 0.5 * (m + m.transpose()); }

// L with L L^T = S for symmetric positive semi-definite S (eigenvalues
// slightly below zero from rounding are clamped). Throws NonSPD when S has a
// clearly negative eigenvalue.
inline Eigen::MatrixXd psd_factor(const Eigen::MatrixXd& S, const std::string& name) {
    if (S.rows() != S.cols()) throw DimensionMismatch(name + " must be square");
    if (S.size() == 0) return S;
    if (!S.allFinite()) throw NonSPD(name);
    const Eigen::MatrixXd sym = symmetrize(S);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
    const Eigen::VectorXd& lam = eig.eigenvalues();
    const double scale = std::max(1.0, lam.cwiseAbs().maxCoeff());
    if (lam.minCoeff() < -1e-10 * scale) throw NonSPD(name);
    return eig.eigenvectors() * lam.cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

template <class Engine>
Eigen::VectorXd standard_normal(Index n, Engine& gen) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Eigen::VectorXd z(n);
    for (Index k = 0; k < n; ++k) z(k) = nd(gen);
    return z;
}

}  // namespace crossed_lmm
