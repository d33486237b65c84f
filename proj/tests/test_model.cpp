#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace crossed_lmm;
using testutil::rel_err;

namespace {

PriorSpec identity_prior(Index p) { return {Eigen::VectorXd::Zero(p), Eigen::MatrixXd::Identity(p, p)}; }

VarianceComponents unit_components(Index qu, Index qv) {
    return {1.0, Eigen::MatrixXd::Identity(qu, qu), Eigen::MatrixXd::Identity(qv, qv)};
}

// Design matrix C in [beta; u; v] order, built independently of the library.
Eigen::MatrixXd design_matrix(const TrialDataset& data) {
    const ModelDims& d = data.dims();
    Eigen::MatrixXd C = Eigen::MatrixXd::Zero(data.size(), d.theta_size());
    for (Index r = 0; r < data.size(); ++r) {
        C.block(r, 0, 1, d.p) = data.z(r).transpose();
        C.block(r, d.p + data.user(r) * d.q_u, 1, d.q_u) = data.zu(r).transpose();
        C.block(r, d.p + d.m * d.q_u + data.time(r) * d.q_v, 1, d.q_v) = data.zv(r).transpose();
    }
    return C;
}

Eigen::MatrixXd block_diag_prior_cov(const ModelDims& d, const VarianceComponents& s, const PriorSpec& prior) {
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(d.theta_size(), d.theta_size());
    G.topLeftCorner(d.p, d.p) = prior.Sigma_beta;
    for (Index i = 0; i < d.m; ++i) G.block(d.p + i * d.q_u, d.p + i * d.q_u, d.q_u, d.q_u) = s.Sigma_u;
    for (Index k = 0; k < d.t; ++k) {
        const Index o = d.p + d.m * d.q_u + k * d.q_v;
        G.block(o, o, d.q_v, d.q_v) = s.Sigma_v;
    }
    return G;
}

TrialDataset zero_design_dataset(const ModelDims& d, std::mt19937_64& g) {
    TrialDataset data(d);
    std::normal_distribution<double> nd;
    for (Index i = 0; i < d.m; ++i)
        for (Index k = 0; k < d.t; ++k)
            data.add_row(i, k, 0, nd(g), Eigen::VectorXd::Zero(d.p), Eigen::VectorXd::Zero(d.q_u),
                         Eigen::VectorXd::Zero(d.q_v));
    return data;
}

double log_mvn(const Eigen::VectorXd& x, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    const Eigen::VectorXd w = llt.matrixL().solve(x - mean);
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    return -0.5 * (static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi) + logdet + w.squaredNorm());
}

}  // namespace

TEST(Dataset, RejectsOutOfRangeAndWrongLengths) {
    TrialDataset data(ModelDims{2, 3, 1, 1, 1});
    const Eigen::VectorXd one = Eigen::VectorXd::Ones(1);
    EXPECT_THROW(data.add_row(2, 0, 0, 0.0, one, one, one), IndexOutOfRange);
    EXPECT_THROW(data.add_row(0, 3, 0, 0.0, one, one, one), IndexOutOfRange);
    EXPECT_THROW(data.add_row(0, 0, -1, 0.0, one, one, one), IndexOutOfRange);
    EXPECT_THROW(data.add_row(0, 0, 0, 0.0, Eigen::VectorXd::Ones(2), one, one), DimensionMismatch);
    EXPECT_THROW(TrialDataset(ModelDims{1, 1, 0, 1, 1}), DimensionMismatch);
    data.add_row(1, 2, 0, 1.5, one, one, one);
    EXPECT_EQ(data.size(), 1);
    EXPECT_THROW(data.grow(1, 3), DimensionMismatch);
}

TEST(AssembleBlocks, RowCountsFollowBlockLayout) {
    BatchSimConfig cfg;
    cfg.m = 3;
    cfg.n = 1;
    auto data = generate_batch(cfg);
    const PriorSpec prior = identity_prior(2);
    const VarianceComponents s{cfg.true_sigma2_eps, cfg.true_Sigma_u, cfg.true_Sigma_v};
    auto in = assemble_blocks(data, s, prior);
    ASSERT_EQ(in.blocks.size(), 3u);
    for (const auto& b : in.blocks) {
        EXPECT_EQ(b.b.size(), 94);
        EXPECT_EQ(b.B.cols(), 2 + 30 * 2);
        EXPECT_EQ(b.Bdot.cols(), 2);
    }
    cfg.n = 5;
    data = generate_batch(cfg);
    in = assemble_blocks(data, s, prior);
    for (const auto& b : in.blocks) EXPECT_EQ(b.b.size(), 214);
}

TEST(AssembleBlocks, IdentityPriorsGiveScaledIdentityPriorRows) {
    std::mt19937_64 g(1);
    const ModelDims d{4, 3, 2, 2, 2};
    const auto data = testutil::random_dataset(d, 2, g);
    const auto in = assemble_blocks(data, unit_components(2, 2), identity_prior(2));
    const auto rows = data.rows_by_user();
    for (Index i = 0; i < d.m; ++i) {
        const auto& b = in.blocks[static_cast<std::size_t>(i)];
        const Index n = static_cast<Index>(rows[static_cast<std::size_t>(i)].size());
        const Index prior_rows = d.p + d.t * d.q_v;
        EXPECT_EQ(b.b.segment(n, prior_rows + d.q_u).cwiseAbs().maxCoeff(), 0.0);
        EXPECT_LT(rel_err(b.B.block(n, 0, prior_rows, prior_rows),
                          Eigen::MatrixXd::Identity(prior_rows, prior_rows) / std::sqrt(4.0)),
                  1e-15);
        EXPECT_LT(rel_err(b.Bdot.bottomRows(d.q_u), Eigen::MatrixXd::Identity(2, 2)), 1e-15);
        EXPECT_EQ(b.Bdot.block(n, 0, prior_rows, d.q_u).cwiseAbs().maxCoeff(), 0.0);
    }
}

TEST(AssembleBlocks, NonSpdComponentsAreRejected) {
    std::mt19937_64 g(2);
    const ModelDims d{2, 2, 1, 2, 1};
    const auto data = testutil::random_dataset(d, 2, g);
    VarianceComponents s = unit_components(2, 1);
    s.Sigma_u(1, 1) = -1.0;
    EXPECT_THROW(assemble_blocks(data, s, identity_prior(1)), NonSPD);
    s = unit_components(2, 1);
    s.sigma2_eps = 0.0;
    EXPECT_THROW(assemble_blocks(data, s, identity_prior(1)), NonSPD);
    PriorSpec bad = identity_prior(1);
    bad.Sigma_beta(0, 0) = 0.0;
    EXPECT_THROW(assemble_blocks(data, unit_components(2, 1), bad), NonSPD);
}

TEST(ReconstructDense, MatchesDirectNormalEquations) {
    std::mt19937_64 g(3);
    for (int trial = 0; trial < 20; ++trial) {
        const ModelDims d{testutil::uniform_int(1, 6, g), testutil::uniform_int(1, 5, g), testutil::uniform_int(1, 3, g),
                          testutil::uniform_int(1, 3, g), testutil::uniform_int(1, 3, g)};
        const auto data = testutil::random_dataset(d, 3, g);
        const auto s = testutil::random_components(d, g);
        const auto prior = testutil::random_prior(d, g);
        const auto rec = reconstruct_dense(assemble_blocks(data, s, prior), d);
        const auto direct = dense_normal_equations(data, s, prior);
        const auto sys = assemble_dense_system(data, s, prior);
        EXPECT_LT(rel_err(rec.A, direct.A), 1e-10);
        EXPECT_LT(rel_err(rec.rhs, direct.rhs), 1e-10);
        EXPECT_LT(rel_err(sys.normal_matrix(), direct.A), 1e-10);
        EXPECT_LT(rel_err(sys.normal_rhs(), direct.rhs), 1e-10);
        EXPECT_EQ(rec.A.rows(), d.p + d.m * d.q_u + d.t * d.q_v);
        EXPECT_LT(rel_err(rec.A, rec.A.transpose()), 1e-14);
    }
}

TEST(ReconstructDense, SparsityPatternHasNoCrossUserOrCrossTimeBlocks) {
    std::mt19937_64 g(4);
    const ModelDims d{4, 3, 2, 2, 2};
    const auto data = testutil::random_dataset(d, 2, g, 1.0);
    const auto rec = reconstruct_dense(assemble_blocks(data, testutil::random_components(d, g), identity_prior(2)), d);
    const ThetaLayout at{d};
    for (Index i = 0; i < d.m; ++i)
        for (Index j = 0; j < d.m; ++j)
            if (i != j) EXPECT_LT(rec.A.block(at.u(i), at.u(j), 2, 2).cwiseAbs().maxCoeff(), 1e-12);
    for (Index a = 0; a < d.t; ++a)
        for (Index b = 0; b < d.t; ++b)
            if (a != b) EXPECT_LT(rec.A.block(at.v(a), at.v(b), 2, 2).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ReconstructDense, ScalarHandExpansion) {
    TrialDataset data(ModelDims{1, 1, 1, 1, 1});
    const Eigen::VectorXd one = Eigen::VectorXd::Ones(1);
    data.add_row(0, 0, 0, 0.0, one, one, one);
    const auto rec = reconstruct_dense(assemble_blocks(data, unit_components(1, 1), identity_prior(1)), data.dims());
    const Eigen::Matrix3d expected = (Eigen::Matrix3d() << 2, 1, 1, 1, 2, 1, 1, 1, 2).finished();
    EXPECT_LT(rel_err(rec.A, expected), 1e-14);
}

TEST(ReconstructDense, ZeroDesignsGivePriorPrecisionExactlyOnce) {
    std::mt19937_64 g(5);
    const ModelDims d{5, 3, 2, 2, 1};
    const auto data = zero_design_dataset(d, g);
    const auto s = testutil::random_components(d, g);
    const auto prior = testutil::random_prior(d, g);
    const auto rec = reconstruct_dense(assemble_blocks(data, s, prior), d);
    const auto sys = assemble_dense_system(data, s, prior);
    EXPECT_LT(rel_err(rec.A, sys.D), 1e-12);
    EXPECT_LT(rel_err(rec.rhs, sys.o), 1e-12);
    EXPECT_LT(rel_err(sys.D.topLeftCorner(2, 2), prior.Sigma_beta.inverse()), 1e-12);
}

TEST(ReconstructDense, GuardAndShapeErrors) {
    std::mt19937_64 g(6);
    const ModelDims d{2, 2, 1, 1, 1};
    const auto data = testutil::random_dataset(d, 1, g);
    const auto in = assemble_blocks(data, unit_components(1, 1), identity_prior(1));
    EXPECT_THROW(reconstruct_dense(in, ModelDims{3, 2, 1, 1, 1}), DimensionMismatch);
    EXPECT_THROW(reconstruct_dense(in, ModelDims{2000, 2, 1, 1, 1}), TooLarge);
    TrialDataset big(ModelDims{2000, 1, 1, 1, 1});
    EXPECT_THROW(posterior_dense(big, unit_components(1, 1), identity_prior(1)), TooLarge);
}

TEST(PosteriorDense, ZeroDesignsReturnThePrior) {
    std::mt19937_64 g(7);
    const ModelDims d{3, 2, 2, 2, 2};
    const auto data = zero_design_dataset(d, g);
    const auto s = testutil::random_components(d, g);
    const auto prior = testutil::random_prior(d, g);
    for (const auto& post : {posterior_dense(data, s, prior), posterior_streamlined(data, s, prior)}) {
        EXPECT_LT(rel_err(post.mu_beta_post, prior.mu_beta), 1e-10);
        EXPECT_LT(rel_err(post.Sigma_beta_post, prior.Sigma_beta), 1e-10);
        for (Index i = 0; i < d.m; ++i) {
            EXPECT_LT(post.mu_u[static_cast<std::size_t>(i)].cwiseAbs().maxCoeff(), 1e-12);
            EXPECT_LT(rel_err(post.Sigma_u_post[static_cast<std::size_t>(i)], s.Sigma_u), 1e-10);
            EXPECT_LT(post.Cov_beta_u[static_cast<std::size_t>(i)].cwiseAbs().maxCoeff(), 1e-12);
        }
        for (Index k = 0; k < d.t; ++k) EXPECT_LT(rel_err(post.Sigma_v_post[static_cast<std::size_t>(k)], s.Sigma_v), 1e-10);
    }
}

TEST(PosteriorDense, MatchesCovarianceFormConjugacy) {
    std::mt19937_64 g(8);
    const ModelDims d{2, 2, 1, 1, 1};
    const auto data = testutil::random_dataset(d, 2, g, 1.0);
    const auto s = testutil::random_components(d, g);
    const auto prior = testutil::random_prior(d, g);

    const Eigen::MatrixXd C = design_matrix(data);
    const Eigen::MatrixXd G = block_diag_prior_cov(d, s, prior);
    Eigen::VectorXd m0 = Eigen::VectorXd::Zero(d.theta_size());
    m0.head(d.p) = prior.mu_beta;
    Eigen::MatrixXd S = C * G * C.transpose();
    S.diagonal().array() += s.sigma2_eps;
    const Eigen::MatrixXd K = G * C.transpose() * S.inverse();
    const Eigen::VectorXd mu = m0 + K * (data.y() - C * m0);
    const Eigen::MatrixXd cov = G - K * C * G;

    const auto full = dense_posterior_full(data, s, prior);
    EXPECT_LT(testutil::abs_err(full.mu, mu), 1e-10);
    EXPECT_LT(testutil::abs_err(full.Sigma, cov), 1e-10);
    EXPECT_EQ(full.Sigma.rows(), d.p + d.m * d.q_u + d.t * d.q_v);
}

TEST(PosteriorStreamlined, EqualsDenseOnRandomInstances) {
    std::mt19937_64 g(9);
    for (int trial = 0; trial < 40; ++trial) {
        const ModelDims d{testutil::uniform_int(1, 12, g), testutil::uniform_int(1, 8, g), testutil::uniform_int(1, 3, g),
                          testutil::uniform_int(1, 3, g), testutil::uniform_int(1, 3, g)};
        if (d.theta_size() > 200) continue;
        const auto data = testutil::random_dataset(d, 3, g);
        const auto s = testutil::random_components(d, g);
        const auto prior = testutil::random_prior(d, g);
        SCOPED_TRACE("trial " + std::to_string(trial));
        EXPECT_LT(testutil::posterior_rel_err(posterior_streamlined(data, s, prior), posterior_dense(data, s, prior)),
                  1e-8);
    }
}

TEST(PosteriorStreamlined, UsersWithoutRowsShrinkToThePrior) {
    std::mt19937_64 g(10);
    TrialDataset data(ModelDims{3, 2, 1, 1, 1});
    const Eigen::VectorXd one = Eigen::VectorXd::Ones(1);
    data.add_row(0, 0, 0, 1.0, one, one, one);
    data.add_row(0, 1, 0, 2.0, one, one, one);
    data.add_row(1, 1, 0, 0.5, one, one, one);
    const auto s = testutil::random_components(data.dims(), g);
    const auto post = posterior_streamlined(data, s, identity_prior(1));
    const auto dense = posterior_dense(data, s, identity_prior(1));
    EXPECT_LT(rel_err(post.mu_beta_post, dense.mu_beta_post), 1e-8);
    EXPECT_LT(rel_err(post.Sigma_beta_post, dense.Sigma_beta_post), 1e-8);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_LT(testutil::abs_err(post.mu_u[i], dense.mu_u[i]), 1e-10);
        EXPECT_LT(testutil::abs_err(post.Sigma_u_post[i], dense.Sigma_u_post[i]), 1e-10);
        EXPECT_LT(testutil::abs_err(post.Cov_beta_u[i], dense.Cov_beta_u[i]), 1e-10);
    }
    EXPECT_NEAR(post.mu_u[2](0), 0.0, 1e-12);
    EXPECT_NEAR(post.Sigma_u_post[2](0, 0), s.Sigma_u(0, 0), 1e-12);
}

TEST(PosteriorStreamlined, BatchStudyScaleRuns) {
    BatchSimConfig cfg;
    cfg.m = 100;
    cfg.seed = 3;
    const auto data = generate_batch(cfg);
    ASSERT_EQ(data.size(), 15000);
    const VarianceComponents s{cfg.true_sigma2_eps, cfg.true_Sigma_u, cfg.true_Sigma_v};
    const auto post = posterior_streamlined(data, s, identity_prior(2));
    EXPECT_EQ(post.users(), 100);
    EXPECT_EQ(post.times(), 30);
    EXPECT_TRUE(is_spd(post.Sigma_beta_post));
    for (const auto& c : post.Sigma_u_post) EXPECT_TRUE(is_spd(c));
    EXPECT_THROW(log_marginal_likelihood(data, s, identity_prior(2)), TooLarge);
}

TEST(PosteriorStreamlined, RequiresGroups) {
    TrialDataset data(ModelDims{0, 0, 1, 1, 1});
    EXPECT_THROW(posterior_streamlined(data, unit_components(1, 1), identity_prior(1)), DimensionMismatch);
}

TEST(PosteriorStreamlined, DuplicatedRowsContractBetaPosterior) {
    std::mt19937_64 g(11);
    for (int trial = 0; trial < 10; ++trial) {
        const ModelDims d{4, 3, 2, 2, 1};
        const auto data = testutil::random_dataset(d, 2, g);
        TrialDataset twice(d);
        for (int copy = 0; copy < 2; ++copy)
            for (Index r = 0; r < data.size(); ++r)
                twice.add_row(data.user(r), data.time(r), data.rep(r), data.y(r), data.z(r), data.zu(r), data.zv(r));
        const auto s = testutil::random_components(d, g);
        const auto prior = testutil::random_prior(d, g);
        EXPECT_LE(posterior_streamlined(twice, s, prior).Sigma_beta_post.trace(),
                  posterior_streamlined(data, s, prior).Sigma_beta_post.trace() + 1e-12);
    }
}

TEST(PosteriorStreamlined, LogDeterminantMatchesDense) {
    std::mt19937_64 g(16);
    for (int trial = 0; trial < 10; ++trial) {
        const ModelDims d{testutil::uniform_int(1, 8, g), testutil::uniform_int(1, 6, g), testutil::uniform_int(1, 3, g),
                          testutil::uniform_int(1, 2, g), testutil::uniform_int(1, 2, g)};
        const auto data = testutil::random_dataset(d, 3, g);
        const auto s = testutil::random_components(d, g);
        const auto prior = testutil::random_prior(d, g);
        const Eigen::LLT<Eigen::MatrixXd> llt(dense_posterior_full(data, s, prior).Sigma);
        const double expected = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
        EXPECT_NEAR(posterior_streamlined(data, s, prior).log_det_cov, expected, 1e-9 * std::max(1.0, std::abs(expected)));
        EXPECT_NEAR(posterior_dense(data, s, prior).log_det_cov, expected, 1e-9 * std::max(1.0, std::abs(expected)));
    }
}

TEST(EmObjective, EqualsMarginalLikelihoodAtTheExactPosterior) {
    std::mt19937_64 g(17);
    for (int trial = 0; trial < 10; ++trial) {
        const ModelDims d{testutil::uniform_int(1, 6, g), testutil::uniform_int(1, 5, g), testutil::uniform_int(1, 2, g),
                          testutil::uniform_int(1, 2, g), testutil::uniform_int(1, 2, g)};
        const auto data = testutil::random_dataset(d, 3, g);
        const auto s = testutil::random_components(d, g);
        const auto prior = testutil::random_prior(d, g);
        const double ml = log_marginal_likelihood(data, s, prior);
        EXPECT_NEAR(em_objective(data, s, prior, posterior_streamlined(data, s, prior)), ml, 1e-8 * std::abs(ml));
        const auto other = posterior_streamlined(data, testutil::random_components(d, g), prior);
        EXPECT_LE(em_objective(data, s, prior, other), ml + 1e-9);
    }
}

TEST(MarginalLikelihood, ScalarAnalyticValue) {
    TrialDataset data(ModelDims{1, 1, 1, 1, 1});
    const Eigen::VectorXd one = Eigen::VectorXd::Ones(1);
    data.add_row(0, 0, 0, 0.0, one, one, one);
    EXPECT_NEAR(log_marginal_likelihood(data, unit_components(1, 1), identity_prior(1)),
                -0.5 * std::log(8.0 * std::numbers::pi), 1e-14);
}

TEST(MarginalLikelihood, MatchesDirectDensity) {
    std::mt19937_64 g(12);
    const ModelDims d{3, 2, 2, 1, 2};
    const auto data = testutil::random_dataset(d, 2, g);
    const auto s = testutil::random_components(d, g);
    const auto prior = testutil::random_prior(d, g);
    const Eigen::MatrixXd C = design_matrix(data);
    Eigen::MatrixXd V = C * block_diag_prior_cov(d, s, prior) * C.transpose();
    V.diagonal().array() += s.sigma2_eps;
    const Eigen::VectorXd mean = C.leftCols(d.p) * prior.mu_beta;
    EXPECT_NEAR(log_marginal_likelihood(data, s, prior), log_mvn(data.y(), mean, V), 1e-9);
}

TEST(MarginalLikelihood, InvariantToUserRelabeling) {
    std::mt19937_64 g(13);
    const ModelDims d{4, 3, 1, 2, 1};
    const auto data = testutil::random_dataset(d, 2, g);
    const std::vector<Index> perm{2, 0, 3, 1};
    TrialDataset relabeled(d);
    for (Index r = 0; r < data.size(); ++r)
        relabeled.add_row(perm[static_cast<std::size_t>(data.user(r))], data.time(r), data.rep(r), data.y(r), data.z(r),
                          data.zu(r), data.zv(r));
    const auto s = testutil::random_components(d, g);
    const auto prior = testutil::random_prior(d, g);
    EXPECT_NEAR(log_marginal_likelihood(data, s, prior), log_marginal_likelihood(relabeled, s, prior), 1e-9);
}

TEST(ExpectedCdLoglik, PerfectFitDegenerateDataTerm) {
    const ModelDims d{2, 2, 1, 1, 1};
    TrialDataset data(d);
    const Eigen::VectorXd one = Eigen::VectorXd::Ones(1);
    PosteriorBlocks post = prior_posterior(d, unit_components(1, 1), identity_prior(1));
    post.mu_beta_post << 0.5;
    post.mu_u = {Eigen::VectorXd::Constant(1, 0.1), Eigen::VectorXd::Constant(1, -0.2)};
    post.mu_v = {Eigen::VectorXd::Constant(1, 0.3), Eigen::VectorXd::Constant(1, 0.0)};
    auto zero_all = [](std::vector<Eigen::MatrixXd>& v) {
        for (auto& m : v) m.setZero();
    };
    post.Sigma_beta_post.setZero();
    zero_all(post.Sigma_u_post);
    zero_all(post.Sigma_v_post);
    zero_all(post.Cov_beta_u);
    zero_all(post.Cov_beta_v);
    for (auto& row : post.Cov_u_v) zero_all(row);
    for (Index i = 0; i < 2; ++i)
        for (Index k = 0; k < 2; ++k) {
            const double y = 0.5 + post.mu_u[static_cast<std::size_t>(i)](0) + post.mu_v[static_cast<std::size_t>(k)](0);
            data.add_row(i, k, 0, y, one, one, one);
        }
    EXPECT_NEAR(expected_data_loglik(data, unit_components(1, 1), post), -2.0 * std::log(2.0 * std::numbers::pi), 1e-13);
    EXPECT_NEAR(expected_squared_residuals(data, post), 0.0, 1e-28);
}

TEST(ExpectedCdLoglik, MatchesMonteCarloAverage) {
    std::mt19937_64 g(14);
    const ModelDims d{2, 2, 1, 1, 1};
    const auto data = testutil::random_dataset(d, 2, g, 1.0);
    const auto s = testutil::random_components(d, g);
    const auto prior = testutil::random_prior(d, g);
    const auto full = dense_posterior_full(data, s, prior);
    const auto post = slice_posterior(full, d);
    const double exact = expected_cd_loglik(data, s, prior, post);

    const Eigen::MatrixXd C = design_matrix(data);
    const Eigen::MatrixXd G = block_diag_prior_cov(d, s, prior);
    const Eigen::LLT<Eigen::MatrixXd> prior_llt(G);
    const double prior_logdet = 2.0 * prior_llt.matrixLLT().diagonal().array().log().sum();
    Eigen::VectorXd m0 = Eigen::VectorXd::Zero(d.theta_size());
    m0.head(d.p) = prior.mu_beta;
    const Eigen::MatrixXd L = Eigen::LLT<Eigen::MatrixXd>(full.Sigma).matrixL();
    const double n = static_cast<double>(data.size());
    const double dim = static_cast<double>(d.theta_size());
    const double log2pi = std::log(2.0 * std::numbers::pi);

    const int draws = 1000000;
    double sum = 0.0, sum_sq = 0.0;
    std::normal_distribution<double> nd;
    Eigen::VectorXd xi(d.theta_size());
    for (int k = 0; k < draws; ++k) {
        for (Index j = 0; j < xi.size(); ++j) xi(j) = nd(g);
        const Eigen::VectorXd theta = full.mu + L * xi;
        const double data_term =
            -0.5 * n * std::log(2.0 * std::numbers::pi * s.sigma2_eps) - 0.5 * (data.y() - C * theta).squaredNorm() / s.sigma2_eps;
        const Eigen::VectorXd w = prior_llt.matrixL().solve(theta - m0);
        const double prior_term = -0.5 * (dim * log2pi + prior_logdet + w.squaredNorm());
        const double v = data_term + prior_term;
        sum += v;
        sum_sq += v * v;
    }
    const double mean = sum / draws;
    const double se = std::sqrt((sum_sq / draws - mean * mean) / draws);
    EXPECT_LT(std::abs(mean - exact), 3.0 * se) << "exact " << exact << " mc " << mean << " se " << se;
}

TEST(ExpectedCdLoglik, RejectsInconsistentPosterior) {
    std::mt19937_64 g(15);
    const ModelDims d{2, 2, 1, 1, 1};
    const auto data = testutil::random_dataset(d, 1, g);
    auto post = prior_posterior(ModelDims{3, 2, 1, 1, 1}, unit_components(1, 1), identity_prior(1));
    EXPECT_THROW(expected_cd_loglik(data, unit_components(1, 1), identity_prior(1), post), DimensionMismatch);
}
