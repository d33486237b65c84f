// Simulate a small crossed study, fit the variance components and print the
// estimates next to the truth.

#include "crossed_lmm/crossed_lmm.hpp"

#include <iostream>

int main() {
    using namespace crossed_lmm;

    BatchSimConfig cfg;
    cfg.m = 20;
    cfg.seed = 7;
    const TrialDataset data = generate_batch(cfg);

    const PriorSpec prior{Eigen::VectorXd::Zero(2), 100.0 * Eigen::MatrixXd::Identity(2, 2)};
    const FitResult fit = fit_em(data, prior, EmOptions{});

    const Eigen::IOFormat fmt(4, 0, ", ", "\n", "  [", "]");
    std::cout << "rows: " << data.size() << ", EM iterations: " << fit.iterations
              << (fit.converged ? " (converged)" : " (not converged)") << "\n\n";
    std::cout << "sigma2_eps  estimate " << fit.sigma_hat.sigma2_eps << ", truth " << cfg.true_sigma2_eps << "\n";
    std::cout << "Sigma_u estimate\n" << fit.sigma_hat.Sigma_u.format(fmt) << "\ntruth\n"
              << cfg.true_Sigma_u.format(fmt) << "\n";
    std::cout << "Sigma_v estimate\n" << fit.sigma_hat.Sigma_v.format(fmt) << "\ntruth\n"
              << cfg.true_Sigma_v.format(fmt) << "\n";
    std::cout << "posterior mean of beta " << fit.posterior.mu_beta_post.transpose().format(fmt) << "\n";
    return 0;
}
