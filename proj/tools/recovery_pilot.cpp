#include "crossed_lmm/crossed_lmm.hpp"

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

using namespace crossed_lmm;

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

// Usage: recovery_pilot [m] [reps] [seed]
// Fits the batch simulation with the dense E-step and prints the median
// absolute error of sigma2_eps and the diagonals of Sigma_u and Sigma_v.
int main(int argc, char** argv) {
    const Index m = argc > 1 ? std::atol(argv[1]) : 100;
    const int reps = argc > 2 ? std::atoi(argv[2]) : 50;
    const std::uint64_t seed = argc > 3 ? std::strtoull(argv[3], nullptr, 10) : 2024;

    EmOptions opts;
    opts.e_step_mode = EStepMode::dense;
    opts.max_iter = 1000;
    std::vector<double> e_eps, e_u11, e_u22, e_v11, e_v22;
    int converged = 0;
    for (int rep = 0; rep < reps; ++rep) {
        const BenchRecord r = run_bench_replication(bench_config(m, 30, 5, seed, rep), rep, default_batch_prior(), opts);
        converged += r.converged;
        e_eps.push_back(r.err_sigma2_eps);
        e_u11.push_back(r.err_Sigma_u(0, 0));
        e_u22.push_back(r.err_Sigma_u(1, 1));
        e_v11.push_back(r.err_Sigma_v(0, 0));
        e_v22.push_back(r.err_Sigma_v(1, 1));
    }
    std::cout.precision(6);
    std::cout << "m=" << m << " reps=" << reps << " seed=" << seed << " converged=" << converged << '\n'
              << "sigma2_eps " << median(e_eps) << '\n'
              << "Sigma_u_11 " << median(e_u11) << '\n'
              << "Sigma_u_22 " << median(e_u22) << '\n'
              << "Sigma_v_11 " << median(e_v11) << '\n'
              << "Sigma_v_22 " << median(e_v22) << '\n';
    return converged == reps ? 0 : 2;
}
