// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

#include "mcpm/kernels.hpp"

namespace mcpm {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; maps (seed, stream) to a well-mixed child seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline double standard_normal(Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    return dist(rng);
}

inline VectorXd standard_normal_vector(Rng& rng, Index n) {
    VectorXd v(n);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (Index i = 0; i < n; ++i) v[i] = dist(rng);
    return v;
}

inline long poisson_draw(Rng& rng, double rate) {
    if (!(rate > 0.0)) return 0;
    std::poisson_distribution<long> dist(rate);
    return dist(rng);
}

/// One draw from N(mean, cov) through a jittered Cholesky factor.
inline VectorXd sample_mvn(Rng& rng, const VectorXd& mean, const MatrixXd& cov) {
    const CholeskyFactor chol = chol_jitter(cov, 1e-8);
    return mean + chol.lower * standard_normal_vector(rng, mean.size());
}

}  // namespace mcpm
