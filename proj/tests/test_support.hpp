// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "mcpm/mcpm.hpp"

namespace mcpm::testing {

struct RandomInstanceOptions {
    int Q = 2;
    int P = 3;
    int M = 4;
    int cells_x = 4;
    int cells_y = 3;
    WeightPrior weight_prior = WeightPrior::Independent;
    BaselineMode mode = BaselineMode::Mcpm;
    KernelFamily family = KernelFamily::SquaredExponential;
    bool learn_inducing = false;
    double missing_fraction = 0.1;
};

struct RandomInstance {
    VariationalState state;
    CountGrid grid;
    Batch batch;
};

inline double uniform(Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(rng);
}

/// Small model with every parameter perturbed away from its initial value.
inline RandomInstance random_instance(std::uint64_t seed, const RandomInstanceOptions& o = {}) {
    Rng rng(seed);
    GridSpec spec{{o.cells_x, o.cells_y}, {{0.0, 1.0}, {0.0, 1.0}}};
    CountMatrix counts(spec.num_cells(), o.P);
    for (Index n = 0; n < counts.rows(); ++n)
        for (Index p = 0; p < counts.cols(); ++p) counts(n, p) = poisson_draw(rng, uniform(rng, 0.5, 4.0));
    CountGrid grid = make_count_grid(spec, counts);
    for (Index n = 0; n < grid.num_cells(); ++n)
        for (Index p = 0; p < grid.num_tasks(); ++p)
            if (uniform(rng, 0.0, 1.0) < o.missing_fraction) grid.observed(n, p) = false;
    grid.observed.row(0).setConstant(true);

    ModelConfig cfg;
    cfg.Q = o.Q;
    cfg.P = o.P;
    cfg.M = o.M;
    cfg.mode = o.mode;
    cfg.weight_prior = o.weight_prior;
    cfg.learn_inducing = o.learn_inducing;
    cfg.latent_kernel = KernelSpec::isotropic(o.family, 1.0, 1.0, 2);
    if (o.weight_prior == WeightPrior::Coupled) {
        cfg.task_descriptors = MatrixXd(o.P, 2);
        for (Index p = 0; p < o.P; ++p) {
            cfg.task_descriptors(p, 0) = uniform(rng, -1.0, 1.0);
            cfg.task_descriptors(p, 1) = uniform(rng, -1.0, 1.0);
        }
        cfg.weight_kernel = KernelSpec::isotropic(KernelFamily::SquaredExponential, 1.0, 1.0, 2);
    } else {
        cfg.P = o.P;
        cfg.Q = o.mode == BaselineMode::Lgcp ? o.P : o.Q;
        cfg.prior_means = MatrixXd(o.P, cfg.Q);
        cfg.prior_vars = MatrixXd(o.P, cfg.Q);
        for (Index i = 0; i < cfg.prior_means.size(); ++i) {
            cfg.prior_means(i) = uniform(rng, -0.3, 0.3);
            cfg.prior_vars(i) = uniform(rng, 0.5, 1.5);
        }
    }
    VariationalState st = init_state(cfg, grid, seed + 17);
    for (auto& lat : st.latents) {
        lat.log_variance = uniform(rng, -0.5, 0.3);
        for (Index d = 0; d < lat.log_lengthscales.size(); ++d) lat.log_lengthscales[d] = uniform(rng, -1.0, 0.0);
        for (Index i = 0; i < lat.inducing.size(); ++i) lat.inducing(i) += uniform(rng, -0.05, 0.05);
        for (Index i = 0; i < lat.u_mean.size(); ++i) lat.u_mean[i] = uniform(rng, -0.8, 0.8);
        for (Index j = 0; j < lat.u_factor_raw.cols(); ++j) {
            lat.u_factor_raw(j, j) = std::log(uniform(rng, 0.2, 0.6));
            for (Index i = j + 1; i < lat.u_factor_raw.rows(); ++i) lat.u_factor_raw(i, j) = uniform(rng, -0.2, 0.2);
        }
        if (st.config.trainable_weight_means())
            for (Index p = 0; p < lat.w_mean.size(); ++p) lat.w_mean[p] = uniform(rng, -0.8, 0.8);
        for (Index p = 0; p < lat.w_log_var.size(); ++p) lat.w_log_var[p] = std::log(uniform(rng, 0.05, 0.3));
        if (lat.w_factor_raw.size()) {
            for (Index j = 0; j < lat.w_factor_raw.cols(); ++j) {
                lat.w_factor_raw(j, j) = std::log(uniform(rng, 0.2, 0.45));
                for (Index i = j + 1; i < lat.w_factor_raw.rows(); ++i) lat.w_factor_raw(i, j) = uniform(rng, -0.15, 0.15);
            }
            lat.w_log_variance = uniform(rng, -0.3, 0.3);
            for (Index d = 0; d < lat.w_log_lengthscales.size(); ++d) lat.w_log_lengthscales[d] = uniform(rng, -0.3, 0.3);
        }
    }
    for (Index p = 0; p < st.offsets.size(); ++p) st.offsets[p] = uniform(rng, -0.5, 1.0);
    RandomInstance inst{st, grid, full_batch(grid)};
    return inst;
}

struct FiniteDifferenceReport {
    Index coordinates = 0;
    Index failures = 0;
    double worst_rel = 0.0;
    double worst_abs = 0.0;
};

/// Central differences of elbo() against the analytic gradient; a coordinate
/// passes when |g - fd| <= abs_floor or |g - fd| / max(|g|, |fd|) <= rel_tol.
inline FiniteDifferenceReport check_gradient(const VariationalState& state, const Batch& batch, Index total_observed,
                                             double step = 1e-5, double rel_tol = 1e-4, double abs_floor = 1e-7) {
    const VectorXd g = grad_elbo(state, batch, total_observed);
    const VectorXd theta = pack_params(state);
    VariationalState probe = state;
    FiniteDifferenceReport rep;
    rep.coordinates = theta.size();
    for (Index i = 0; i < theta.size(); ++i) {
        VectorXd t = theta;
        t[i] = theta[i] + step;
        unpack_params(t, probe);
        const double fp = elbo(probe, batch, total_observed);
        t[i] = theta[i] - step;
        unpack_params(t, probe);
        const double fm = elbo(probe, batch, total_observed);
        const double fd = (fp - fm) / (2.0 * step);
        const double abs_err = std::abs(g[i] - fd);
        const double rel_err = abs_err / std::max({std::abs(g[i]), std::abs(fd), 1e-300});
        const bool ok = abs_err <= abs_floor || rel_err <= rel_tol;
        if (!ok) {
            ++rep.failures;
            rep.worst_rel = std::max(rep.worst_rel, rel_err);
            rep.worst_abs = std::max(rep.worst_abs, abs_err);
        }
    }
    return rep;
}

}  // namespace mcpm::testing
