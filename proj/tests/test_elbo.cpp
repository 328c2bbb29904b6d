// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace mcpm;

namespace {

// One-cell, one-task state: M = 1, unit kernel variance.
VariationalState scalar_state(long count, BaselineMode mode = BaselineMode::Mcpm) {
    GridSpec spec{{1}, {{0.0, 1.0}}};
    ModelConfig cfg;
    cfg.M = 1;
    cfg.mode = mode;
    cfg.offsets_init = OffsetInit::Zero;
    return init_state(cfg, make_count_grid(spec, CountMatrix::Constant(1, 1, count)), 0);
}

}  // namespace

TEST(Mgf, AtZeroIsOne) {
    const std::vector<GaussianMoments> w{{0.3, 0.4}, {-1.0, 0.2}}, f{{1.1, 0.7}, {0.2, 0.1}};
    EXPECT_DOUBLE_EQ(mgf_log_intensity(w, f, 0.0), 1.0);
}

TEST(Mgf, DeterministicMomentsGiveExpOfProduct) {
    const std::vector<GaussianMoments> w{{0.3, 0.0}, {-1.0, 0.0}}, f{{1.1, 0.0}, {0.2, 0.0}};
    EXPECT_NEAR(mgf_log_intensity(w, f, 2.0), std::exp(2.0 * (0.33 - 0.2)), 1e-14);
}

TEST(Mgf, HandValue) {
    const std::vector<GaussianMoments> w{{0.5, 0.1}}, f{{1.0, 0.2}};
    EXPECT_NEAR(mgf_log_intensity(w, f, 1.0), 1.8164, 1e-4);
}

TEST(Mgf, DomainBoundaryRaises) {
    const std::vector<GaussianMoments> w{{0.0, 1.0}}, f{{0.0, 1.0}};
    EXPECT_THROW(mgf_log_intensity(w, f, 1.0), MgfDomainError);
}

TEST(KlU, ZeroAtPrior) {
    auto s = scalar_state(0);
    const auto K = chol_jitter(gram(s.latent_kernel(0), s.latents[0].inducing), s.config.base_jitter);
    s.latents[0].u_factor_raw = raw_from_factor(K.lower);
    EXPECT_NEAR(kl_u(s), 0.0, 1e-12);
}

TEST(KlU, ScalarHandValue) {
    auto s = scalar_state(0);
    s.latents[0].u_mean[0] = 1.0;
    s.latents[0].u_factor_raw(0, 0) = 0.5 * std::log(0.5);
    // K_zz carries a relative jitter of 1e-6
    EXPECT_NEAR(kl_u(s), -0.5 * (0.5 + 1.0 - 1.0 - std::log(0.5)), 2e-6);
    EXPECT_NEAR(kl_u(s), -0.59657, 1e-5);
}

TEST(KlU, NonPositiveOverRandomStates) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        EXPECT_LE(kl_u(mcpm::testing::random_instance(seed).state), 0.0);
    }
}

TEST(KlW, ZeroAtPrior) {
    auto s = scalar_state(0);
    s.latents[0].w_mean.setZero();
    s.latents[0].w_log_var.setZero();
    EXPECT_NEAR(kl_w(s), 0.0, 1e-14);
}

TEST(KlW, ScalarHandValue) {
    auto s = scalar_state(0);
    s.latents[0].w_mean[0] = 2.0;
    s.latents[0].w_log_var[0] = std::log(0.5);
    EXPECT_NEAR(kl_w(s), -0.5 * (0.5 + 4.0 - 1.0 - std::log(0.5)), 1e-12);
    EXPECT_NEAR(kl_w(s), -2.0966, 1e-4);
}

TEST(KlW, CoupledWithDiagonalKernelMatchesIndependent) {
    mcpm::testing::RandomInstanceOptions o;
    o.P = 3;
    auto inst = mcpm::testing::random_instance(4, o);
    VariationalState ind = inst.state;
    ind.config.prior_means = MatrixXd::Zero(3, ind.Q());
    ind.config.prior_vars = MatrixXd::Constant(3, ind.Q(), 1.3);
    VariationalState cpl = ind;
    cpl.config.weight_prior = WeightPrior::Coupled;
    // descriptors far apart relative to the lengthscale make K_w = 1.3 I
    cpl.config.task_descriptors = (MatrixXd(3, 1) << 0.0, 100.0, 200.0).finished();
    cpl.config.weight_kernel = KernelSpec::isotropic(KernelFamily::SquaredExponential, 1.3, 1.0, 1);
    for (auto& lat : cpl.latents) {
        lat.w_factor_raw = MatrixXd::Zero(3, 3);
        lat.w_factor_raw.diagonal() = 0.5 * lat.w_log_var;
        lat.w_log_variance = std::log(1.3);
        lat.w_log_lengthscales = VectorXd::Zero(1);
    }
    // Coupled K_w picks up relative jitter; compare against the jittered diagonal.
    for (Index q = 0; q < ind.Q(); ++q) ind.config.prior_vars.col(q).setConstant(1.3 * (1.0 + 1e-6));
    EXPECT_NEAR(kl_w(cpl), kl_w(ind), 1e-10);
}

TEST(Ell, UnitIntensityZeroCount) {
    const auto s = scalar_state(0, BaselineMode::IcmLimit);
    auto st = s;
    st.latents[0].w_mean.setZero();
    const Batch b = make_batch(make_count_grid(GridSpec{{1}, {{0.0, 1.0}}}, CountMatrix::Zero(1, 1)), {0});
    LatentMarginals mom{MatrixXd::Zero(1, 1), MatrixXd::Zero(1, 1)};
    EXPECT_NEAR(ell_closed_form(st, b, mom), -1.0, 1e-14);
}

TEST(Ell, UnitIntensityCountTwo) {
    auto s = scalar_state(2, BaselineMode::IcmLimit);
    s.latents[0].w_mean.setZero();
    const Batch b = make_batch(make_count_grid(GridSpec{{1}, {{0.0, 1.0}}}, CountMatrix::Constant(1, 1, 2)), {0});
    LatentMarginals mom{MatrixXd::Zero(1, 1), MatrixXd::Zero(1, 1)};
    EXPECT_NEAR(ell_closed_form(s, b, mom), -1.0 - std::log(2.0), 1e-12);
}

TEST(Ell, MissingEntriesAreSkipped) {
    auto inst = mcpm::testing::random_instance(12);
    const auto full = full_batch(inst.grid);
    const auto mom = latent_marginals(inst.state, full.centroids);
    const double before = ell_closed_form(inst.state, full, mom);
    CountGrid masked = inst.grid;
    masked.counts(1, 0) += 7;
    masked.observed(1, 0) = false;
    CountGrid ref = inst.grid;
    ref.observed(1, 0) = false;
    const Batch bm = make_batch(masked, full.cells), br = make_batch(ref, full.cells);
    EXPECT_NEAR(ell_closed_form(inst.state, bm, mom), ell_closed_form(inst.state, br, mom), 1e-12);
    EXPECT_NE(before, ell_closed_form(inst.state, br, mom));
}

TEST(MonteCarlo, DeterministicStateIsExact) {
    auto inst = mcpm::testing::random_instance(3, {.mode = BaselineMode::IcmLimit});
    const auto b = full_batch(inst.grid);
    auto mom = latent_marginals(inst.state, b.centroids);
    mom.var.setZero();
    const auto mc = ell_monte_carlo(inst.state, b, mom, 10, 1);
    EXPECT_NEAR(mc.estimate, ell_closed_form(inst.state, b, mom), 1e-9);
    EXPECT_EQ(mc.std_error, 0.0);
}

TEST(MonteCarlo, ErrorShrinksWithSampleCount) {
    auto inst = mcpm::testing::random_instance(5, {.Q = 1, .P = 2});
    const auto b = full_batch(inst.grid);
    const auto mom = latent_marginals(inst.state, b.centroids);
    const double exact = ell_closed_form(inst.state, b, mom);
    const auto small = ell_monte_carlo(inst.state, b, mom, 100, 2);
    const auto large = ell_monte_carlo(inst.state, b, mom, 1000000, 2);
    EXPECT_LT(large.std_error, small.std_error / 50.0);
    EXPECT_LT(std::abs(large.estimate - exact), 4.0 * large.std_error);
}

TEST(MonteCarlo, SeedReproducible) {
    auto inst = mcpm::testing::random_instance(6);
    const auto b = full_batch(inst.grid);
    const auto mom = latent_marginals(inst.state, b.centroids);
    EXPECT_EQ(ell_monte_carlo(inst.state, b, mom, 500, 9).estimate, ell_monte_carlo(inst.state, b, mom, 500, 9).estimate);
}

TEST(Elbo, HalfBatchesAverageToFullBatch) {
    auto inst = mcpm::testing::random_instance(7, {.cells_x = 4, .cells_y = 4, .missing_fraction = 0.0});
    const auto cells = inst.grid.observed_cells();
    const Index total = static_cast<Index>(cells.size());
    const std::vector<Index> a(cells.begin(), cells.begin() + total / 2), b(cells.begin() + total / 2, cells.end());
    const double full = elbo(inst.state, make_batch(inst.grid, cells), total);
    const double halves = 0.5 * (elbo(inst.state, make_batch(inst.grid, a), total) + elbo(inst.state, make_batch(inst.grid, b), total));
    EXPECT_NEAR(full, halves, 1e-9 * std::abs(full));
}

TEST(Elbo, BoundsQuadratureMarginalLikelihood) {
    // y ~ Poisson(exp(w f)), w = 1 fixed, f ~ N(0, 1): log p(y) by quadrature.
    auto s = scalar_state(3, BaselineMode::IcmLimit);
    s.config.prior_means = MatrixXd::Ones(1, 1);
    s.latents[0].w_mean.setOnes();
    const CountGrid grid = make_count_grid(GridSpec{{1}, {{0.0, 1.0}}}, CountMatrix::Constant(1, 1, 3));
    const double y = 3.0;
    double marginal = 0.0;
    const double h = 1e-3;
    for (double f = -10.0; f <= 10.0; f += h) {
        marginal += h * std::exp(-0.5 * f * f) / std::sqrt(2.0 * M_PI) * std::exp(y * f - std::exp(f) - std::lgamma(y + 1.0));
    }
    const double log_marginal = std::log(marginal);
    const Batch b = full_batch(grid);
    for (double m : {-0.5, 0.0, 0.4, 1.0}) {
        for (double sd : {0.2, 0.5, 0.9}) {
            s.latents[0].u_mean[0] = m;
            s.latents[0].u_factor_raw(0, 0) = std::log(sd);
            EXPECT_LE(elbo(s, b, 1), log_marginal + 1e-9) << "m " << m << " sd " << sd;
        }
    }
}
