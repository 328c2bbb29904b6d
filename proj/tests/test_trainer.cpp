// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace mcpm;

namespace {

CountGrid ten_cells() {
    Rng rng(4);
    CountMatrix c(10, 1);
    for (Index n = 0; n < 10; ++n) c(n, 0) = poisson_draw(rng, 2.0 + std::sin(0.6 * static_cast<double>(n)));
    return make_count_grid(GridSpec{{10}, {{0.0, 1.0}}}, c);
}

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.M = 4;
    cfg.latent_kernel = KernelSpec::isotropic(KernelFamily::SquaredExponential, 1.0, 0.3, 1);
    return cfg;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParameters) {
    VectorXd x = (VectorXd(3) << 1.0, -2.0, 0.5).finished();
    const VectorXd before = x;
    AdamMoments m(3);
    adam_step(x, VectorXd::Zero(3), m, {});
    EXPECT_EQ(x, before);
}

TEST(Adam, FirstStepIsSignedLearningRate) {
    VectorXd x = VectorXd::Zero(3);
    AdamMoments m(3);
    adam_step(x, (VectorXd(3) << 3.0, -0.02, 1e3).finished(), m, {.learning_rate = 0.05});
    EXPECT_NEAR(x[0], -0.05, 1e-8);
    EXPECT_NEAR(x[1], 0.05, 1e-6);
    EXPECT_NEAR(x[2], -0.05, 1e-8);
}

TEST(Adam, SameGradientsSameTrajectory) {
    VectorXd a = VectorXd::Ones(2), b = VectorXd::Ones(2);
    AdamMoments ma(2), mb(2);
    for (int i = 0; i < 5; ++i) {
        const VectorXd g = (VectorXd(2) << i, 1.0 - i).finished();
        adam_step(a, g, ma, {});
        adam_step(b, g, mb, {});
    }
    EXPECT_EQ(a, b);
    adam_step(b, VectorXd::Ones(2), mb, {});
    EXPECT_NE(a, b);
}

TEST(Adam, ShapeMismatchThrows) {
    VectorXd x = VectorXd::Zero(2);
    AdamMoments m(2);
    EXPECT_THROW(adam_step(x, VectorXd::Zero(3), m, {}), InputError);
}

TEST(Fit, SmallLearningRateIsNearlyMonotone) {
    TrainConfig tc;
    tc.learning_rate = 1e-4;
    tc.epochs = 200;
    tc.convergence_tol = 0.0;
    const auto res = fit(tiny_model(), tc, ten_cells());
    ASSERT_EQ(res.trace.epochs(), 200u);
    int up = 0;
    for (std::size_t e = 1; e < res.trace.epochs(); ++e) up += res.trace.elbo[e] >= res.trace.elbo[e - 1];
    EXPECT_GE(up, static_cast<int>(0.95 * 199));
}

TEST(Fit, SameSeedSameTrace) {
    TrainConfig tc;
    tc.epochs = 30;
    tc.batch_size = 4;
    tc.seed = 12;
    const auto a = fit(tiny_model(), tc, ten_cells());
    const auto b = fit(tiny_model(), tc, ten_cells());
    EXPECT_TRUE(a.trace == b.trace);
    EXPECT_EQ(pack_params(a.state), pack_params(b.state));
}

TEST(Fit, ImprovesOnInitialElbo) {
    TrainConfig tc;
    tc.epochs = 150;
    tc.learning_rate = 0.03;
    const auto res = fit(tiny_model(), tc, ten_cells());
    EXPECT_GT(*std::max_element(res.trace.elbo.begin(), res.trace.elbo.end()), res.trace.initial_elbo);
}

TEST(Fit, UnwhitenedUpdatesStillTrain) {
    TrainConfig tc;
    tc.epochs = 100;
    tc.learning_rate = 0.01;
    tc.whiten_updates = false;
    const auto res = fit(tiny_model(), tc, ten_cells());
    EXPECT_GT(res.trace.elbo.back(), res.trace.initial_elbo);
}

TEST(Fit, SgdOptimizerRuns) {
    TrainConfig tc;
    tc.epochs = 50;
    tc.learning_rate = 1e-3;
    tc.optimizer = Optimizer::Sgd;
    const auto res = fit(tiny_model(), tc, ten_cells());
    EXPECT_EQ(res.trace.epochs(), 50u);
    EXPECT_TRUE(std::isfinite(res.trace.elbo.back()));
}

TEST(Fit, CheckpointHookFiresOnSchedule) {
    TrainConfig tc;
    tc.epochs = 20;
    tc.checkpoint_every = 5;
    std::vector<int> seen;
    fit(tiny_model(), tc, ten_cells(), [&](int epoch, const VariationalState&) { seen.push_back(epoch); });
    EXPECT_EQ(seen, (std::vector<int>{5, 10, 15, 20}));
}

TEST(Fit, RejectsInvalidConfig) {
    TrainConfig tc;
    tc.learning_rate = 0.0;
    EXPECT_THROW(fit(tiny_model(), tc, ten_cells()), InputError);
}

TEST(Trace, CsvHasOneRowPerEpoch) {
    TrainConfig tc;
    tc.epochs = 7;
    const auto res = fit(tiny_model(), tc, ten_cells());
    std::ostringstream out;
    write_trace_csv(out, res.trace);
    std::istringstream in(out.str());
    const auto table = detail::read_csv(in);
    EXPECT_EQ(table.rows.size(), 7u);
    EXPECT_EQ(table.header.front(), "epoch");
}

TEST(Fit, RestartsKeepTheBestScreenedInitialization) {
    TrainConfig tc;
    tc.epochs = 40;
    tc.learning_rate = 0.03;
    tc.restarts = 3;
    tc.restart_epochs = 10;
    const auto a = fit(tiny_model(), tc, ten_cells());
    const auto b = fit(tiny_model(), tc, ten_cells());
    EXPECT_TRUE(a.trace == b.trace);
    EXPECT_GE(a.trace.restart, 0);
    EXPECT_LT(a.trace.restart, 3);
    EXPECT_EQ(a.state.seed, restart_seed(tc.seed, a.trace.restart));
    tc.restarts = 1;
    EXPECT_EQ(fit(tiny_model(), tc, ten_cells()).trace.restart, 0);
    tc.restarts = 0;
    EXPECT_THROW(fit(tiny_model(), tc, ten_cells()), InputError);
}
