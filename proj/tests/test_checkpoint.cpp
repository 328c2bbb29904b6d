// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <limits>
#include <sstream>

#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace mcpm;

namespace {

VariationalState round_trip(const VariationalState& s) {
    std::stringstream buf;
    write_checkpoint(buf, s);
    return read_checkpoint(buf);
}

}  // namespace

TEST(Checkpoint, IndependentStateRoundTripsExactly) {
    const auto s = mcpm::testing::random_instance(1).state;
    const auto back = round_trip(s);
    EXPECT_EQ(pack_params(back), pack_params(s));
    EXPECT_EQ(back.seed, s.seed);
    EXPECT_EQ(back.config.Q, s.config.Q);
    EXPECT_EQ(back.config.prior_vars, s.config.prior_vars);
    const auto b = full_batch(mcpm::testing::random_instance(1).grid);
    EXPECT_EQ(elbo(back, b, b.size()), elbo(s, b, b.size()));
}

TEST(Checkpoint, CoupledStateRoundTripsExactly) {
    const auto s = mcpm::testing::random_instance(2, {.weight_prior = WeightPrior::Coupled}).state;
    const auto back = round_trip(s);
    EXPECT_EQ(pack_params(back), pack_params(s));
    EXPECT_EQ(back.config.task_descriptors, s.config.task_descriptors);
    EXPECT_EQ(back.config.weight_prior, WeightPrior::Coupled);
}

TEST(Checkpoint, BaselineModesSurvive) {
    for (auto mode : {BaselineMode::Lgcp, BaselineMode::IcmLimit}) {
        const auto s = mcpm::testing::random_instance(3, {.mode = mode}).state;
        EXPECT_EQ(round_trip(s).config.mode, mode);
    }
}

TEST(Checkpoint, StartsWithMagicHeader) {
    std::stringstream buf;
    write_checkpoint(buf, mcpm::testing::random_instance(4).state);
    std::string first;
    std::getline(buf, first);
    EXPECT_EQ(first, "MCPM1");
}

TEST(Checkpoint, RejectsBadInput) {
    std::stringstream no_magic("{\"format\": \"mcpm-checkpoint\"}");
    EXPECT_THROW(read_checkpoint(no_magic), InputError);
    std::stringstream truncated("MCPM1\n{\"format\": \"mcpm-ch");
    EXPECT_THROW(read_checkpoint(truncated), InputError);
    std::stringstream wrong_format("MCPM1\n{\"format\": \"other\"}");
    EXPECT_THROW(read_checkpoint(wrong_format), InputError);

    Json doc = state_to_json(mcpm::testing::random_instance(5).state);
    doc["offsets"] = Json::array({1.0});
    EXPECT_THROW(state_from_json(doc), InputError);
    EXPECT_THROW(load_checkpoint("/nonexistent/model.ckpt"), InputError);
}

TEST(RunConfig, RoundTripAndUnknownKeys) {
    RunConfig rc;
    rc.model.Q = 3;
    rc.model.mode = BaselineMode::IcmLimit;
    rc.model.latent_kernel = KernelSpec::isotropic(KernelFamily::Matern32, 0.5, 0.25, 2);
    rc.train.epochs = 77;
    rc.train.restarts = 3;
    rc.train.whiten_updates = false;
    const auto back = run_config_from_json(run_config_to_json(rc));
    EXPECT_EQ(back.model.Q, 3);
    EXPECT_EQ(back.model.mode, BaselineMode::IcmLimit);
    EXPECT_EQ(back.model.latent_kernel.family, KernelFamily::Matern32);
    EXPECT_EQ(back.model.latent_kernel.lengthscales, rc.model.latent_kernel.lengthscales);
    EXPECT_EQ(back.train.epochs, 77);
    EXPECT_EQ(back.train.restarts, 3);
    EXPECT_FALSE(back.train.whiten_updates);

    EXPECT_THROW(run_config_from_json(Json{{"train", {{"epochz", 3}}}}), InputError);
    EXPECT_THROW(run_config_from_json(Json{{"train", {{"optimizer", "lbfgs"}}}}), InputError);
}

TEST(Report, NonFiniteAndMissingBecomeNull) {
    EvalReport r;
    r.seed = 9;
    r.fold_id = 2;
    TaskMetrics t;
    t.cells = 0;
    t.rmse = std::numeric_limits<double>::quiet_NaN();
    t.nlpl = std::numeric_limits<double>::quiet_NaN();
    t.ec_in = 0.9;
    r.tasks.push_back(t);
    const Json j = report_to_json(r);
    EXPECT_TRUE(j["tasks"]["0"]["rmse"].is_null());
    EXPECT_TRUE(j["tasks"]["0"]["ec_out"].is_null());
    EXPECT_DOUBLE_EQ(j["tasks"]["0"]["ec_in"].get<double>(), 0.9);
    EXPECT_EQ(j["fold_id"], 2);
    EXPECT_EQ(j["seed"], 9);
}
