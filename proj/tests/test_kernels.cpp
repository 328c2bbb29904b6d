// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include <gtest/gtest.h>

#include "mcpm/kernels.hpp"

using namespace mcpm;

namespace {

MatrixXd points(std::initializer_list<std::initializer_list<double>> rows) {
    MatrixXd X(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
    Index r = 0;
    for (const auto& row : rows) {
        Index c = 0;
        for (double v : row) X(r, c++) = v;
        ++r;
    }
    return X;
}

}  // namespace

TEST(Kernel, Matern32AtZeroDistanceIsVariance) {
    const auto k = KernelSpec::isotropic(KernelFamily::Matern32, 2.0, 0.37, 2);
    const VectorXd x = (VectorXd(2) << 0.3, -1.2).finished();
    EXPECT_DOUBLE_EQ(kernel_eval(k, x, x), 2.0);
}

TEST(Kernel, SquaredExponentialHandValue) {
    const auto k = KernelSpec::isotropic(KernelFamily::SquaredExponential, 1.0, 1.0, 2);
    const VectorXd a = VectorXd::Zero(2);
    const VectorXd b = VectorXd::Ones(2);
    EXPECT_NEAR(kernel_eval(k, a, b), std::exp(-1.0), 1e-12);
    EXPECT_NEAR(kernel_eval(k, a, b), 0.367879, 1e-6);
}

TEST(Kernel, Matern32HandValue) {
    const auto k = KernelSpec::isotropic(KernelFamily::Matern32, 1.0, 1.0, 1);
    const VectorXd a = VectorXd::Zero(1);
    const VectorXd b = VectorXd::Ones(1);
    EXPECT_NEAR(kernel_eval(k, a, b), (1.0 + std::sqrt(3.0)) * std::exp(-std::sqrt(3.0)), 1e-12);
    EXPECT_NEAR(kernel_eval(k, a, b), 0.48335, 1e-5);
}

TEST(Kernel, PerDimensionLengthscales) {
    KernelSpec k{KernelFamily::SquaredExponential, 1.5, (VectorXd(2) << 0.5, 2.0).finished()};
    const VectorXd a = (VectorXd(2) << 0.0, 0.0).finished();
    const VectorXd b = (VectorXd(2) << 0.5, 2.0).finished();
    EXPECT_NEAR(kernel_eval(k, a, b), 1.5 * std::exp(-1.0), 1e-12);
}

TEST(Kernel, ValidateRejectsBadHyperparameters) {
    EXPECT_THROW(KernelSpec::isotropic(KernelFamily::Matern32, 0.0, 1.0, 1).validate(), InputError);
    EXPECT_THROW(KernelSpec::isotropic(KernelFamily::Matern32, 1.0, -1.0, 1).validate(), InputError);
    EXPECT_THROW(kernel_family_from_string("rbf-ish"), InputError);
}

TEST(Gram, SinglePointIsVariance) {
    const auto k = KernelSpec::isotropic(KernelFamily::Matern32, 0.7, 1.0, 2);
    const auto G = gram(k, points({{0.1, 0.2}}));
    ASSERT_EQ(G.values.rows(), 1);
    EXPECT_DOUBLE_EQ(G.values(0, 0), 0.7);
}

TEST(Gram, CrossGramIsTransposeOfSwapped) {
    const auto k = KernelSpec::isotropic(KernelFamily::Matern32, 1.3, 0.4, 2);
    const MatrixXd X = points({{0.0, 0.0}, {0.5, 0.1}, {0.9, 0.7}});
    const MatrixXd Y = points({{0.2, 0.3}, {1.0, 1.0}});
    EXPECT_TRUE(gram(k, X, Y).values.isApprox(gram(k, Y, X).values.transpose(), 1e-14));
}

TEST(Gram, MatchesEntrywiseKernel) {
    const auto k = KernelSpec::isotropic(KernelFamily::SquaredExponential, 0.8, 0.6, 2);
    const MatrixXd X = points({{0.0, 0.0}, {0.5, 0.1}, {0.9, 0.7}});
    const MatrixXd G = gram(k, X).values;
    for (Index i = 0; i < 3; ++i)
        for (Index j = 0; j < 3; ++j)
            EXPECT_NEAR(G(i, j), kernel_eval(k, VectorXd(X.row(i).transpose()), VectorXd(X.row(j).transpose())), 1e-14);
}

TEST(Cholesky, IdentityKeepsJitterRecord) {
    const auto c = chol_jitter(MatrixXd(MatrixXd::Identity(3, 3)), 1e-6);
    EXPECT_TRUE(c.lower.isApprox(MatrixXd::Identity(3, 3) * std::sqrt(1.0 + 1e-6), 1e-14));
    EXPECT_DOUBLE_EQ(c.jitter, 1e-6);
}

TEST(Cholesky, ReconstructsPositiveDefinite) {
    const MatrixXd K = (MatrixXd(2, 2) << 2.0, 1.0, 1.0, 2.0).finished();
    const auto c = chol_jitter(K, 1e-12);
    EXPECT_LT((c.lower * c.lower.transpose() - K).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Cholesky, RankDeficientNeedsJitter) {
    const MatrixXd K = MatrixXd::Ones(2, 2);
    const auto c = chol_jitter(K, 1e-10);
    EXPECT_GT(c.jitter, 0.0);
    const MatrixXd diff = c.lower * c.lower.transpose() - K;
    EXPECT_NEAR(diff(0, 0), c.jitter, 1e-12);
    EXPECT_NEAR(diff(1, 1), c.jitter, 1e-9);
    EXPECT_NEAR(diff(0, 1), 0.0, 1e-9);
}

TEST(Cholesky, IndefiniteMatrixFailsAtCap) {
    const MatrixXd K = (MatrixXd(2, 2) << 1.0, 3.0, 3.0, 1.0).finished();
    EXPECT_THROW(chol_jitter(K), FactorizationError);
}

TEST(Cholesky, SolveAndLogDet) {
    const MatrixXd K = (MatrixXd(3, 3) << 4, 1, 0.5, 1, 3, 0.2, 0.5, 0.2, 2).finished();
    const auto c = chol_jitter(K, 1e-14);
    const VectorXd b = (VectorXd(3) << 1.0, -2.0, 0.5).finished();
    EXPECT_TRUE((K * c.solve(b)).isApprox(b, 1e-10));
    EXPECT_NEAR(c.log_det(), std::log(K.determinant()), 1e-10);
}
