// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "mcpm/errors.hpp"

namespace mcpm {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class KernelFamily { SquaredExponential, Matern32 };

inline std::string_view to_string(KernelFamily family) {
    return family == KernelFamily::SquaredExponential ? "squared_exponential" : "matern32";
}

inline KernelFamily kernel_family_from_string(std::string_view name) {
    if (name == "squared_exponential" || name == "se" || name == "rbf") return KernelFamily::SquaredExponential;
    if (name == "matern32" || name == "matern") return KernelFamily::Matern32;
    throw InputError("unknown kernel family '" + std::string(name) + "'");
}

/// Stationary covariance function with one lengthscale per input dimension.
struct KernelSpec {
    KernelFamily family = KernelFamily::SquaredExponential;
    double variance = 1.0;
    VectorXd lengthscales = VectorXd::Ones(1);

    [[nodiscard]] Index dim() const { return lengthscales.size(); }

    static KernelSpec isotropic(KernelFamily family, double variance, double lengthscale, Index dim) {
        return KernelSpec{family, variance, VectorXd::Constant(dim, lengthscale)};
    }

    void validate() const {
        if (!(variance > 0.0)) throw InputError("kernel variance must be positive");
        if (lengthscales.size() == 0) throw InputError("kernel needs at least one lengthscale");
        for (Index d = 0; d < lengthscales.size(); ++d) {
            if (!(lengthscales[d] > 0.0)) throw InputError("kernel lengthscales must be positive");
        }
    }
};

namespace detail {

inline constexpr double kSqrt3 = 1.7320508075688772935274463415059;

// Scaled squared distance sum_d ((a_d - b_d) / l_d)^2.
template <class A, class B>
double scaled_sq_dist(const KernelSpec& spec, const A& a, const B& b) {
    double r2 = 0.0;
    for (Index d = 0; d < spec.lengthscales.size(); ++d) {
        const double s = (a[d] - b[d]) / spec.lengthscales[d];
        r2 += s * s;
    }
    return r2;
}

inline double kernel_from_sq_dist(const KernelSpec& spec, double r2) {
    if (spec.family == KernelFamily::SquaredExponential) {
        return spec.variance * std::exp(-0.5 * r2);
    }
    const double sr = kSqrt3 * std::sqrt(r2);
    return spec.variance * (1.0 + sr) * std::exp(-sr);
}

// Common factor h(r) such that dk/dlog(l_d) = h * s_d^2 and dk/dx2_d = h * (x_d - x2_d) / l_d^2.
inline double radial_factor(const KernelSpec& spec, double r2) {
    if (spec.family == KernelFamily::SquaredExponential) {
        return spec.variance * std::exp(-0.5 * r2);
    }
    return 3.0 * spec.variance * std::exp(-kSqrt3 * std::sqrt(r2));
}

}  // namespace detail

template <class A, class B>
double kernel_eval(const KernelSpec& spec, const Eigen::MatrixBase<A>& x, const Eigen::MatrixBase<B>& x2) {
    if (x.size() != spec.dim() || x2.size() != spec.dim()) {
        throw InputError("kernel_eval: input dimension does not match lengthscale count");
    }
    return detail::kernel_from_sq_dist(spec, detail::scaled_sq_dist(spec, x, x2));
}

/// Dense covariance block between the rows of two input sets.
struct GramMatrix {
    MatrixXd values;
    double jitter_applied = 0.0;
};

inline GramMatrix gram(const KernelSpec& spec, const MatrixXd& X, const MatrixXd& X2) {
    if (X.rows() == 0 || X2.rows() == 0) throw InputError("gram: empty input set");
    if (X.cols() != spec.dim() || X2.cols() != spec.dim()) {
        throw InputError("gram: input dimension does not match lengthscale count");
    }
    GramMatrix out;
    out.values.resize(X.rows(), X2.rows());
    for (Index j = 0; j < X2.rows(); ++j) {
        for (Index i = 0; i < X.rows(); ++i) {
            out.values(i, j) = detail::kernel_from_sq_dist(spec, detail::scaled_sq_dist(spec, X.row(i), X2.row(j)));
        }
    }
    return out;
}

inline GramMatrix gram(const KernelSpec& spec, const MatrixXd& X) {
    GramMatrix out = gram(spec, X, X);
    // exact symmetry
    for (Index j = 0; j < out.values.cols(); ++j) {
        for (Index i = j + 1; i < out.values.rows(); ++i) out.values(j, i) = out.values(i, j);
    }
    return out;
}

/// Lower Cholesky factor of K + jitter * I.
struct CholeskyFactor {
    MatrixXd lower;
    double jitter = 0.0;

    [[nodiscard]] Index size() const { return lower.rows(); }

    /// K^{-1} B via two triangular solves.
    [[nodiscard]] MatrixXd solve(const MatrixXd& rhs) const {
        MatrixXd tmp = lower.triangularView<Eigen::Lower>().solve(rhs);
        return lower.transpose().triangularView<Eigen::Upper>().solve(tmp);
    }

    [[nodiscard]] VectorXd solve(const VectorXd& rhs) const {
        VectorXd tmp = lower.triangularView<Eigen::Lower>().solve(rhs);
        return lower.transpose().triangularView<Eigen::Upper>().solve(tmp);
    }

    [[nodiscard]] double log_det() const { return 2.0 * lower.diagonal().array().log().sum(); }

    [[nodiscard]] MatrixXd inverse() const { return solve(MatrixXd(MatrixXd::Identity(size(), size()))); }
};

inline constexpr double kDefaultBaseJitter = 1e-6;
inline constexpr double kJitterCap = 1e-2;

/// Factorizes K + jitter*I where jitter starts at base_jitter * mean(diag(K)) and
/// grows by 10x until the factorization succeeds or the relative cap is passed.
inline CholeskyFactor chol_jitter(const MatrixXd& K, double base_jitter = kDefaultBaseJitter,
                                  double cap = kJitterCap) {
    if (K.rows() != K.cols()) throw InputError("chol_jitter: matrix is not square");
    if (K.rows() == 0) throw InputError("chol_jitter: empty matrix");
    if (!(base_jitter > 0.0)) throw InputError("chol_jitter: base jitter must be positive");
    const double scale = K.diagonal().mean();
    if (!(scale > 0.0) || !std::isfinite(scale)) {
        throw FactorizationError("chol_jitter: matrix diagonal is not positive");
    }
    const Index n = K.rows();
    for (double rel = base_jitter; rel <= cap * (1.0 + 1e-12); rel *= 10.0) {
        const double jitter = rel * scale;
        Eigen::LLT<MatrixXd> llt(K + jitter * MatrixXd::Identity(n, n));
        if (llt.info() == Eigen::Success && llt.matrixL().toDenseMatrix().diagonal().minCoeff() > 0.0) {
            return CholeskyFactor{llt.matrixL(), jitter};
        }
    }
    throw FactorizationError("chol_jitter: factorization failed at jitter cap; matrix is not positive semi-definite");
}

inline CholeskyFactor chol_jitter(const GramMatrix& K, double base_jitter = kDefaultBaseJitter,
                                  double cap = kJitterCap) {
    return chol_jitter(K.values, base_jitter, cap);
}

/// Gradient of a scalar objective with respect to log-space kernel hyperparameters.
struct KernelGradient {
    double log_variance = 0.0;
    VectorXd log_lengthscales;

    explicit KernelGradient(Index dim = 0) : log_lengthscales(VectorXd::Zero(dim)) {}
};

/// Adds sum_ij G_ij dK_ij/dtheta for K = gram(spec, X, X2).
inline void accumulate_hyper_grad(const KernelSpec& spec, const MatrixXd& X, const MatrixXd& X2,
                                  const MatrixXd& G, KernelGradient& out) {
    const Index D = spec.dim();
    for (Index j = 0; j < X2.rows(); ++j) {
        for (Index i = 0; i < X.rows(); ++i) {
            const double g = G(i, j);
            if (g == 0.0) continue;
            const double r2 = detail::scaled_sq_dist(spec, X.row(i), X2.row(j));
            out.log_variance += g * detail::kernel_from_sq_dist(spec, r2);
            const double h = g * detail::radial_factor(spec, r2);
            for (Index d = 0; d < D; ++d) {
                const double s = (X(i, d) - X2(j, d)) / spec.lengthscales[d];
                out.log_lengthscales[d] += h * s * s;
            }
        }
    }
}

/// Adds sum_i G_ij dk(X_i, X2_j)/dX2_j into row j of dX2.
inline void accumulate_input_grad(const KernelSpec& spec, const MatrixXd& X, const MatrixXd& X2,
                                  const MatrixXd& G, MatrixXd& dX2) {
    const Index D = spec.dim();
    for (Index j = 0; j < X2.rows(); ++j) {
        for (Index i = 0; i < X.rows(); ++i) {
            const double g = G(i, j);
            if (g == 0.0) continue;
            const double r2 = detail::scaled_sq_dist(spec, X.row(i), X2.row(j));
            const double h = g * detail::radial_factor(spec, r2);
            for (Index d = 0; d < D; ++d) {
                const double l = spec.lengthscales[d];
                dX2(j, d) += h * (X(i, d) - X2(j, d)) / (l * l);
            }
        }
    }
}

}  // namespace mcpm
