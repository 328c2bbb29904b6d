// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "mcpm/elbo.hpp"
#include "mcpm/kernels.hpp"
#include "mcpm/model.hpp"

namespace mcpm {

/// Visits every trainable scalar of a state in a fixed order. The same order is
/// used for parameter vectors, gradients and optimizer moments.
template <class StateT, class Fn>
void for_each_param(StateT& s, Fn&& fn) {
    static_assert(std::is_same_v<std::remove_const_t<StateT>, VariationalState>);
    const auto& cfg = s.config;
    for (Index p = 0; p < s.offsets.size(); ++p) fn(s.offsets[p]);
    for (auto& lat : s.latents) {
        fn(lat.log_variance);
        for (Index d = 0; d < lat.log_lengthscales.size(); ++d) fn(lat.log_lengthscales[d]);
        if (cfg.learn_inducing) {
            for (Index j = 0; j < lat.inducing.cols(); ++j)
                for (Index i = 0; i < lat.inducing.rows(); ++i) fn(lat.inducing(i, j));
        }
        for (Index i = 0; i < lat.u_mean.size(); ++i) fn(lat.u_mean[i]);
        for (Index j = 0; j < lat.u_factor_raw.cols(); ++j)
            for (Index i = j; i < lat.u_factor_raw.rows(); ++i) fn(lat.u_factor_raw(i, j));
        if (cfg.trainable_weight_means()) {
            for (Index p = 0; p < lat.w_mean.size(); ++p) fn(lat.w_mean[p]);
        }
        if (cfg.stochastic_weights()) {
            if (cfg.weight_prior == WeightPrior::Independent) {
                for (Index p = 0; p < lat.w_log_var.size(); ++p) fn(lat.w_log_var[p]);
            } else {
                for (Index j = 0; j < lat.w_factor_raw.cols(); ++j)
                    for (Index i = j; i < lat.w_factor_raw.rows(); ++i) fn(lat.w_factor_raw(i, j));
                fn(lat.w_log_variance);
                for (Index d = 0; d < lat.w_log_lengthscales.size(); ++d) fn(lat.w_log_lengthscales[d]);
            }
        }
    }
}

inline Index param_count(const VariationalState& s) {
    Index n = 0;
    for_each_param(s, [&](const double&) { ++n; });
    return n;
}

inline VectorXd pack_params(const VariationalState& s) {
    VectorXd v(param_count(s));
    Index i = 0;
    for_each_param(s, [&](const double& x) { v[i++] = x; });
    return v;
}

inline void unpack_params(const VectorXd& v, VariationalState& s) {
    if (v.size() != param_count(s)) throw InputError("parameter vector length does not match state layout");
    Index i = 0;
    for_each_param(s, [&](double& x) { x = v[i++]; });
}

/// A state with the same shapes and every entry set to zero; used as a gradient buffer.
inline VariationalState zeros_like(const VariationalState& s) {
    VariationalState z = s;
    z.offsets.setZero();
    for (auto& lat : z.latents) {
        lat.log_variance = 0.0;
        lat.log_lengthscales.setZero();
        lat.inducing.setZero();
        lat.u_mean.setZero();
        lat.u_factor_raw.setZero();
        lat.w_mean.setZero();
        lat.w_log_var.setZero();
        lat.w_factor_raw.setZero();
        lat.w_log_variance = 0.0;
        lat.w_log_lengthscales.setZero();
    }
    return z;
}

namespace detail {

// Chain rule from dF/dL (lower triangle) to the raw parameterization with log diagonal.
inline void add_factor_grad(const MatrixXd& L, const MatrixXd& dL, MatrixXd& out) {
    for (Index j = 0; j < L.cols(); ++j) {
        out(j, j) += dL(j, j) * L(j, j);
        for (Index i = j + 1; i < L.rows(); ++i) out(i, j) += dL(i, j);
    }
}

// Gradient of -KL(N(m, L L^T) || N(0, K)) w.r.t. m, L, and the entries of K.
struct NegKlGrad {
    VectorXd dm;
    MatrixXd dL;
    MatrixXd dK;
};

inline NegKlGrad neg_kl_grad(const CholeskyFactor& K, const VectorXd& m, const MatrixXd& L) {
    NegKlGrad g;
    const MatrixXd Kinv = K.inverse();
    const VectorXd Kim = Kinv * m;
    g.dm = -Kim;
    g.dL = -Kinv * L;
    for (Index i = 0; i < L.rows(); ++i) g.dL(i, i) += 1.0 / L(i, i);
    const MatrixXd KiL = Kinv * L;
    g.dK = 0.5 * (KiL * KiL.transpose() + Kim * Kim.transpose() - Kinv);
    return g;
}

// Maps a gradient on K_zz + jitter I (jitter proportional to the kernel variance)
// to log-hyperparameters and, optionally, inducing inputs.
inline void backprop_gram_self(const KernelSpec& k, const MatrixXd& Z, const CholeskyFactor& chol, const MatrixXd& dK,
                               double& d_log_var, VectorXd& d_log_len, MatrixXd* dZ) {
    KernelGradient kg(k.dim());
    accumulate_hyper_grad(k, Z, Z, dK, kg);
    d_log_var += kg.log_variance + chol.jitter * dK.trace();
    d_log_len += kg.log_lengthscales;
    if (dZ) accumulate_input_grad(k, Z, Z, dK + dK.transpose(), *dZ);
}

}  // namespace detail

struct ElboGradient {
    ElboTerms value;
    VariationalState grad;  // same layout as the state; only trainable entries are meaningful

    [[nodiscard]] VectorXd packed() const { return pack_params(grad); }
};

/// ELBO value and gradient over all unconstrained parameters. The KL and ELL
/// parts can be switched off to isolate either contribution.
inline ElboGradient value_and_gradient(const VariationalState& state, const Batch& batch, Index total_observed,
                                       bool include_kl = true, bool include_ell = true) {
    const auto& cfg = state.config;
    const Index Q = state.Q(), P = state.P(), B = batch.size();
    if (include_ell && B == 0) throw InputError("gradient: empty batch");
    ElboGradient out{ElboTerms{}, zeros_like(state)};
    auto& G = out.grad;
    const bool learn_z = cfg.learn_inducing;

    std::vector<LatentProjection> proj;
    std::vector<MatrixXd> dKzz(static_cast<std::size_t>(Q));
    for (Index q = 0; q < Q; ++q) {
        const auto& s = state.latents[static_cast<std::size_t>(q)];
        if (include_ell) {
            proj.push_back(project_latent(state, q, batch.centroids));
        } else {
            LatentProjection pr;
            pr.kernel = state.latent_kernel(q);
            pr.Kzz = chol_jitter(gram(pr.kernel, s.inducing), cfg.base_jitter);
            proj.push_back(std::move(pr));
        }
        dKzz[static_cast<std::size_t>(q)] = MatrixXd::Zero(s.inducing.rows(), s.inducing.rows());
    }

    // KL(q(u) || p(u))
    if (include_kl) {
        for (Index q = 0; q < Q; ++q) {
            const auto& s = state.latents[static_cast<std::size_t>(q)];
            auto& g = G.latents[static_cast<std::size_t>(q)];
            const auto& pr = proj[static_cast<std::size_t>(q)];
            const MatrixXd L = factor_from_raw(s.u_factor_raw);
            out.value.kl_u += detail::neg_kl_gaussian(pr.Kzz, s.u_mean, L);
            const auto kg = detail::neg_kl_grad(pr.Kzz, s.u_mean, L);
            g.u_mean += kg.dm;
            detail::add_factor_grad(L, kg.dL.triangularView<Eigen::Lower>(), g.u_factor_raw);
            dKzz[static_cast<std::size_t>(q)] += kg.dK;
        }
        // KL(q(W) || p(W))
        if (cfg.stochastic_weights()) {
            for (Index q = 0; q < Q; ++q) {
                const auto& s = state.latents[static_cast<std::size_t>(q)];
                auto& g = G.latents[static_cast<std::size_t>(q)];
                if (cfg.weight_prior == WeightPrior::Independent) {
                    for (Index p = 0; p < P; ++p) {
                        const double kappa = cfg.prior_vars(p, q);
                        const double diff = s.w_mean[p] - cfg.prior_means(p, q);
                        const double omega = std::exp(s.w_log_var[p]);
                        out.value.kl_w += -0.5 * (kLog2Pi + std::log(kappa) + diff * diff / kappa) -
                                          omega / (2.0 * kappa) + 0.5 * (kLog2Pi + s.w_log_var[p] + 1.0);
                        g.w_mean[p] += -diff / kappa;
                        g.w_log_var[p] += 0.5 - 0.5 * omega / kappa;
                    }
                } else {
                    const KernelSpec kw = state.weight_kernel(q);
                    const CholeskyFactor Kw = chol_jitter(gram(kw, cfg.task_descriptors), cfg.base_jitter);
                    const MatrixXd Lw = factor_from_raw(s.w_factor_raw);
                    out.value.kl_w += detail::neg_kl_gaussian(Kw, s.w_mean, Lw);
                    const auto kg = detail::neg_kl_grad(Kw, s.w_mean, Lw);
                    g.w_mean += kg.dm;
                    detail::add_factor_grad(Lw, kg.dL.triangularView<Eigen::Lower>(), g.w_factor_raw);
                    detail::backprop_gram_self(kw, cfg.task_descriptors, Kw, kg.dK, g.w_log_variance,
                                               g.w_log_lengthscales, nullptr);
                }
            }
        }
    }

    if (include_ell) {
        const double scale = static_cast<double>(total_observed) / static_cast<double>(B);
        const MatrixXd Wm = state.weight_means();
        const MatrixXd Wv = state.weight_vars();
        MatrixXd g_mu = MatrixXd::Zero(B, Q), g_var = MatrixXd::Zero(B, Q);
        MatrixXd g_wm = MatrixXd::Zero(P, Q), g_wv = MatrixXd::Zero(P, Q);
        VectorXd g_phi = VectorXd::Zero(P);
        std::vector<LogMgfPartials> parts(static_cast<std::size_t>(Q));
        double ell = 0.0;
        for (Index i = 0; i < B; ++i) {
            for (Index p = 0; p < P; ++p) {
                if (!batch.observed(i, p)) continue;
                const double y = static_cast<double>(batch.counts(i, p));
                double log_mgf = 0.0, mean_term = 0.0;
                for (Index q = 0; q < Q; ++q) {
                    const auto& pr = proj[static_cast<std::size_t>(q)];
                    const GaussianMoments f{pr.mean[i], std::max(pr.var[i], 0.0)};
                    try {
                        parts[static_cast<std::size_t>(q)] =
                            log_mgf_factor_partials({Wm(p, q), Wv(p, q)}, f, 1.0, static_cast<long>(q));
                    } catch (const MgfDomainError& e) {
                        throw e.with_context(static_cast<long>(batch.cells[static_cast<std::size_t>(i)]),
                                             static_cast<long>(p));
                    }
                    log_mgf += parts[static_cast<std::size_t>(q)].value;
                    mean_term += Wm(p, q) * pr.mean[i];
                }
                const double phi = state.offsets[p];
                const double E = std::exp(phi + log_mgf);
                ell += -E + y * (mean_term + phi) - std::lgamma(y + 1.0);
                g_phi[p] += y - E;
                for (Index q = 0; q < Q; ++q) {
                    const auto& pt = parts[static_cast<std::size_t>(q)];
                    const double mu = proj[static_cast<std::size_t>(q)].mean[i];
                    g_mu(i, q) += -E * pt.d_f_mean + y * Wm(p, q);
                    g_var(i, q) += -E * pt.d_f_var;
                    g_wm(p, q) += -E * pt.d_w_mean + y * mu;
                    g_wv(p, q) += -E * pt.d_w_var;
                }
            }
        }
        out.value.ell = scale * ell;
        g_mu *= scale;
        g_var *= scale;
        g_wm *= scale;
        g_wv *= scale;
        G.offsets += scale * g_phi;

        for (Index q = 0; q < Q; ++q) {
            const auto& s = state.latents[static_cast<std::size_t>(q)];
            auto& g = G.latents[static_cast<std::size_t>(q)];
            const auto& pr = proj[static_cast<std::size_t>(q)];
            const VectorXd gm = g_mu.col(q);
            const VectorXd gv = g_var.col(q);
            const MatrixXd L = factor_from_raw(s.u_factor_raw);

            g.u_mean += pr.A.transpose() * gm;
            const MatrixXd dS = pr.A.transpose() * gv.asDiagonal() * pr.A;
            const MatrixXd dL = 2.0 * dS * L;
            detail::add_factor_grad(L, dL.triangularView<Eigen::Lower>(), g.u_factor_raw);

            const MatrixXd AS = pr.AL * L.transpose();
            const MatrixXd dA = gm * s.u_mean.transpose() - gv.asDiagonal() * pr.Kxz + 2.0 * gv.asDiagonal() * AS;
            const MatrixXd dA_Kinv = pr.Kzz.solve(MatrixXd(dA.transpose())).transpose();
            const MatrixXd dKxz = dA_Kinv - gv.asDiagonal() * pr.A;
            // A = K_xz K_zz^{-1}  =>  dK_zz = -A^T dA K_zz^{-1}
            dKzz[static_cast<std::size_t>(q)] += -(pr.A.transpose() * dA_Kinv);

            KernelGradient kg(pr.kernel.dim());
            accumulate_hyper_grad(pr.kernel, batch.centroids, s.inducing, dKxz, kg);
            g.log_variance += kg.log_variance + gv.sum() * pr.kernel.variance;
            g.log_lengthscales += kg.log_lengthscales;
            if (learn_z) accumulate_input_grad(pr.kernel, batch.centroids, s.inducing, dKxz, g.inducing);

            if (cfg.trainable_weight_means()) g.w_mean += g_wm.col(q);
            if (cfg.stochastic_weights()) {
                if (cfg.weight_prior == WeightPrior::Independent) {
                    g.w_log_var += (g_wv.col(q).array() * s.w_log_var.array().exp()).matrix();
                } else {
                    const MatrixXd Lw = factor_from_raw(s.w_factor_raw);
                    const MatrixXd dLw = 2.0 * g_wv.col(q).asDiagonal() * Lw;
                    detail::add_factor_grad(Lw, dLw, g.w_factor_raw);
                }
            }
        }
    }

    for (Index q = 0; q < Q; ++q) {
        const auto& s = state.latents[static_cast<std::size_t>(q)];
        auto& g = G.latents[static_cast<std::size_t>(q)];
        const auto& pr = proj[static_cast<std::size_t>(q)];
        detail::backprop_gram_self(pr.kernel, s.inducing, pr.Kzz, dKzz[static_cast<std::size_t>(q)], g.log_variance,
                                   g.log_lengthscales, learn_z ? &g.inducing : nullptr);
    }
    out.value.total = out.value.kl_u + out.value.kl_w + out.value.ell;
    return out;
}

/// d(ELBO)/d(eta) packed in for_each_param order.
inline VectorXd grad_elbo(const VariationalState& state, const Batch& batch, Index total_observed) {
    return value_and_gradient(state, batch, total_observed).packed();
}

inline VectorXd grad_kl(const VariationalState& state) {
    return value_and_gradient(state, Batch{}, 0, true, false).packed();
}

}  // namespace mcpm
