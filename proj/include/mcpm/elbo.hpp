// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "mcpm/data.hpp"
#include "mcpm/errors.hpp"
#include "mcpm/kernels.hpp"
#include "mcpm/model.hpp"
#include "mcpm/random.hpp"

namespace mcpm {

inline constexpr double kMgfDomainEps = 1e-8;
inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// ---------------------------------------------------------------------------
// Moment generating function of sum_q w_q f_q for independent Gaussian factors

/// log of one factor of the product; throws MgfDomainError(q) outside the domain.
inline double log_mgf_factor(const GaussianMoments& w, const GaussianMoments& f, double t, long q = -1) {
    const double t2 = t * t;
    const double d = 1.0 - t2 * w.var * f.var;
    if (d <= kMgfDomainEps) throw MgfDomainError(q, d);
    const double a = t * w.mean * f.mean + 0.5 * t2 * (f.mean * f.mean * w.var + w.mean * w.mean * f.var);
    return a / d - 0.5 * std::log(d);
}

inline double log_mgf_log_intensity(std::span<const GaussianMoments> weights, std::span<const GaussianMoments> latents,
                                    double t) {
    if (weights.size() != latents.size()) throw InputError("mgf: weight and latent moment counts differ");
    double total = 0.0;
    for (std::size_t q = 0; q < weights.size(); ++q) {
        total += log_mgf_factor(weights[q], latents[q], t, static_cast<long>(q));
    }
    return total;
}

/// E[exp(t * sum_q w_q f_q)] with w_q, f_q independent Gaussians.
inline double mgf_log_intensity(std::span<const GaussianMoments> weights, std::span<const GaussianMoments> latents,
                                double t) {
    return std::exp(log_mgf_log_intensity(weights, latents, t));
}

/// Partial derivatives of log_mgf_factor with respect to its four moment arguments.
struct LogMgfPartials {
    double value = 0.0;
    double d_w_mean = 0.0;
    double d_w_var = 0.0;
    double d_f_mean = 0.0;
    double d_f_var = 0.0;
};

inline LogMgfPartials log_mgf_factor_partials(const GaussianMoments& w, const GaussianMoments& f, double t,
                                              long q = -1) {
    const double t2 = t * t;
    const double d = 1.0 - t2 * w.var * f.var;
    if (d <= kMgfDomainEps) throw MgfDomainError(q, d);
    const double a = t * w.mean * f.mean + 0.5 * t2 * (f.mean * f.mean * w.var + w.mean * w.mean * f.var);
    LogMgfPartials out;
    out.value = a / d - 0.5 * std::log(d);
    out.d_w_mean = (t * f.mean + t2 * w.mean * f.var) / d;
    out.d_f_mean = (t * w.mean + t2 * f.mean * w.var) / d;
    out.d_w_var = 0.5 * t2 * f.mean * f.mean / d + a * t2 * f.var / (d * d) + 0.5 * t2 * f.var / d;
    out.d_f_var = 0.5 * t2 * w.mean * w.mean / d + a * t2 * w.var / (d * d) + 0.5 * t2 * w.var / d;
    return out;
}

// ---------------------------------------------------------------------------
// KL terms

namespace detail {

// -KL(N(m, L L^T) || N(0, K)) with K given by its Cholesky factor.
inline double neg_kl_gaussian(const CholeskyFactor& K, const VectorXd& m, const MatrixXd& L) {
    const Index n = m.size();
    const MatrixXd KiL = K.lower.triangularView<Eigen::Lower>().solve(L);
    const VectorXd Kim = K.lower.triangularView<Eigen::Lower>().solve(m);
    const double log_det_S = 2.0 * L.diagonal().array().log().sum();
    return -0.5 * (KiL.squaredNorm() + Kim.squaredNorm() - static_cast<double>(n) + K.log_det() - log_det_S);
}

}  // namespace detail

/// Entropy plus cross-entropy of q(u) against p(u), i.e. -KL(q(u) || p(u)).
inline double kl_u(const VariationalState& state) {
    double total = 0.0;
    for (Index q = 0; q < state.Q(); ++q) {
        const auto& s = state.latents[static_cast<std::size_t>(q)];
        const CholeskyFactor K = chol_jitter(gram(state.latent_kernel(q), s.inducing), state.config.base_jitter);
        total += detail::neg_kl_gaussian(K, s.u_mean, state.u_factor(q));
    }
    return total;
}

/// -KL(q(W) || p(W)). Zero for the deterministic-weight baselines.
inline double kl_w(const VariationalState& state) {
    const auto& cfg = state.config;
    if (!cfg.stochastic_weights()) return 0.0;
    double total = 0.0;
    for (Index q = 0; q < state.Q(); ++q) {
        const auto& s = state.latents[static_cast<std::size_t>(q)];
        if (cfg.weight_prior == WeightPrior::Independent) {
            for (Index p = 0; p < state.P(); ++p) {
                const double kappa = cfg.prior_vars(p, q);
                const double diff = s.w_mean[p] - cfg.prior_means(p, q);
                const double log_omega = s.w_log_var[p];
                const double omega = std::exp(log_omega);
                // log N(omega_pq; gamma_pq, kappa_pq) - Omega_pq / (2 kappa_pq)
                const double cross = -0.5 * (kLog2Pi + std::log(kappa) + diff * diff / kappa) - omega / (2.0 * kappa);
                const double ent = 0.5 * (kLog2Pi + log_omega + 1.0);
                total += cross + ent;
            }
        } else {
            const CholeskyFactor K = chol_jitter(gram(state.weight_kernel(q), cfg.task_descriptors), cfg.base_jitter);
            total += detail::neg_kl_gaussian(K, s.w_mean, factor_from_raw(s.w_factor_raw));
        }
    }
    return total;
}

// ---------------------------------------------------------------------------
// Expected log likelihood

/// Cells of a minibatch with their counts and observation mask.
struct Batch {
    std::vector<Index> cells;
    MatrixXd centroids;  // B x D
    CountMatrix counts;  // B x P
    BoolArray observed;  // B x P

    [[nodiscard]] Index size() const { return static_cast<Index>(cells.size()); }
};

inline Batch make_batch(const CountGrid& grid, const std::vector<Index>& cells) {
    Batch b;
    b.cells = cells;
    const Index B = static_cast<Index>(cells.size());
    b.centroids.resize(B, grid.dim());
    b.counts.resize(B, grid.num_tasks());
    b.observed.resize(B, grid.num_tasks());
    for (Index i = 0; i < B; ++i) {
        const Index n = cells[static_cast<std::size_t>(i)];
        if (n < 0 || n >= grid.num_cells()) throw InputError("batch cell index out of range");
        b.centroids.row(i) = grid.centroids.row(n);
        b.counts.row(i) = grid.counts.row(n);
        b.observed.row(i) = grid.observed.row(n);
    }
    return b;
}

inline Batch full_batch(const CountGrid& grid) { return make_batch(grid, grid.observed_cells()); }

/// Closed-form E_q[log p(Y | F, W)] over the observed entries of the batch.
inline double ell_closed_form(const VariationalState& state, const Batch& batch, const LatentMarginals& moments) {
    const Index Q = state.Q(), P = state.P();
    const MatrixXd Wm = state.weight_means();
    const MatrixXd Wv = state.weight_vars();
    double total = 0.0;
    for (Index i = 0; i < batch.size(); ++i) {
        for (Index p = 0; p < P; ++p) {
            if (!batch.observed(i, p)) continue;
            const double y = static_cast<double>(batch.counts(i, p));
            double log_mgf = 0.0, mean_term = 0.0;
            for (Index q = 0; q < Q; ++q) {
                try {
                    log_mgf += log_mgf_factor({Wm(p, q), Wv(p, q)}, moments.at(i, q), 1.0, static_cast<long>(q));
                } catch (const MgfDomainError& e) {
                    throw e.with_context(static_cast<long>(batch.cells[static_cast<std::size_t>(i)]), static_cast<long>(p));
                }
                mean_term += Wm(p, q) * moments.mean(i, q);
            }
            const double phi = state.offsets[p];
            total += -std::exp(phi + log_mgf) + y * (mean_term + phi) - std::lgamma(y + 1.0);
        }
    }
    return total;
}

struct MonteCarloEstimate {
    double estimate = 0.0;
    double std_error = 0.0;
};

/// Monte-Carlo E_q[log p(Y | F, W)]: each sample draws W from q(W) and
/// independent f_nq from their marginals. Validation oracle only.
inline MonteCarloEstimate ell_monte_carlo(const VariationalState& state, const Batch& batch,
                                          const LatentMarginals& moments, long samples, std::uint64_t seed) {
    if (samples < 2) throw InputError("ell_monte_carlo needs at least 2 samples");
    const Index Q = state.Q(), P = state.P(), B = batch.size();
    std::vector<MatrixXd> w_factor(static_cast<std::size_t>(Q));
    for (Index q = 0; q < Q; ++q) {
        const MatrixXd C = state.w_cov(q);
        w_factor[static_cast<std::size_t>(q)] = C.isZero(0.0) ? MatrixXd::Zero(P, P) : MatrixXd(C.llt().matrixL());
    }
    const MatrixXd f_sd = moments.var.cwiseMax(0.0).cwiseSqrt();
    Rng rng(seed);
    double mean = 0.0, m2 = 0.0;
    MatrixXd W(P, Q), F(B, Q);
    for (long s = 0; s < samples; ++s) {
        for (Index q = 0; q < Q; ++q) {
            W.col(q) = state.w_mean(q) + w_factor[static_cast<std::size_t>(q)] * standard_normal_vector(rng, P);
        }
        for (Index q = 0; q < Q; ++q) {
            for (Index i = 0; i < B; ++i) F(i, q) = moments.mean(i, q) + f_sd(i, q) * standard_normal(rng);
        }
        double ll = 0.0;
        for (Index i = 0; i < B; ++i) {
            for (Index p = 0; p < P; ++p) {
                if (!batch.observed(i, p)) continue;
                const double y = static_cast<double>(batch.counts(i, p));
                const double eta = F.row(i).dot(W.row(p)) + state.offsets[p];
                ll += y * eta - std::exp(eta) - std::lgamma(y + 1.0);
            }
        }
        const double delta = ll - mean;
        mean += delta / static_cast<double>(s + 1);
        m2 += delta * (ll - mean);
    }
    const double var = m2 / static_cast<double>(samples - 1);
    return {mean, std::sqrt(var / static_cast<double>(samples))};
}

struct ElboTerms {
    double kl_u = 0.0;
    double kl_w = 0.0;
    double ell = 0.0;  // already scaled to the full data set
    double total = 0.0;
};

/// kl_u + kl_w + (total_observed / |batch|) * ELL(batch).
inline ElboTerms elbo_terms(const VariationalState& state, const Batch& batch, Index total_observed) {
    if (batch.size() == 0) throw InputError("elbo: empty batch");
    ElboTerms t;
    t.kl_u = kl_u(state);
    t.kl_w = kl_w(state);
    const auto moments = latent_marginals(state, batch.centroids);
    const double scale = static_cast<double>(total_observed) / static_cast<double>(batch.size());
    t.ell = scale * ell_closed_form(state, batch, moments);
    t.total = t.kl_u + t.kl_w + t.ell;
    return t;
}

inline double elbo(const VariationalState& state, const Batch& batch, Index total_observed) {
    return elbo_terms(state, batch, total_observed).total;
}

}  // namespace mcpm
