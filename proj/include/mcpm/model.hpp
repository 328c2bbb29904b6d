// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "mcpm/data.hpp"
#include "mcpm/errors.hpp"
#include "mcpm/kernels.hpp"
#include "mcpm/random.hpp"

namespace mcpm {

enum class WeightPrior { Independent, Coupled };
enum class OffsetInit { Zero, LogMeanCount };

/// Mcpm is the full model. Lgcp fixes Q = P and W = I; IcmLimit keeps the
/// weight means trainable but collapses their posterior variance to zero.
enum class BaselineMode { Mcpm, Lgcp, IcmLimit };

inline std::string_view to_string(BaselineMode m) {
    switch (m) {
        case BaselineMode::Lgcp: return "lgcp";
        case BaselineMode::IcmLimit: return "icm-limit";
        default: return "mcpm";
    }
}

inline BaselineMode baseline_mode_from_string(std::string_view s) {
    if (s == "mcpm") return BaselineMode::Mcpm;
    if (s == "lgcp") return BaselineMode::Lgcp;
    if (s == "icm-limit" || s == "icm") return BaselineMode::IcmLimit;
    throw InputError("unknown model mode '" + std::string(s) + "'");
}

inline std::string_view to_string(WeightPrior w) { return w == WeightPrior::Coupled ? "coupled" : "independent"; }

inline WeightPrior weight_prior_from_string(std::string_view s) {
    if (s == "independent") return WeightPrior::Independent;
    if (s == "coupled") return WeightPrior::Coupled;
    throw InputError("unknown weight prior '" + std::string(s) + "'");
}

inline std::string_view to_string(OffsetInit o) { return o == OffsetInit::Zero ? "zero" : "log-mean-count"; }

inline OffsetInit offset_init_from_string(std::string_view s) {
    if (s == "zero") return OffsetInit::Zero;
    if (s == "log-mean-count") return OffsetInit::LogMeanCount;
    throw InputError("unknown offset init '" + std::string(s) + "'");
}

struct ModelConfig {
    int Q = 1;
    int P = 1;
    int M = 0;                        // inducing points per latent; 0 selects inducing_fraction of observed cells
    double inducing_fraction = 0.3;
    KernelSpec latent_kernel;         // initial hyperparameters for every latent
    WeightPrior weight_prior = WeightPrior::Independent;
    MatrixXd prior_means;             // P x Q, Independent
    MatrixXd prior_vars;              // P x Q, Independent
    MatrixXd task_descriptors;        // P x Dh, Coupled
    KernelSpec weight_kernel;         // Coupled
    OffsetInit offsets_init = OffsetInit::LogMeanCount;
    BaselineMode mode = BaselineMode::Mcpm;
    bool learn_inducing = false;
    double base_jitter = kDefaultBaseJitter;

    /// Fills defaults for P and Q and checks every shape.
    void normalize() {
        if (mode == BaselineMode::Lgcp) Q = P;
        if (Q <= 0 || P <= 0) throw InputError("Q and P must be positive");
        if (M < 0) throw InputError("M must be non-negative");
        if (!(inducing_fraction > 0.0 && inducing_fraction <= 1.0)) throw InputError("inducing_fraction must be in (0, 1]");
        latent_kernel.validate();
        if (weight_prior == WeightPrior::Independent) {
            if (prior_means.size() == 0) prior_means = MatrixXd::Zero(P, Q);
            if (prior_vars.size() == 0) prior_vars = MatrixXd::Ones(P, Q);
            if (prior_means.rows() != P || prior_means.cols() != Q) throw InputError("prior_means must be P x Q");
            if (prior_vars.rows() != P || prior_vars.cols() != Q) throw InputError("prior_vars must be P x Q");
            if (!(prior_vars.array() > 0.0).all()) throw InputError("prior_vars must be positive");
        } else {
            if (task_descriptors.rows() != P) throw InputError("task_descriptors must have one row per task");
            if (weight_kernel.dim() != task_descriptors.cols()) {
                weight_kernel.lengthscales = VectorXd::Constant(task_descriptors.cols(),
                                                                weight_kernel.lengthscales.size() ? weight_kernel.lengthscales[0] : 1.0);
            }
            weight_kernel.validate();
        }
        if (!(base_jitter > 0.0)) throw InputError("base_jitter must be positive");
    }

    [[nodiscard]] bool stochastic_weights() const { return mode == BaselineMode::Mcpm; }
    [[nodiscard]] bool trainable_weight_means() const { return mode != BaselineMode::Lgcp; }
};

/// Variational and hyper-parameters of one latent function, all unconstrained.
struct LatentState {
    double log_variance = 0.0;
    VectorXd log_lengthscales;
    MatrixXd inducing;       // M x D
    VectorXd u_mean;         // M
    MatrixXd u_factor_raw;   // M x M lower triangle; diagonal holds log L_ii
    VectorXd w_mean;         // P
    VectorXd w_log_var;      // P, Independent prior
    MatrixXd w_factor_raw;   // P x P lower triangle, Coupled prior; diagonal holds log L_ii
    double w_log_variance = 0.0;
    VectorXd w_log_lengthscales;
};

inline MatrixXd factor_from_raw(const MatrixXd& raw) {
    MatrixXd L = raw.triangularView<Eigen::StrictlyLower>();
    L.diagonal() = raw.diagonal().array().exp().matrix();
    return L;
}

inline MatrixXd raw_from_factor(const MatrixXd& L) {
    MatrixXd raw = L.triangularView<Eigen::StrictlyLower>();
    raw.diagonal() = L.diagonal().array().log().matrix();
    return raw;
}

struct VariationalState {
    ModelConfig config;
    std::vector<LatentState> latents;
    VectorXd offsets;  // P
    std::uint64_t seed = 0;

    [[nodiscard]] Index Q() const { return static_cast<Index>(latents.size()); }
    [[nodiscard]] Index P() const { return offsets.size(); }
    [[nodiscard]] Index M() const { return latents.empty() ? 0 : latents.front().u_mean.size(); }

    [[nodiscard]] KernelSpec latent_kernel(Index q) const {
        const auto& s = latents[static_cast<std::size_t>(q)];
        return KernelSpec{config.latent_kernel.family, std::exp(s.log_variance), s.log_lengthscales.array().exp().matrix()};
    }

    [[nodiscard]] KernelSpec weight_kernel(Index q) const {
        const auto& s = latents[static_cast<std::size_t>(q)];
        return KernelSpec{config.weight_kernel.family, std::exp(s.w_log_variance),
                          s.w_log_lengthscales.array().exp().matrix()};
    }

    [[nodiscard]] MatrixXd u_factor(Index q) const { return factor_from_raw(latents[static_cast<std::size_t>(q)].u_factor_raw); }

    [[nodiscard]] MatrixXd u_cov(Index q) const {
        const MatrixXd L = u_factor(q);
        return L * L.transpose();
    }

    [[nodiscard]] const VectorXd& w_mean(Index q) const { return latents[static_cast<std::size_t>(q)].w_mean; }

    /// Full posterior covariance of column q of W (zero for deterministic-weight modes).
    [[nodiscard]] MatrixXd w_cov(Index q) const {
        const Index P_ = P();
        if (!config.stochastic_weights()) return MatrixXd::Zero(P_, P_);
        const auto& s = latents[static_cast<std::size_t>(q)];
        if (config.weight_prior == WeightPrior::Independent) {
            return s.w_log_var.array().exp().matrix().asDiagonal();
        }
        const MatrixXd L = factor_from_raw(s.w_factor_raw);
        return L * L.transpose();
    }

    /// Marginal posterior variances Omega_pq of column q of W.
    [[nodiscard]] VectorXd w_var(Index q) const {
        if (!config.stochastic_weights()) return VectorXd::Zero(P());
        const auto& s = latents[static_cast<std::size_t>(q)];
        if (config.weight_prior == WeightPrior::Independent) return s.w_log_var.array().exp().matrix();
        const MatrixXd L = factor_from_raw(s.w_factor_raw);
        return L.rowwise().squaredNorm();
    }

    /// P x Q matrices of weight posterior means and marginal variances.
    [[nodiscard]] MatrixXd weight_means() const {
        MatrixXd W(P(), Q());
        for (Index q = 0; q < Q(); ++q) W.col(q) = w_mean(q);
        return W;
    }

    [[nodiscard]] MatrixXd weight_vars() const {
        MatrixXd V(P(), Q());
        for (Index q = 0; q < Q(); ++q) V.col(q) = w_var(q);
        return V;
    }
};

struct GaussianMoments {
    double mean = 0.0;
    double var = 0.0;
};

/// Initial variational state: inducing inputs are a random subsample of observed
/// centroids, q(u) = N(0, 0.1 K_zz), weight means ~ N(0, 0.1^2), weight variances 0.1.
inline VariationalState init_state(ModelConfig config, const CountGrid& grid, std::uint64_t seed) {
    config.P = static_cast<int>(grid.num_tasks());
    if (config.weight_prior == WeightPrior::Independent) {
        if (config.prior_means.size() && config.prior_means.rows() != config.P) throw InputError("prior_means rows != P");
    }
    config.normalize();
    if (config.latent_kernel.dim() != grid.dim()) {
        config.latent_kernel.lengthscales = VectorXd::Constant(grid.dim(), config.latent_kernel.lengthscales[0]);
    }
    const auto obs_cells = grid.observed_cells();
    const Index n_obs = static_cast<Index>(obs_cells.size());
    Index M = config.M;
    if (M == 0) M = std::max<Index>(1, static_cast<Index>(std::lround(config.inducing_fraction * static_cast<double>(n_obs))));
    if (M > n_obs) {
        throw InputError("M=" + std::to_string(M) + " exceeds observed cell count " + std::to_string(n_obs));
    }
    config.M = static_cast<int>(M);

    Rng rng(seed);
    const Index P = config.P, Q = config.Q, D = grid.dim();
    VariationalState state;
    state.config = config;
    state.seed = seed;
    state.latents.resize(static_cast<std::size_t>(Q));
    const double sqrt_init = std::sqrt(0.1);
    for (Index q = 0; q < Q; ++q) {
        auto& s = state.latents[static_cast<std::size_t>(q)];
        s.log_variance = std::log(config.latent_kernel.variance);
        s.log_lengthscales = config.latent_kernel.lengthscales.array().log().matrix();
        std::vector<Index> pick = obs_cells;
        std::shuffle(pick.begin(), pick.end(), rng);
        s.inducing.resize(M, D);
        for (Index i = 0; i < M; ++i) s.inducing.row(i) = grid.centroids.row(pick[static_cast<std::size_t>(i)]);
        s.u_mean = VectorXd::Zero(M);
        // 0.1 * K_zz: an identity-scaled start blows up A S A^T when K_zz is ill-conditioned
        const CholeskyFactor Kzz = chol_jitter(gram(config.latent_kernel, s.inducing), config.base_jitter);
        s.u_factor_raw = raw_from_factor(sqrt_init * Kzz.lower);
        if (config.mode == BaselineMode::Lgcp) {
            s.w_mean = VectorXd::Unit(P, q);
        } else {
            s.w_mean = 0.1 * standard_normal_vector(rng, P);
        }
        if (config.weight_prior == WeightPrior::Independent) {
            s.w_log_var = VectorXd::Constant(P, std::log(0.1));
        } else {
            s.w_factor_raw = raw_from_factor(sqrt_init * MatrixXd::Identity(P, P));
            s.w_log_variance = std::log(config.weight_kernel.variance);
            s.w_log_lengthscales = config.weight_kernel.lengthscales.array().log().matrix();
        }
    }
    state.offsets = VectorXd::Zero(P);
    if (config.offsets_init == OffsetInit::LogMeanCount) {
        state.offsets = (grid.mean_observed_count().array() + 1e-6).log().matrix();
    }
    return state;
}

// ---------------------------------------------------------------------------
// Posterior marginals of the latent functions

/// Everything derived from one latent's inducing-point posterior at a set of inputs.
struct LatentProjection {
    KernelSpec kernel;
    CholeskyFactor Kzz;   // factor of K_zz + jitter I
    MatrixXd Kxz;         // N x M
    MatrixXd A;           // K_xz K_zz^{-1}
    MatrixXd AL;          // A * chol(S)
    VectorXd mean;        // A m
    VectorXd var;         // K_xx - A K_zx + A S A^T, diagonal
};

inline LatentProjection project_latent(const VariationalState& state, Index q, const MatrixXd& X) {
    const auto& s = state.latents[static_cast<std::size_t>(q)];
    LatentProjection pr;
    pr.kernel = state.latent_kernel(q);
    if (X.cols() != pr.kernel.dim()) throw InputError("input dimension does not match the model");
    pr.Kzz = chol_jitter(gram(pr.kernel, s.inducing), state.config.base_jitter);
    pr.Kxz = gram(pr.kernel, X, s.inducing).values;
    pr.A = pr.Kzz.solve(MatrixXd(pr.Kxz.transpose())).transpose();
    pr.AL = pr.A * factor_from_raw(s.u_factor_raw).triangularView<Eigen::Lower>();
    pr.mean = pr.A * s.u_mean;
    pr.var = (VectorXd::Constant(X.rows(), pr.kernel.variance).array() - (pr.A.array() * pr.Kxz.array()).rowwise().sum() +
              pr.AL.array().square().rowwise().sum())
                 .matrix();
    return pr;
}

/// Per (point, latent) means and variances of q(f).
struct LatentMarginals {
    MatrixXd mean;  // N x Q
    MatrixXd var;   // N x Q

    [[nodiscard]] GaussianMoments at(Index n, Index q) const { return {mean(n, q), var(n, q)}; }
};

inline LatentMarginals latent_marginals(const VariationalState& state, const MatrixXd& X) {
    LatentMarginals out;
    out.mean.resize(X.rows(), state.Q());
    out.var.resize(X.rows(), state.Q());
    for (Index q = 0; q < state.Q(); ++q) {
        const auto pr = project_latent(state, q, X);
        out.mean.col(q) = pr.mean;
        out.var.col(q) = pr.var.cwiseMax(0.0);
    }
    return out;
}

/// Full posterior covariance of f_q at X (used for joint sampling).
inline MatrixXd latent_joint_cov(const VariationalState& state, Index q, const MatrixXd& X, const LatentProjection& pr) {
    MatrixXd C = gram(pr.kernel, X).values - pr.A * pr.Kxz.transpose() + pr.AL * pr.AL.transpose();
    return 0.5 * (C + C.transpose());
}

// ---------------------------------------------------------------------------
// Prior over log intensities

/// Prior second moment E[w_q w_q^T] of column q of W under the configured prior.
inline MatrixXd weight_prior_second_moment(const ModelConfig& config, Index q) {
    const Index P = config.P;
    switch (config.mode) {
        case BaselineMode::Lgcp: {
            MatrixXd B = MatrixXd::Zero(P, P);
            B(q, q) = 1.0;
            return B;
        }
        case BaselineMode::IcmLimit:
            return config.prior_means.col(q) * config.prior_means.col(q).transpose();
        case BaselineMode::Mcpm:
            break;
    }
    if (config.weight_prior == WeightPrior::Coupled) return gram(config.weight_kernel, config.task_descriptors).values;
    MatrixXd B = config.prior_vars.col(q).asDiagonal();
    B += config.prior_means.col(q) * config.prior_means.col(q).transpose();
    return B;
}

/// Prior covariance of the stacked log intensities (task-major: row p*N + n),
/// sum over q of E[w_q w_q^T] kron K_f^q.
inline MatrixXd prior_log_intensity_cov(ModelConfig config, const MatrixXd& X) {
    config.normalize();
    const Index N = X.rows(), P = config.P;
    MatrixXd Sigma = MatrixXd::Zero(P * N, P * N);
    KernelSpec kf = config.latent_kernel;
    if (kf.dim() != X.cols()) kf.lengthscales = VectorXd::Constant(X.cols(), kf.lengthscales[0]);
    const MatrixXd Kf = gram(kf, X).values;
    for (Index q = 0; q < config.Q; ++q) {
        const MatrixXd Kw = weight_prior_second_moment(config, q);
        for (Index p = 0; p < P; ++p) {
            for (Index p2 = 0; p2 < P; ++p2) Sigma.block(p * N, p2 * N, N, N) += Kw(p, p2) * Kf;
        }
    }
    return Sigma;
}

struct PriorSample {
    MatrixXd latents;        // N x Q
    MatrixXd weights;        // P x Q
    MatrixXd log_intensity;  // N x P, includes offsets
    MatrixXd intensity;      // N x P
    CountMatrix counts;      // N x P
};

struct PriorSampleOptions {
    VectorXd offsets;                     // P; empty means zeros
    std::optional<MatrixXd> fixed_weights;  // P x Q override of the weight prior
};

/// Draws from the generative model at fixed inputs; factors are computed once.
class PriorSampler {
public:
    PriorSampler(ModelConfig config, const MatrixXd& X, PriorSampleOptions options = {})
        : config_(std::move(config)), options_(std::move(options)), N_(X.rows()) {
        config_.normalize();
        KernelSpec kf = config_.latent_kernel;
        if (kf.dim() != X.cols()) kf.lengthscales = VectorXd::Constant(X.cols(), kf.lengthscales[0]);
        latent_factor_ = chol_jitter(gram(kf, X), 1e-8).lower;
        if (options_.offsets.size() == 0) options_.offsets = VectorXd::Zero(config_.P);
        if (options_.offsets.size() != config_.P) throw InputError("sampler offsets must have P entries");
        if (options_.fixed_weights &&
            (options_.fixed_weights->rows() != config_.P || options_.fixed_weights->cols() != config_.Q)) {
            throw InputError("fixed weights must be P x Q");
        }
        if (config_.mode == BaselineMode::Mcpm && config_.weight_prior == WeightPrior::Coupled) {
            weight_factor_ = chol_jitter(gram(config_.weight_kernel, config_.task_descriptors), 1e-8).lower;
        }
    }

    [[nodiscard]] PriorSample draw(Rng& rng) const {
        const Index P = config_.P, Q = config_.Q;
        PriorSample s;
        s.latents.resize(N_, Q);
        for (Index q = 0; q < Q; ++q) s.latents.col(q) = latent_factor_ * standard_normal_vector(rng, N_);
        s.weights.resize(P, Q);
        for (Index q = 0; q < Q; ++q) s.weights.col(q) = draw_weight_column(rng, q);
        if (options_.fixed_weights) s.weights = *options_.fixed_weights;
        s.log_intensity = (s.latents * s.weights.transpose()).rowwise() + options_.offsets.transpose();
        s.intensity = s.log_intensity.array().exp().matrix();
        s.counts.resize(N_, P);
        for (Index p = 0; p < P; ++p) {
            for (Index n = 0; n < N_; ++n) s.counts(n, p) = poisson_draw(rng, s.intensity(n, p));
        }
        return s;
    }

private:
    [[nodiscard]] VectorXd draw_weight_column(Rng& rng, Index q) const {
        const Index P = config_.P;
        switch (config_.mode) {
            case BaselineMode::Lgcp: return VectorXd::Unit(P, q);
            case BaselineMode::IcmLimit: return config_.prior_means.col(q);
            case BaselineMode::Mcpm: break;
        }
        if (config_.weight_prior == WeightPrior::Coupled) return weight_factor_ * standard_normal_vector(rng, P);
        VectorXd w(P);
        for (Index p = 0; p < P; ++p) {
            w[p] = config_.prior_means(p, q) + std::sqrt(config_.prior_vars(p, q)) * standard_normal(rng);
        }
        return w;
    }

    ModelConfig config_;
    PriorSampleOptions options_;
    Index N_;
    MatrixXd latent_factor_;
    MatrixXd weight_factor_;
};

inline PriorSample sample_prior_counts(const ModelConfig& config, const MatrixXd& X, std::uint64_t seed,
                                       const PriorSampleOptions& options = {}) {
    Rng rng(seed);
    return PriorSampler(config, X, options).draw(rng);
}

/// Convenience overload that returns the draw as a fully observed count grid.
inline std::pair<CountGrid, PriorSample> sample_prior_grid(const ModelConfig& config, const GridSpec& spec,
                                                           std::uint64_t seed, const PriorSampleOptions& options = {}) {
    auto sample = sample_prior_counts(config, spec.centroids(), seed, options);
    CountGrid grid = make_count_grid(spec, sample.counts);
    return {std::move(grid), std::move(sample)};
}

}  // namespace mcpm
