// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <vector>

#include <Eigen/Dense>

#include "mcpm/data.hpp"
#include "mcpm/elbo.hpp"
#include "mcpm/errors.hpp"
#include "mcpm/kernels.hpp"
#include "mcpm/model.hpp"
#include "mcpm/random.hpp"

namespace mcpm {

/// Which distribution over (W, F) the closed-form moments integrate against.
enum class MomentSource { Posterior, Prior };

/// Gaussian moments of W (P x Q) and of F at a set of points (N x Q).
struct MixingMoments {
    MatrixXd w_mean;
    MatrixXd w_var;
    LatentMarginals f;
};

inline MixingMoments mixing_moments(const VariationalState& state, const MatrixXd& X,
                                    MomentSource source = MomentSource::Posterior) {
    MixingMoments mm;
    if (source == MomentSource::Posterior) {
        mm.w_mean = state.weight_means();
        mm.w_var = state.weight_vars();
        mm.f = latent_marginals(state, X);
        return mm;
    }
    const auto& cfg = state.config;
    const Index P = state.P(), Q = state.Q();
    mm.f.mean = MatrixXd::Zero(X.rows(), Q);
    mm.f.var.resize(X.rows(), Q);
    for (Index q = 0; q < Q; ++q) mm.f.var.col(q).setConstant(state.latent_kernel(q).variance);
    switch (cfg.mode) {
        case BaselineMode::Lgcp:
            mm.w_mean = MatrixXd::Identity(P, Q);
            mm.w_var = MatrixXd::Zero(P, Q);
            break;
        case BaselineMode::IcmLimit:
            mm.w_mean = state.weight_means();
            mm.w_var = MatrixXd::Zero(P, Q);
            break;
        case BaselineMode::Mcpm:
            if (cfg.weight_prior == WeightPrior::Independent) {
                mm.w_mean = cfg.prior_means;
                mm.w_var = cfg.prior_vars;
            } else {
                mm.w_mean = MatrixXd::Zero(P, Q);
                mm.w_var.resize(P, Q);
                for (Index q = 0; q < Q; ++q) mm.w_var.col(q).setConstant(state.weight_kernel(q).variance);
            }
            break;
    }
    return mm;
}

namespace detail {

inline MatrixXd moment_from_mixing(const VariationalState& state, const MixingMoments& mm, int t) {
    const Index P = state.P(), Q = state.Q(), N = mm.f.mean.rows();
    MatrixXd out(P, N);
    std::vector<GaussianMoments> w(static_cast<std::size_t>(Q)), f(static_cast<std::size_t>(Q));
    for (Index n = 0; n < N; ++n) {
        for (Index q = 0; q < Q; ++q) f[static_cast<std::size_t>(q)] = mm.f.at(n, q);
        for (Index p = 0; p < P; ++p) {
            for (Index q = 0; q < Q; ++q) w[static_cast<std::size_t>(q)] = {mm.w_mean(p, q), mm.w_var(p, q)};
            try {
                out(p, n) = std::exp(t * state.offsets[p] + log_mgf_log_intensity(w, f, static_cast<double>(t)));
            } catch (const MgfDomainError& e) {
                throw e.with_context(static_cast<long>(n), static_cast<long>(p));
            }
        }
    }
    return out;
}

}  // namespace detail

/// E[lambda_p(x_n)^t] = exp(t phi_p) MGF(t), returned as P x N.
inline MatrixXd intensity_moment(const VariationalState& state, const MatrixXd& X, int t,
                                 MomentSource source = MomentSource::Posterior) {
    if (t < 1) throw InputError("intensity_moment: t must be a positive integer");
    return detail::moment_from_mixing(state, mixing_moments(state, X, source), t);
}

struct IntensityMeanVar {
    MatrixXd mean;  // P x N
    MatrixXd var;   // P x N
    long floored = 0;          // roundoff negatives set to zero
    long sampled_entries = 0;  // entries whose second moment fell outside the MGF domain
    [[nodiscard]] bool sampled() const { return sampled_entries > 0; }
};

struct MeanVarOptions {
    MomentSource source = MomentSource::Posterior;
    long fallback_samples = 20000;
    std::uint64_t seed = 0;
};

/// Closed-form mean and variance of each intensity. Entries where the t=2 moment
/// does not exist fall back to a sample variance and are counted in the result.
inline IntensityMeanVar intensity_mean_var(const VariationalState& state, const MatrixXd& X,
                                           const MeanVarOptions& opt = {}) {
    const auto mm = mixing_moments(state, X, opt.source);
    IntensityMeanVar out;
    out.mean = detail::moment_from_mixing(state, mm, 1);
    const Index P = state.P(), Q = state.Q(), N = X.rows();
    out.var.resize(P, N);
    std::vector<GaussianMoments> w(static_cast<std::size_t>(Q)), f(static_cast<std::size_t>(Q));
    for (Index n = 0; n < N; ++n) {
        for (Index q = 0; q < Q; ++q) f[static_cast<std::size_t>(q)] = mm.f.at(n, q);
        for (Index p = 0; p < P; ++p) {
            for (Index q = 0; q < Q; ++q) w[static_cast<std::size_t>(q)] = {mm.w_mean(p, q), mm.w_var(p, q)};
            const double mean = out.mean(p, n);
            double second = 0.0;
            try {
                second = std::exp(2.0 * state.offsets[p] + log_mgf_log_intensity(w, f, 2.0));
            } catch (const MgfDomainError&) {
                Rng rng(derive_seed(opt.seed, static_cast<std::uint64_t>(n * P + p)));
                double s1 = 0.0, s2 = 0.0;
                for (long s = 0; s < opt.fallback_samples; ++s) {
                    double eta = state.offsets[p];
                    for (Index q = 0; q < Q; ++q) {
                        const double wq = w[static_cast<std::size_t>(q)].mean +
                                          std::sqrt(w[static_cast<std::size_t>(q)].var) * standard_normal(rng);
                        const double fq = f[static_cast<std::size_t>(q)].mean +
                                          std::sqrt(f[static_cast<std::size_t>(q)].var) * standard_normal(rng);
                        eta += wq * fq;
                    }
                    const double lam = std::exp(eta);
                    s1 += lam;
                    s2 += lam * lam;
                }
                const double L = static_cast<double>(opt.fallback_samples);
                out.var(p, n) = std::max(0.0, (s2 - s1 * s1 / L) / (L - 1.0));
                ++out.sampled_entries;
                continue;
            }
            double v = second - mean * mean;
            if (v < 0.0) {
                if (-v > 1e-10 * std::max(1.0, second)) {
                    throw NumericalError("intensity_mean_var: negative variance beyond roundoff");
                }
                v = 0.0;
                ++out.floored;
            }
            out.var(p, n) = v;
        }
    }
    return out;
}

/// pi_p(x) = E[lambda_p(x)] / sum_p' E[lambda_p'(x)], P x N.
inline MatrixXd conditional_probability_surface(const VariationalState& state, const MatrixXd& X) {
    const MatrixXd mean = intensity_moment(state, X, 1);
    MatrixXd out(mean.rows(), mean.cols());
    for (Index n = 0; n < mean.cols(); ++n) {
        const double total = mean.col(n).sum();
        if (!(total > 0.0) || !std::isfinite(total)) throw NumericalError("conditional probability: degenerate intensities");
        out.col(n) = mean.col(n) / total;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Joint posterior sampling

namespace detail {

// Symmetric square root that tolerates rank deficiency (including the zero matrix).
inline MatrixXd psd_sqrt(const MatrixXd& C) {
    if (C.rows() == 1) return MatrixXd::Constant(1, 1, std::sqrt(std::max(0.0, C(0, 0))));
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (C + C.transpose()));
    if (es.info() != Eigen::Success) throw FactorizationError("psd_sqrt: eigendecomposition failed");
    const VectorXd d = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * d.asDiagonal();
}

}  // namespace detail

/// Draws joint (W, F) samples from q at a fixed input set; projections are shared
/// across regions so repeated region queries only factor the region block.
class PosteriorSampler {
public:
    PosteriorSampler(const VariationalState& state, const MatrixXd& X) : state_(state), X_(X) {
        const Index Q = state.Q();
        for (Index q = 0; q < Q; ++q) {
            proj_.push_back(project_latent(state, q, X));
            w_factor_.push_back(detail::psd_sqrt(state.w_cov(q)));
        }
    }

    [[nodiscard]] Index num_points() const { return X_.rows(); }

    /// L x P matrix of log intensities' exponentials summed over `region`, one row per joint draw.
    [[nodiscard]] MatrixXd region_intensity(const std::vector<Index>& region, long L, Rng& rng) const {
        if (L < 1) throw InputError("sample count must be at least 1");
        if (region.empty()) throw InputError("region must contain at least one point");
        const Index Q = state_.Q(), P = state_.P(), R = static_cast<Index>(region.size());
        std::vector<VectorXd> f_mean;
        std::vector<MatrixXd> f_factor;
        latent_block(region, f_mean, f_factor);
        MatrixXd out(L, P);
        MatrixXd F(R, Q), W(P, Q);
        for (long l = 0; l < L; ++l) {
            for (Index q = 0; q < Q; ++q) {
                W.col(q) = state_.w_mean(q) + w_factor_[static_cast<std::size_t>(q)] * standard_normal_vector(rng, P);
                F.col(q) = f_mean[static_cast<std::size_t>(q)] +
                           f_factor[static_cast<std::size_t>(q)] * standard_normal_vector(rng, R);
            }
            const MatrixXd eta = (F * W.transpose()).rowwise() + state_.offsets.transpose();
            out.row(l) = eta.array().exp().colwise().sum();
        }
        return out;
    }

    /// L x P predictive count totals over `region`.
    [[nodiscard]] CountMatrix region_counts(const std::vector<Index>& region, long L, Rng& rng) const {
        const MatrixXd lam = region_intensity(region, L, rng);
        CountMatrix out(lam.rows(), lam.cols());
        for (Index l = 0; l < lam.rows(); ++l) {
            for (Index p = 0; p < lam.cols(); ++p) out(l, p) = poisson_draw(rng, lam(l, p));
        }
        return out;
    }

    /// Per task an L x N matrix of jointly sampled pointwise intensities at `points`.
    [[nodiscard]] std::vector<MatrixXd> point_intensities(const std::vector<Index>& points, long L, Rng& rng) const {
        const Index Q = state_.Q(), P = state_.P(), R = static_cast<Index>(points.size());
        std::vector<MatrixXd> out(static_cast<std::size_t>(P), MatrixXd(L, R));
        if (R == 0) return out;
        std::vector<VectorXd> f_mean;
        std::vector<MatrixXd> f_factor;
        latent_block(points, f_mean, f_factor);
        MatrixXd F(R, Q), W(P, Q);
        for (long l = 0; l < L; ++l) {
            for (Index q = 0; q < Q; ++q) {
                W.col(q) = state_.w_mean(q) + w_factor_[static_cast<std::size_t>(q)] * standard_normal_vector(rng, P);
                F.col(q) = f_mean[static_cast<std::size_t>(q)] +
                           f_factor[static_cast<std::size_t>(q)] * standard_normal_vector(rng, R);
            }
            const MatrixXd eta = (F * W.transpose()).rowwise() + state_.offsets.transpose();
            for (Index p = 0; p < P; ++p) out[static_cast<std::size_t>(p)].row(l) = eta.col(p).array().exp().transpose();
        }
        return out;
    }

private:
    void latent_block(const std::vector<Index>& idx, std::vector<VectorXd>& f_mean, std::vector<MatrixXd>& f_factor) const {
        const Index R = static_cast<Index>(idx.size());
        for (const auto& pr : proj_) {
            MatrixXd Xr(R, X_.cols()), A(R, pr.A.cols()), Kxz(R, pr.Kxz.cols()), AL(R, pr.AL.cols());
            VectorXd m(R);
            for (Index i = 0; i < R; ++i) {
                const Index n = idx[static_cast<std::size_t>(i)];
                if (n < 0 || n >= X_.rows()) throw InputError("point index out of range");
                Xr.row(i) = X_.row(n);
                A.row(i) = pr.A.row(n);
                Kxz.row(i) = pr.Kxz.row(n);
                AL.row(i) = pr.AL.row(n);
                m[i] = pr.mean[n];
            }
            f_mean.push_back(std::move(m));
            f_factor.push_back(detail::psd_sqrt(gram(pr.kernel, Xr).values - A * Kxz.transpose() + AL * AL.transpose()));
        }
    }

    const VariationalState& state_;
    MatrixXd X_;
    std::vector<LatentProjection> proj_;
    std::vector<MatrixXd> w_factor_;
};

/// L predictive count totals per task over the points of `region` (L x P).
inline CountMatrix predictive_count_samples(const VariationalState& state, const MatrixXd& X, long L,
                                            const std::vector<Index>& region, std::uint64_t seed) {
    PosteriorSampler sampler(state, X);
    Rng rng(seed);
    return sampler.region_counts(region, L, rng);
}

/// Per task an S x N matrix of joint posterior intensity draws at every row of X.
inline std::vector<MatrixXd> sample_intensities(const VariationalState& state, const MatrixXd& X, long S,
                                                std::uint64_t seed) {
    if (S < 1) throw InputError("sample count must be at least 1");
    PosteriorSampler sampler(state, X);
    std::vector<Index> all(static_cast<std::size_t>(X.rows()));
    for (Index n = 0; n < X.rows(); ++n) all[static_cast<std::size_t>(n)] = n;
    Rng rng(seed);
    return sampler.point_intensities(all, S, rng);
}

// ---------------------------------------------------------------------------
// Quantiles and surfaces

/// Hyndman-Fan type 7 quantile (linear interpolation between order statistics).
inline double quantile_type7(std::vector<double> values, double prob) {
    if (values.empty()) throw InputError("quantile of an empty sample");
    if (!(prob >= 0.0 && prob <= 1.0)) throw InputError("quantile probability must lie in [0, 1]");
    std::sort(values.begin(), values.end());
    const double h = (static_cast<double>(values.size()) - 1.0) * prob;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

struct Surface {
    MatrixXd points;  // N x D
    std::vector<Index> cell_ids;
    IntensityMeanVar moments;
    MatrixXd lo90, hi90, pi;  // P x N

    [[nodiscard]] Index num_points() const { return points.rows(); }
};

struct SurfaceOptions {
    long samples = 1000;
    std::uint64_t seed = 0;
};

/// Moments, 90% predictive count band and conditional probability at every point.
inline Surface predict_surface(const VariationalState& state, const MatrixXd& X, const std::vector<Index>& cell_ids,
                               const SurfaceOptions& opt = {}) {
    if (static_cast<Index>(cell_ids.size()) != X.rows()) throw InputError("surface: one cell id per point");
    Surface s;
    s.points = X;
    s.cell_ids = cell_ids;
    s.moments = intensity_mean_var(state, X, MeanVarOptions{MomentSource::Posterior, 20000, derive_seed(opt.seed, 1)});
    s.pi = conditional_probability_surface(state, X);
    const Index P = state.P(), N = X.rows();
    s.lo90.resize(P, N);
    s.hi90.resize(P, N);
    PosteriorSampler sampler(state, X);
    std::vector<double> buf(static_cast<std::size_t>(opt.samples));
    for (Index n = 0; n < N; ++n) {
        Rng rng(derive_seed(opt.seed, 1000 + static_cast<std::uint64_t>(n)));
        const CountMatrix c = sampler.region_counts({n}, opt.samples, rng);
        for (Index p = 0; p < P; ++p) {
            for (long l = 0; l < opt.samples; ++l) buf[static_cast<std::size_t>(l)] = static_cast<double>(c(l, p));
            s.lo90(p, n) = quantile_type7(buf, 0.05);
            s.hi90(p, n) = quantile_type7(buf, 0.95);
        }
    }
    return s;
}

inline void write_surface_csv(std::ostream& out, const Surface& s) {
    const Index D = s.points.cols();
    out << "cell_id";
    for (Index d = 0; d < D; ++d) out << ",x" << (d + 1);
    out << ",task,mean,variance,lo90,hi90,pi\n";
    for (Index n = 0; n < s.num_points(); ++n) {
        for (Index p = 0; p < s.moments.mean.rows(); ++p) {
            out << s.cell_ids[static_cast<std::size_t>(n)];
            for (Index d = 0; d < D; ++d) out << ',' << detail::format_double(s.points(n, d));
            out << ',' << p << ',' << detail::format_double(s.moments.mean(p, n)) << ','
                << detail::format_double(s.moments.var(p, n)) << ',' << detail::format_double(s.lo90(p, n)) << ','
                << detail::format_double(s.hi90(p, n)) << ',' << detail::format_double(s.pi(p, n)) << '\n';
        }
    }
}

}  // namespace mcpm
