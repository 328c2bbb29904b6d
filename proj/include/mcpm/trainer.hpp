// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mcpm/data.hpp"
#include "mcpm/elbo.hpp"
#include "mcpm/errors.hpp"
#include "mcpm/gradient.hpp"
#include "mcpm/model.hpp"
#include "mcpm/random.hpp"

namespace mcpm {

enum class Optimizer { Adam, Sgd };

struct TrainConfig {
    double learning_rate = 1e-2;
    int epochs = 1500;
    int batch_size = 0;  // 0 means full batch
    Optimizer optimizer = Optimizer::Adam;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    double convergence_tol = 1e-6;  // relative ELBO change over the window
    int convergence_window = 50;
    int max_halvings = 10;
    bool record_timing = false;
    int checkpoint_every = 0;
    bool whiten_updates = true;  // precondition q(u) updates with the current chol(K_zz)
    int restarts = 1;            // random initializations screened before the main run
    int restart_epochs = 100;    // screening length per initialization

    void validate() const {
        if (!(learning_rate > 0.0)) throw InputError("learning_rate must be positive");
        if (epochs <= 0) throw InputError("epochs must be positive");
        if (batch_size < 0) throw InputError("batch_size must be non-negative");
        if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0 && adam_beta2 > 0.0 && adam_beta2 < 1.0)) {
            throw InputError("Adam betas must lie in (0, 1)");
        }
        if (!(adam_eps > 0.0)) throw InputError("adam_eps must be positive");
        if (convergence_window <= 0) throw InputError("convergence_window must be positive");
        if (restarts < 1) throw InputError("restarts must be at least 1");
        if (restart_epochs < 1) throw InputError("restart_epochs must be positive");
    }
};

struct TrainTrace {
    double initial_elbo = 0.0;
    std::vector<double> elbo;
    std::vector<double> kl_u;
    std::vector<double> kl_w;
    std::vector<double> ell;
    std::vector<double> grad_norm;
    std::vector<double> seconds;
    long rejected_steps = 0;
    long skipped_batches = 0;
    bool converged = false;
    int best_epoch = -1;  // -1 means the initial state was best
    int restart = 0;      // index of the initialization that won screening

    [[nodiscard]] std::size_t epochs() const { return elbo.size(); }

    bool operator==(const TrainTrace&) const = default;
};

struct AdamHyper {
    double learning_rate = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamMoments {
    VectorXd first;
    VectorXd second;
    long step = 0;

    explicit AdamMoments(Index n = 0) : first(VectorXd::Zero(n)), second(VectorXd::Zero(n)) {}
};

/// One bias-corrected Adam step on a loss gradient (descent direction).
inline void adam_step(VectorXd& params, const VectorXd& grads, AdamMoments& moments, const AdamHyper& hyper) {
    if (params.size() != grads.size() || moments.first.size() != params.size()) {
        throw InputError("adam_step: shape mismatch");
    }
    moments.step += 1;
    moments.first = hyper.beta1 * moments.first + (1.0 - hyper.beta1) * grads;
    moments.second = hyper.beta2 * moments.second + (1.0 - hyper.beta2) * grads.cwiseProduct(grads);
    const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(moments.step));
    const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(moments.step));
    const auto m_hat = moments.first.array() / c1;
    const auto v_hat = moments.second.array() / c2;
    params.array() -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.eps);
}

struct FitResult {
    VariationalState state;
    TrainTrace trace;
};

using CheckpointHook = std::function<void(int epoch, const VariationalState&)>;

namespace detail {

// Optimizer coordinates for q(u): m = L_K v and chol(S) = L_K L_v, with L_K = chol(K_zz)
// held fixed for one step. The ELBO itself stays in the unwhitened parameterization.
struct WhiteningAnchor {
    std::vector<MatrixXd> chol;
};

inline WhiteningAnchor whitening_anchor(const VariationalState& s) {
    WhiteningAnchor a;
    for (Index q = 0; q < s.Q(); ++q) {
        const auto& lat = s.latents[static_cast<std::size_t>(q)];
        a.chol.push_back(chol_jitter(gram(s.latent_kernel(q), lat.inducing), s.config.base_jitter).lower);
    }
    return a;
}

inline VariationalState to_whitened(const VariationalState& s, const WhiteningAnchor& a) {
    VariationalState w = s;
    for (std::size_t q = 0; q < s.latents.size(); ++q) {
        const auto K = a.chol[q].triangularView<Eigen::Lower>();
        auto& lat = w.latents[q];
        lat.u_mean = K.solve(s.latents[q].u_mean);
        lat.u_factor_raw = raw_from_factor(K.solve(factor_from_raw(s.latents[q].u_factor_raw)));
    }
    return w;
}

inline void from_whitened(VariationalState& w, const WhiteningAnchor& a) {
    for (std::size_t q = 0; q < w.latents.size(); ++q) {
        const auto K = a.chol[q].triangularView<Eigen::Lower>();
        auto& lat = w.latents[q];
        lat.u_mean = K * lat.u_mean;
        lat.u_factor_raw = raw_from_factor(MatrixXd(K * factor_from_raw(lat.u_factor_raw)));
    }
}

// Pulls an unwhitened gradient back to the whitened coordinates of `white`.
inline void whiten_gradient(VariationalState& grad, const VariationalState& state, const VariationalState& white,
                            const WhiteningAnchor& a) {
    for (std::size_t q = 0; q < grad.latents.size(); ++q) {
        const MatrixXd& K = a.chol[q];
        auto& g = grad.latents[q];
        g.u_mean = K.transpose() * g.u_mean;
        const MatrixXd L = factor_from_raw(state.latents[q].u_factor_raw);
        MatrixXd dL = g.u_factor_raw.triangularView<Eigen::Lower>();
        dL.diagonal().array() /= L.diagonal().array();
        const MatrixXd dLv = (K.transpose() * dL).triangularView<Eigen::Lower>();
        const MatrixXd Lv = factor_from_raw(white.latents[q].u_factor_raw);
        g.u_factor_raw = dLv;
        g.u_factor_raw.diagonal().array() *= Lv.diagonal().array();
    }
}

inline std::optional<ElboTerms> try_full_elbo(const VariationalState& state, const Batch& full, Index total) {
    try {
        auto t = elbo_terms(state, full, total);
        if (!std::isfinite(t.total)) return std::nullopt;
        return t;
    } catch (const NumericalError&) {
        return std::nullopt;
    }
}

}  // namespace detail

/// Maximizes the ELBO from an explicit starting state.
inline FitResult fit_from(VariationalState state, const TrainConfig& tc, const CountGrid& grid,
                          const CheckpointHook& on_checkpoint = {}) {
    tc.validate();
    const auto cells = grid.observed_cells();
    if (cells.empty()) throw InputError("fit: no observed cells");
    const Index total = static_cast<Index>(cells.size());
    const Batch full = make_batch(grid, cells);
    const Index batch_size = (tc.batch_size == 0 || tc.batch_size >= total) ? total : tc.batch_size;
    const bool full_batch_mode = batch_size == total;

    const auto start = std::chrono::steady_clock::now();
    FitResult res;
    auto current = detail::try_full_elbo(state, full, total);
    if (!current) throw ConvergenceError("initialization failure: ELBO is not finite at the initial state");
    res.trace.initial_elbo = current->total;
    VariationalState best = state;
    double best_elbo = current->total;

    AdamMoments moments(param_count(state));
    const AdamHyper hyper{tc.learning_rate, tc.adam_beta1, tc.adam_beta2, tc.adam_eps};
    Rng rng(derive_seed(tc.seed, 0x7261696eULL));
    std::vector<Index> order = cells;
    VariationalState candidate = state;

    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        if (!full_batch_mode) std::shuffle(order.begin(), order.end(), rng);
        long accepted = 0;
        double last_grad_norm = 0.0;
        for (Index startb = 0; startb < total; startb += batch_size) {
            const Index len = std::min(batch_size, total - startb);
            const Batch batch = full_batch_mode ? full
                                                : make_batch(grid, std::vector<Index>(order.begin() + startb,
                                                                                      order.begin() + startb + len));
            VectorXd grad, params;
            std::optional<detail::WhiteningAnchor> anchor;
            try {
                auto g = value_and_gradient(state, batch, total).grad;
                if (tc.whiten_updates) {
                    anchor = detail::whitening_anchor(state);
                    const VariationalState white = detail::to_whitened(state, *anchor);
                    detail::whiten_gradient(g, state, white, *anchor);
                    params = pack_params(white);
                } else {
                    params = pack_params(state);
                }
                grad = pack_params(g);
            } catch (const NumericalError&) {
                ++res.trace.skipped_batches;
                continue;
            }
            if (!grad.allFinite()) {
                ++res.trace.skipped_batches;
                continue;
            }
            last_grad_norm = grad.norm();
            const VectorXd loss_grad = -grad;
            VectorXd proposal = params;
            AdamMoments next = moments;
            if (tc.optimizer == Optimizer::Adam) {
                adam_step(proposal, loss_grad, next, hyper);
            } else {
                proposal -= tc.learning_rate * loss_grad;
            }
            const VectorXd delta = proposal - params;
            bool ok = false;
            double scale = 1.0;
            for (int h = 0; h <= tc.max_halvings; ++h, scale *= 0.5) {
                unpack_params(params + scale * delta, candidate);
                if (anchor) detail::from_whitened(candidate, *anchor);
                if (auto terms = detail::try_full_elbo(candidate, full, total)) {
                    ok = true;
                    current = terms;
                    break;
                }
                ++res.trace.rejected_steps;
            }
            if (!ok) {
                ++res.trace.skipped_batches;
                continue;
            }
            moments = std::move(next);
            std::swap(state, candidate);
            ++accepted;
        }
        if (epoch == 0 && accepted == 0) {
            throw ConvergenceError("initialization failure: no valid optimization step in the first epoch");
        }
        res.trace.elbo.push_back(current->total);
        res.trace.kl_u.push_back(current->kl_u);
        res.trace.kl_w.push_back(current->kl_w);
        res.trace.ell.push_back(current->ell);
        res.trace.grad_norm.push_back(last_grad_norm);
        res.trace.seconds.push_back(
            tc.record_timing ? std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() : 0.0);
        if (current->total > best_elbo) {
            best_elbo = current->total;
            best = state;
            res.trace.best_epoch = epoch;
        }
        if (on_checkpoint && tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0) {
            on_checkpoint(epoch + 1, state);
        }
        const auto& e = res.trace.elbo;
        if (e.size() > static_cast<std::size_t>(tc.convergence_window)) {
            const double prev = e[e.size() - 1 - static_cast<std::size_t>(tc.convergence_window)];
            if (std::abs(e.back() - prev) <= tc.convergence_tol * std::max(std::abs(prev), 1e-12)) {
                res.trace.converged = true;
                break;
            }
        }
    }
    res.state = std::move(best);
    return res;
}

/// Seed of initialization `r`; the first one is the training seed itself.
inline std::uint64_t restart_seed(std::uint64_t seed, int r) {
    return r == 0 ? seed : derive_seed(seed, 0x72737472ULL + static_cast<std::uint64_t>(r));
}

/// Initializes from the model configuration and maximizes the ELBO. With several
/// restarts, each initialization is trained for restart_epochs and the one with the
/// best ELBO is then trained from scratch for the full run.
inline FitResult fit(const ModelConfig& mc, const TrainConfig& tc, const CountGrid& grid,
                     const CheckpointHook& on_checkpoint = {}) {
    tc.validate();
    if (!grid.observed.any()) throw InputError("fit: grid has no observed cells");
    int winner = 0;
    if (tc.restarts > 1) {
        TrainConfig screen = tc;
        screen.epochs = tc.restart_epochs;
        screen.checkpoint_every = 0;
        double best = -std::numeric_limits<double>::infinity();
        for (int r = 0; r < tc.restarts; ++r) {
            screen.seed = restart_seed(tc.seed, r);
            try {
                const auto trial = fit_from(init_state(mc, grid, screen.seed), screen, grid);
                const double e = *std::max_element(trial.trace.elbo.begin(), trial.trace.elbo.end());
                if (e > best) {
                    best = e;
                    winner = r;
                }
            } catch (const ConvergenceError&) {
                // an initialization that cannot take a step loses screening
            }
        }
    }
    TrainConfig run = tc;
    run.seed = restart_seed(tc.seed, winner);
    auto res = fit_from(init_state(mc, grid, run.seed), run, grid, on_checkpoint);
    res.trace.restart = winner;
    return res;
}

inline void write_trace_csv(std::ostream& out, const TrainTrace& trace) {
    out << "epoch,elbo,kl_u,kl_w,ell,grad_norm,seconds\n";
    for (std::size_t e = 0; e < trace.epochs(); ++e) {
        out << (e + 1) << ',' << detail::format_double(trace.elbo[e]) << ',' << detail::format_double(trace.kl_u[e])
            << ',' << detail::format_double(trace.kl_w[e]) << ',' << detail::format_double(trace.ell[e]) << ','
            << detail::format_double(trace.grad_norm[e]) << ',' << detail::format_double(trace.seconds[e]) << '\n';
    }
}

}  // namespace mcpm
