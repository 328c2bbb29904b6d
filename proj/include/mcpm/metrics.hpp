// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "mcpm/data.hpp"
#include "mcpm/errors.hpp"
#include "mcpm/model.hpp"
#include "mcpm/predict.hpp"
#include "mcpm/random.hpp"

namespace mcpm {

/// sqrt(mean((target - prediction)^2)) over the supplied cells.
inline double rmse(const VectorXd& prediction, const VectorXd& target) {
    if (prediction.size() != target.size()) throw InputError("rmse: length mismatch");
    if (prediction.size() == 0) throw InputError("rmse: empty cell set");
    return std::sqrt((target - prediction).squaredNorm() / static_cast<double>(prediction.size()));
}

inline double rmse(const VectorXd& prediction, const Eigen::VectorX<long>& counts) {
    return rmse(prediction, VectorXd(counts.cast<double>()));
}

enum class NlplNormalizer { Cells, Events };

/// Negative log predictive likelihood: -(1/S) sum_s (1/n) sum_i log Poisson(y_i | lambda_si).
/// n is the number of cells by default, or the total event count.
inline double nlpl(const MatrixXd& intensity_samples, const Eigen::VectorX<long>& counts,
                   NlplNormalizer normalizer = NlplNormalizer::Cells) {
    const Index S = intensity_samples.rows(), N = intensity_samples.cols();
    if (S < 1) throw InputError("nlpl: need at least one intensity sample");
    if (N == 0 || counts.size() != N) throw InputError("nlpl: counts must match the sample columns and be non-empty");
    if (!(intensity_samples.array() > 0.0).all()) throw InputError("nlpl: intensity samples must be positive");
    double n = static_cast<double>(N);
    if (normalizer == NlplNormalizer::Events) {
        n = static_cast<double>(counts.sum());
        if (!(n > 0.0)) throw InputError("nlpl: event normalizer needs at least one event");
    }
    double lgam = 0.0;
    for (Index i = 0; i < N; ++i) lgam += std::lgamma(static_cast<double>(counts[i]) + 1.0);
    const VectorXd y = counts.cast<double>();
    double total = 0.0;
    for (Index s = 0; s < S; ++s) {
        const auto lam = intensity_samples.row(s).array();
        total += (y.array().transpose() * lam.log()).sum() - lam.sum() - lgam;
    }
    return -total / (static_cast<double>(S) * n);
}

// ---------------------------------------------------------------------------
// Empirical coverage

enum class CellPool { Train, Test };

inline std::string_view to_string(CellPool pool) { return pool == CellPool::Train ? "train" : "test"; }

struct CoverageOptions {
    int region_cells = 4;
    int subregions = 100;
    long samples = 1000;
    double level = 0.9;
    std::uint64_t seed = 0;
};

namespace detail {

inline void shape_search(int remaining, std::size_t d, const std::vector<int>& limits, std::vector<int>& cur,
                         std::vector<int>& best, double& best_spread) {
    if (d == limits.size()) {
        if (remaining != 1) return;
        const auto [lo, hi] = std::minmax_element(cur.begin(), cur.end());
        const double spread = static_cast<double>(*hi) / static_cast<double>(*lo);
        if (spread < best_spread) {
            best_spread = spread;
            best = cur;
        }
        return;
    }
    for (int a = 1; a <= std::min(remaining, limits[d]); ++a) {
        if (remaining % a != 0) continue;
        cur.push_back(a);
        shape_search(remaining / a, d + 1, limits, cur, best, best_spread);
        cur.pop_back();
    }
}

}  // namespace detail

/// Most nearly square box of exactly `cells` grid cells that fits the grid.
inline std::vector<int> rectangle_shape(const GridSpec& spec, int cells) {
    if (cells < 1) throw InputError("region size must be positive");
    std::vector<int> cur, best;
    double spread = std::numeric_limits<double>::infinity();
    detail::shape_search(cells, 0, spec.cells_per_dim, cur, best, spread);
    if (best.empty()) throw InputError("region size " + std::to_string(cells) + " has no rectangular shape on this grid");
    return best;
}

/// Every axis-aligned rectangle of the given shape lying entirely in the pool, as cell lists.
inline std::vector<std::vector<Index>> candidate_regions(const GridSpec& spec, const std::vector<int>& shape,
                                                         const std::vector<bool>& in_pool) {
    std::vector<std::vector<Index>> out;
    const std::size_t D = spec.cells_per_dim.size();
    for (Index origin = 0; origin < spec.num_cells(); ++origin) {
        const auto o = spec.unravel(origin);
        bool fits = true;
        for (std::size_t d = 0; d < D; ++d) fits = fits && o[d] + shape[d] <= spec.cells_per_dim[d];
        if (!fits) continue;
        std::vector<Index> cells;
        std::vector<int> off(D, 0);
        bool inside = true;
        while (inside) {
            std::vector<int> idx(D);
            for (std::size_t d = 0; d < D; ++d) idx[d] = o[d] + off[d];
            const Index c = spec.ravel(idx);
            if (!in_pool[static_cast<std::size_t>(c)]) {
                cells.clear();
                break;
            }
            cells.push_back(c);
            std::size_t d = 0;
            while (d < D && ++off[d] == shape[d]) off[d++] = 0;
            inside = d < D;
        }
        if (!cells.empty()) out.push_back(std::move(cells));
    }
    return out;
}

/// Fraction of random pool subregions whose observed total count for `task` lies in
/// the central `level` interval of its predictive count distribution.
inline double empirical_coverage(const VariationalState& state, const CountGrid& grid, Index task, CellPool pool,
                                 const CoverageOptions& opt = {}) {
    if (task < 0 || task >= grid.num_tasks()) throw InputError("coverage: task out of range");
    if (opt.subregions < 1 || opt.samples < 1) throw InputError("coverage: subregion and sample counts must be positive");
    if (!(opt.level > 0.0 && opt.level < 1.0)) throw InputError("coverage: level must lie in (0, 1)");
    std::vector<bool> in_pool(static_cast<std::size_t>(grid.num_cells()));
    for (Index n = 0; n < grid.num_cells(); ++n) {
        in_pool[static_cast<std::size_t>(n)] = grid.observed(n, task) == (pool == CellPool::Train);
    }
    const auto shape = rectangle_shape(grid.spec, opt.region_cells);
    const auto candidates = candidate_regions(grid.spec, shape, in_pool);
    if (candidates.empty()) {
        throw InputError("coverage: the " + std::string(to_string(pool)) + " pool of task " + std::to_string(task) +
                         " holds no region of " + std::to_string(opt.region_cells) + " cells");
    }
    PosteriorSampler sampler(state, grid.centroids);
    Rng pick(derive_seed(opt.seed, static_cast<std::uint64_t>(task)));
    std::uniform_int_distribution<std::size_t> uniform(0, candidates.size() - 1);
    std::vector<double> buf(static_cast<std::size_t>(opt.samples));
    int covered = 0;
    for (int l = 0; l < opt.subregions; ++l) {
        const auto& region = candidates[uniform(pick)];
        Rng rng(derive_seed(opt.seed, 0x10000ULL * static_cast<std::uint64_t>(task + 1) + static_cast<std::uint64_t>(l)));
        const CountMatrix c = sampler.region_counts(region, opt.samples, rng);
        for (long s = 0; s < opt.samples; ++s) buf[static_cast<std::size_t>(s)] = static_cast<double>(c(s, task));
        const double lo = quantile_type7(buf, 0.5 * (1.0 - opt.level));
        const double hi = quantile_type7(buf, 0.5 * (1.0 + opt.level));
        double y = 0.0;
        for (Index n : region) y += static_cast<double>(grid.counts(n, task));
        if (y >= lo && y <= hi) ++covered;
    }
    return static_cast<double>(covered) / static_cast<double>(opt.subregions);
}

// ---------------------------------------------------------------------------
// Evaluation report

enum class CellSelection { Observed, Missing, All };

inline std::string_view to_string(CellSelection s) {
    switch (s) {
        case CellSelection::Observed: return "observed";
        case CellSelection::Missing: return "missing";
        case CellSelection::All: return "all";
    }
    return "all";
}

inline CellSelection cell_selection_from_string(std::string_view s) {
    if (s == "observed") return CellSelection::Observed;
    if (s == "missing") return CellSelection::Missing;
    if (s == "all") return CellSelection::All;
    throw InputError("unknown cell selection '" + std::string(s) + "' (expected observed|missing|all)");
}

struct TaskMetrics {
    Index cells = 0;
    double rmse = 0.0;
    double nlpl = 0.0;
    std::optional<double> ec_in;
    std::optional<double> ec_out;
};

struct EvalOptions {
    CellSelection cells = CellSelection::All;
    long nlpl_samples = 1000;
    NlplNormalizer normalizer = NlplNormalizer::Cells;
    CoverageOptions coverage;
    std::uint64_t seed = 0;
};

struct EvalReport {
    std::vector<TaskMetrics> tasks;
    std::optional<int> fold_id;
    std::uint64_t seed = 0;
};

/// Per-task RMSE and NLPL on the selected cells, plus coverage on the train and test pools.
/// A pool without room for a single region leaves the corresponding coverage empty.
inline EvalReport evaluate(const VariationalState& state, const CountGrid& grid, const EvalOptions& opt = {}) {
    if (state.P() != grid.num_tasks()) throw InputError("evaluate: model and grid task counts differ");
    rectangle_shape(grid.spec, opt.coverage.region_cells);
    EvalReport report;
    report.seed = opt.seed;
    const MatrixXd mean = intensity_moment(state, grid.centroids, 1);
    const auto samples = sample_intensities(state, grid.centroids, opt.nlpl_samples, derive_seed(opt.seed, 11));
    for (Index p = 0; p < grid.num_tasks(); ++p) {
        std::vector<Index> cells;
        for (Index n = 0; n < grid.num_cells(); ++n) {
            const bool obs = grid.observed(n, p);
            if (opt.cells == CellSelection::All || (opt.cells == CellSelection::Observed) == obs) cells.push_back(n);
        }
        TaskMetrics tm;
        tm.cells = static_cast<Index>(cells.size());
        if (!cells.empty()) {
            const Index C = tm.cells;
            VectorXd pred(C);
            Eigen::VectorX<long> y(C);
            MatrixXd lam(opt.nlpl_samples, C);
            for (Index i = 0; i < C; ++i) {
                const Index n = cells[static_cast<std::size_t>(i)];
                pred[i] = mean(p, n);
                y[i] = grid.counts(n, p);
                lam.col(i) = samples[static_cast<std::size_t>(p)].col(n);
            }
            tm.rmse = rmse(pred, y);
            tm.nlpl = nlpl(lam, y, opt.normalizer);
        } else {
            tm.rmse = std::numeric_limits<double>::quiet_NaN();
            tm.nlpl = std::numeric_limits<double>::quiet_NaN();
        }
        for (CellPool pool : {CellPool::Train, CellPool::Test}) {
            try {
                CoverageOptions co = opt.coverage;
                co.seed = derive_seed(opt.seed, pool == CellPool::Train ? 21 : 22);
                const double ec = empirical_coverage(state, grid, p, pool, co);
                (pool == CellPool::Train ? tm.ec_in : tm.ec_out) = ec;
            } catch (const InputError&) {
                // pool too small for a region: coverage is undefined
            }
        }
        report.tasks.push_back(tm);
    }
    return report;
}

}  // namespace mcpm
