// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mcpm/errors.hpp"
#include "mcpm/kernels.hpp"
#include "mcpm/random.hpp"

namespace mcpm {

using BoolArray = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;
using CountMatrix = Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic>;

struct Interval {
    double lo = 0.0;
    double hi = 1.0;
};

struct Event {
    VectorXd location;
    int task = 0;
};

/// Point events with task labels inside a bounded rectangular region.
struct EventDataset {
    std::vector<Event> events;
    std::vector<Interval> bounds;
    int num_tasks = 0;

    [[nodiscard]] Index dim() const { return static_cast<Index>(bounds.size()); }
};

/// Regular grid over a rectangle. Cell ids run with dimension 0 fastest.
struct GridSpec {
    std::vector<int> cells_per_dim;
    std::vector<Interval> bounds;

    [[nodiscard]] Index dim() const { return static_cast<Index>(cells_per_dim.size()); }

    [[nodiscard]] Index num_cells() const {
        Index n = 1;
        for (int c : cells_per_dim) n *= c;
        return n;
    }

    void validate() const {
        if (cells_per_dim.empty()) throw InputError("grid needs at least one dimension");
        if (cells_per_dim.size() != bounds.size()) throw InputError("grid bounds do not match dimensionality");
        for (std::size_t d = 0; d < bounds.size(); ++d) {
            if (cells_per_dim[d] <= 0) throw InputError("grid cell counts must be positive");
            if (!(bounds[d].hi > bounds[d].lo)) throw InputError("grid bounds must have hi > lo");
        }
    }

    [[nodiscard]] std::vector<int> unravel(Index cell) const {
        std::vector<int> idx(cells_per_dim.size());
        for (std::size_t d = 0; d < cells_per_dim.size(); ++d) {
            idx[d] = static_cast<int>(cell % cells_per_dim[d]);
            cell /= cells_per_dim[d];
        }
        return idx;
    }

    [[nodiscard]] Index ravel(const std::vector<int>& idx) const {
        Index cell = 0;
        for (std::size_t d = cells_per_dim.size(); d-- > 0;) cell = cell * cells_per_dim[d] + idx[d];
        return cell;
    }

    [[nodiscard]] double cell_width(std::size_t d) const {
        return (bounds[d].hi - bounds[d].lo) / cells_per_dim[d];
    }

    [[nodiscard]] MatrixXd centroids() const {
        MatrixXd C(num_cells(), dim());
        for (Index n = 0; n < C.rows(); ++n) {
            const auto idx = unravel(n);
            for (std::size_t d = 0; d < idx.size(); ++d) {
                C(n, static_cast<Index>(d)) = bounds[d].lo + (idx[d] + 0.5) * cell_width(d);
            }
        }
        return C;
    }
};

/// Event counts per (cell, task) with a per-entry observation mask.
struct CountGrid {
    GridSpec spec;
    CountMatrix counts;   // N x P
    MatrixXd centroids;   // N x D
    BoolArray observed;   // N x P

    [[nodiscard]] Index num_cells() const { return counts.rows(); }
    [[nodiscard]] Index num_tasks() const { return counts.cols(); }
    [[nodiscard]] Index dim() const { return centroids.cols(); }

    /// Cells with at least one observed task, in ascending order.
    [[nodiscard]] std::vector<Index> observed_cells() const {
        std::vector<Index> out;
        for (Index n = 0; n < num_cells(); ++n) {
            if (observed.row(n).any()) out.push_back(n);
        }
        return out;
    }

    [[nodiscard]] std::vector<Index> cells_for_task(Index p, bool want_observed) const {
        std::vector<Index> out;
        for (Index n = 0; n < num_cells(); ++n) {
            if (observed(n, p) == want_observed) out.push_back(n);
        }
        return out;
    }

    [[nodiscard]] VectorXd mean_observed_count() const {
        VectorXd mean = VectorXd::Zero(num_tasks());
        for (Index p = 0; p < num_tasks(); ++p) {
            double total = 0.0;
            Index n_obs = 0;
            for (Index n = 0; n < num_cells(); ++n) {
                if (!observed(n, p)) continue;
                total += static_cast<double>(counts(n, p));
                ++n_obs;
            }
            mean[p] = n_obs > 0 ? total / static_cast<double>(n_obs) : 0.0;
        }
        return mean;
    }
};

inline CountGrid make_count_grid(const GridSpec& spec, const CountMatrix& counts) {
    spec.validate();
    if (counts.rows() != spec.num_cells()) throw InputError("count matrix rows do not match grid cell count");
    CountGrid grid;
    grid.spec = spec;
    grid.counts = counts;
    grid.centroids = spec.centroids();
    grid.observed = BoolArray::Constant(counts.rows(), counts.cols(), true);
    return grid;
}

/// Cell index along one dimension; half-open cells, upper edge goes to the last cell.
inline int cell_index_1d(double x, const Interval& bounds, int cells) {
    if (!(x >= bounds.lo && x <= bounds.hi)) throw InputError("event location outside grid bounds");
    const double pos = (x - bounds.lo) * cells / (bounds.hi - bounds.lo);
    const int idx = static_cast<int>(std::floor(pos));
    return std::clamp(idx, 0, cells - 1);
}

inline CountGrid discretize(const EventDataset& events, const GridSpec& spec) {
    spec.validate();
    if (events.dim() != 0 && events.dim() != spec.dim()) {
        throw InputError("event dimensionality does not match grid");
    }
    CountMatrix counts = CountMatrix::Zero(spec.num_cells(), std::max(events.num_tasks, 1));
    std::vector<int> idx(static_cast<std::size_t>(spec.dim()));
    for (const auto& ev : events.events) {
        if (ev.location.size() != spec.dim()) throw InputError("event dimensionality does not match grid");
        if (ev.task < 0 || ev.task >= counts.cols()) throw InputError("event task id out of range");
        for (std::size_t d = 0; d < idx.size(); ++d) {
            idx[d] = cell_index_1d(ev.location[static_cast<Index>(d)], spec.bounds[d], spec.cells_per_dim[d]);
        }
        counts(spec.ravel(idx), ev.task) += 1;
    }
    return make_count_grid(spec, counts);
}

// ---------------------------------------------------------------------------
// CSV plumbing

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) {
        const auto b = field.find_first_not_of(" \t\r");
        const auto e = field.find_last_not_of(" \t\r");
        out.push_back(b == std::string::npos ? std::string() : field.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline double parse_double(const std::string& s, std::size_t line_no) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw InputError("line " + std::to_string(line_no) + ": cannot parse number '" + s + "'");
    }
}

inline long parse_long(const std::string& s, std::size_t line_no) {
    try {
        std::size_t used = 0;
        const long v = std::stol(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw InputError("line " + std::to_string(line_no) + ": cannot parse integer '" + s + "'");
    }
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> line_numbers;
};

// Lines starting with '#' are metadata and are skipped.
inline CsvTable read_csv(std::istream& in) {
    CsvTable table;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        auto fields = split_csv(line);
        if (table.header.empty()) {
            table.header = std::move(fields);
            continue;
        }
        if (fields.size() != table.header.size()) {
            throw InputError("line " + std::to_string(line_no) + ": expected " +
                             std::to_string(table.header.size()) + " fields, got " + std::to_string(fields.size()));
        }
        table.rows.push_back(std::move(fields));
        table.line_numbers.push_back(line_no);
    }
    if (table.header.empty()) throw InputError("CSV input has no header row");
    return table;
}

inline std::ifstream open_input(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open '" + path + "'");
    return in;
}

// Shortest round-trip decimal representation.
inline std::string format_double(double v) {
    char buf[32];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

}  // namespace detail

/// Reads "x1,...,xD,task". Bounds come from the data unless supplied.
inline EventDataset read_events_csv(std::istream& in, const std::vector<Interval>& bounds = {}) {
    const auto table = detail::read_csv(in);
    const auto& h = table.header;
    if (h.size() < 2 || h.back() != "task") throw InputError("events header must be x1,...,xD,task");
    const Index D = static_cast<Index>(h.size()) - 1;
    for (Index d = 0; d < D; ++d) {
        if (h[static_cast<std::size_t>(d)] != "x" + std::to_string(d + 1)) {
            throw InputError("events header must be x1,...,xD,task");
        }
    }
    EventDataset ds;
    int max_task = -1;
    std::vector<bool> seen;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        Event ev;
        ev.location.resize(D);
        for (Index d = 0; d < D; ++d) {
            ev.location[d] = detail::parse_double(row[static_cast<std::size_t>(d)], table.line_numbers[r]);
        }
        const long task = detail::parse_long(row.back(), table.line_numbers[r]);
        if (task < 0) throw InputError("line " + std::to_string(table.line_numbers[r]) + ": negative task id");
        ev.task = static_cast<int>(task);
        if (ev.task >= static_cast<int>(seen.size())) seen.resize(static_cast<std::size_t>(ev.task) + 1, false);
        seen[static_cast<std::size_t>(ev.task)] = true;
        max_task = std::max(max_task, ev.task);
        ds.events.push_back(std::move(ev));
    }
    for (std::size_t p = 0; p < seen.size(); ++p) {
        if (!seen[p]) throw InputError("task ids are not dense: task " + std::to_string(p) + " has no events");
    }
    ds.num_tasks = max_task + 1;
    if (!bounds.empty()) {
        if (static_cast<Index>(bounds.size()) != D) throw InputError("supplied bounds do not match dimensionality");
        ds.bounds = bounds;
        for (const auto& ev : ds.events) {
            for (Index d = 0; d < D; ++d) {
                const auto& b = bounds[static_cast<std::size_t>(d)];
                if (ev.location[d] < b.lo || ev.location[d] > b.hi) throw InputError("event outside supplied bounds");
            }
        }
    } else {
        ds.bounds.assign(static_cast<std::size_t>(D),
                         Interval{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()});
        for (const auto& ev : ds.events) {
            for (Index d = 0; d < D; ++d) {
                auto& b = ds.bounds[static_cast<std::size_t>(d)];
                b.lo = std::min(b.lo, ev.location[d]);
                b.hi = std::max(b.hi, ev.location[d]);
            }
        }
    }
    return ds;
}

inline EventDataset load_events_csv(const std::string& path, const std::vector<Interval>& bounds = {}) {
    auto in = detail::open_input(path);
    return read_events_csv(in, bounds);
}

/// Writes one row per (cell, task): cell_id,x1..xD,task,count,observed.
inline void write_count_grid_csv(std::ostream& out, const CountGrid& grid) {
    out << "cell_id";
    for (Index d = 0; d < grid.dim(); ++d) out << ",x" << (d + 1);
    out << ",task,count,observed\n";
    for (Index n = 0; n < grid.num_cells(); ++n) {
        for (Index p = 0; p < grid.num_tasks(); ++p) {
            out << n;
            for (Index d = 0; d < grid.dim(); ++d) out << ',' << detail::format_double(grid.centroids(n, d));
            out << ',' << p << ',' << grid.counts(n, p) << ',' << (grid.observed(n, p) ? 1 : 0) << '\n';
        }
    }
}

namespace detail {

// Recovers a regular grid from the distinct centroid coordinates along each axis.
inline GridSpec infer_grid(const std::vector<std::vector<double>>& coords) {
    GridSpec spec;
    for (const auto& axis : coords) {
        std::vector<double> u = axis;
        std::sort(u.begin(), u.end());
        u.erase(std::unique(u.begin(), u.end(), [](double a, double b) {
                    return std::abs(a - b) <= 1e-9 * std::max({1.0, std::abs(a), std::abs(b)});
                }), u.end());
        const double width = u.size() > 1 ? (u.back() - u.front()) / static_cast<double>(u.size() - 1) : 1.0;
        for (std::size_t i = 1; i < u.size(); ++i) {
            if (std::abs((u[i] - u[i - 1]) - width) > 1e-6 * std::max(1.0, width)) {
                throw InputError("count grid centroids are not regularly spaced");
            }
        }
        spec.cells_per_dim.push_back(static_cast<int>(u.size()));
        spec.bounds.push_back(Interval{u.front() - 0.5 * width, u.back() + 0.5 * width});
    }
    return spec;
}

}  // namespace detail

inline CountGrid read_count_grid_csv(std::istream& in) {
    const auto table = detail::read_csv(in);
    const auto& h = table.header;
    if (h.size() < 5 || h[0] != "cell_id" || h[h.size() - 3] != "task" || h[h.size() - 2] != "count" ||
        h.back() != "observed") {
        throw InputError("count grid header must be cell_id,x1..xD,task,count,observed");
    }
    const std::size_t D = h.size() - 4;
    struct Row { long cell; std::vector<double> x; long task; long count; bool observed; };
    std::vector<Row> rows;
    long max_cell = -1, max_task = -1;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& f = table.rows[r];
        const std::size_t ln = table.line_numbers[r];
        Row row;
        row.cell = detail::parse_long(f[0], ln);
        for (std::size_t d = 0; d < D; ++d) row.x.push_back(detail::parse_double(f[1 + d], ln));
        row.task = detail::parse_long(f[1 + D], ln);
        row.count = detail::parse_long(f[2 + D], ln);
        const long obs = detail::parse_long(f[3 + D], ln);
        if (row.cell < 0 || row.task < 0 || row.count < 0 || (obs != 0 && obs != 1)) {
            throw InputError("line " + std::to_string(ln) + ": invalid count grid row");
        }
        row.observed = obs == 1;
        max_cell = std::max(max_cell, row.cell);
        max_task = std::max(max_task, row.task);
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw InputError("count grid CSV has no rows");
    const Index N = max_cell + 1, P = max_task + 1;
    if (static_cast<Index>(rows.size()) != N * P) throw InputError("count grid CSV must have one row per (cell, task)");
    std::vector<std::vector<double>> coords(D);
    for (const auto& r : rows) {
        for (std::size_t d = 0; d < D; ++d) coords[d].push_back(r.x[d]);
    }
    GridSpec spec = detail::infer_grid(coords);
    if (spec.num_cells() != N) throw InputError("count grid cells do not form a complete regular grid");
    CountGrid grid = make_count_grid(spec, CountMatrix::Zero(N, P));
    BoolArray seen = BoolArray::Constant(N, P, false);
    for (const auto& r : rows) {
        if (seen(r.cell, r.task)) throw InputError("duplicate (cell, task) row in count grid CSV");
        seen(r.cell, r.task) = true;
        for (std::size_t d = 0; d < D; ++d) {
            if (std::abs(grid.centroids(r.cell, static_cast<Index>(d)) - r.x[d]) >
                1e-6 * std::max(1.0, spec.cell_width(d))) {
                throw InputError("cell " + std::to_string(r.cell) + " centroid does not match grid layout");
            }
        }
        grid.counts(r.cell, r.task) = r.count;
        grid.observed(r.cell, r.task) = r.observed;
    }
    return grid;
}

inline CountGrid load_count_grid_csv(const std::string& path) {
    auto in = detail::open_input(path);
    return read_count_grid_csv(in);
}

// ---------------------------------------------------------------------------
// Missing-data folds

/// Equal rectangular subregions, and per fold the subregion hidden for each task.
struct FoldSpec {
    int Z = 0;
    std::vector<int> blocks_per_dim;
    std::vector<std::vector<int>> folds;  // folds[f][p] = masked subregion

    [[nodiscard]] int num_folds() const { return static_cast<int>(folds.size()); }

    [[nodiscard]] int subregion_of(const GridSpec& spec, Index cell) const {
        const auto idx = spec.unravel(cell);
        int sub = 0;
        for (std::size_t d = blocks_per_dim.size(); d-- > 0;) {
            const int block_len = spec.cells_per_dim[d] / blocks_per_dim[d];
            sub = sub * blocks_per_dim[d] + idx[d] / block_len;
        }
        return sub;
    }
};

namespace detail {

inline void factor_blocks(const std::vector<int>& cells, std::size_t d, int remaining, std::vector<int>& cur,
                          std::vector<int>& best, double& best_score, double target) {
    if (d == cells.size()) {
        if (remaining != 1) return;
        double score = 0.0;
        for (int b : cur) score += std::abs(std::log(static_cast<double>(b)) - target);
        if (score < best_score - 1e-12) {
            best_score = score;
            best = cur;
        }
        return;
    }
    for (int b = 1; b <= remaining; ++b) {
        if (remaining % b != 0 || cells[d] % b != 0) continue;
        cur.push_back(b);
        factor_blocks(cells, d + 1, remaining / b, cur, best, best_score, target);
        cur.pop_back();
    }
}

}  // namespace detail

/// Z folds; fold f hides subregion perm[(p + f) mod Z] for task p, so masks are
/// distinct within a fold and every task is hidden on every subregion once.
inline FoldSpec make_folds(const GridSpec& spec, int Z, int P, std::uint64_t seed) {
    spec.validate();
    if (P <= 0) throw InputError("make_folds: task count must be positive");
    if (Z < P) throw InputError("make_folds: need Z >= P so each task gets its own subregion");
    std::vector<int> best, cur;
    double best_score = std::numeric_limits<double>::infinity();
    const double target = std::log(static_cast<double>(Z)) / static_cast<double>(spec.dim());
    detail::factor_blocks(spec.cells_per_dim, 0, Z, cur, best, best_score, target);
    if (best.empty()) {
        throw InputError("make_folds: Z=" + std::to_string(Z) + " does not split the grid into equal rectangular blocks");
    }
    FoldSpec fs;
    fs.Z = Z;
    fs.blocks_per_dim = best;
    std::vector<int> perm(static_cast<std::size_t>(Z));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (int f = 0; f < Z; ++f) {
        std::vector<int> fold(static_cast<std::size_t>(P));
        for (int p = 0; p < P; ++p) fold[static_cast<std::size_t>(p)] = perm[static_cast<std::size_t>((p + f) % Z)];
        fs.folds.push_back(std::move(fold));
    }
    return fs;
}

/// Copy of the grid with fold `fold_id` masked (on top of any existing mask).
inline CountGrid apply_fold(const CountGrid& grid, const FoldSpec& folds, int fold_id) {
    if (fold_id < 0 || fold_id >= folds.num_folds()) throw InputError("fold id out of range");
    const auto& fold = folds.folds[static_cast<std::size_t>(fold_id)];
    if (static_cast<Index>(fold.size()) != grid.num_tasks()) throw InputError("fold task count does not match grid");
    CountGrid out = grid;
    for (Index n = 0; n < grid.num_cells(); ++n) {
        const int sub = folds.subregion_of(grid.spec, n);
        for (Index p = 0; p < grid.num_tasks(); ++p) {
            if (fold[static_cast<std::size_t>(p)] == sub) out.observed(n, p) = false;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct S1Options {
    std::vector<int> cells_per_dim{20, 20};
    std::vector<Interval> bounds{{0.0, 1.0}, {0.0, 1.0}};
    // P x Q mixing matrix; rows are tasks.
    MatrixXd weights = (MatrixXd(4, 2) << 1.0, 0.3,
                                           0.9, -0.5,
                                          -0.8, 0.6,
                                           0.2, 1.0).finished();
    std::vector<double> latent_lengthscales{0.25, 0.2};
    double latent_variance = 1.0;
    VectorXd offsets = VectorXd::Constant(4, 1.0);
    double noise_std = 0.05;
};

struct SyntheticDataset {
    CountGrid grid;
    MatrixXd intensity;  // N x P, noise-free
    MatrixXd weights;    // P x Q
    MatrixXd latents;    // N x Q
};

/// Q latent squared-exponential GPs mixed into P task log intensities; counts are
/// Poisson draws from lambda * exp(eps), eps ~ N(0, noise_std^2).
inline SyntheticDataset generate_s1(std::uint64_t seed, const S1Options& opt = {}) {
    GridSpec spec{opt.cells_per_dim, opt.bounds};
    spec.validate();
    const Index P = opt.weights.rows(), Q = opt.weights.cols();
    if (static_cast<Index>(opt.latent_lengthscales.size()) != Q) throw InputError("S1: one lengthscale per latent");
    if (opt.offsets.size() != P) throw InputError("S1: one offset per task");
    const MatrixXd X = spec.centroids();
    const Index N = X.rows();
    Rng rng(seed);
    SyntheticDataset out;
    out.weights = opt.weights;
    out.latents.resize(N, Q);
    for (Index q = 0; q < Q; ++q) {
        const KernelSpec k = KernelSpec::isotropic(KernelFamily::SquaredExponential, opt.latent_variance,
                                                   opt.latent_lengthscales[static_cast<std::size_t>(q)], spec.dim());
        out.latents.col(q) = sample_mvn(rng, VectorXd::Zero(N), gram(k, X).values);
    }
    const MatrixXd log_lambda = (out.latents * opt.weights.transpose()).rowwise() + opt.offsets.transpose();
    out.intensity = log_lambda.array().exp().matrix();
    CountMatrix counts(N, P);
    for (Index p = 0; p < P; ++p) {
        for (Index n = 0; n < N; ++n) {
            const double eps = opt.noise_std * standard_normal(rng);
            counts(n, p) = poisson_draw(rng, out.intensity(n, p) * std::exp(eps));
        }
    }
    out.grid = make_count_grid(spec, counts);
    return out;
}

/// One-dimensional many-task preset: 100 cells on [0, 100], ten tasks mixing two
/// latents with weights drawn from N(0, 1) under `seed`.
inline S1Options s2_options(std::uint64_t seed, int tasks = 10) {
    if (tasks <= 0) throw InputError("S2: task count must be positive");
    S1Options opt;
    opt.cells_per_dim = {100};
    opt.bounds = {{0.0, 100.0}};
    Rng rng(derive_seed(seed, 0x5332ULL));
    opt.weights.resize(tasks, 2);
    for (Index p = 0; p < tasks; ++p) {
        for (Index q = 0; q < 2; ++q) opt.weights(p, q) = standard_normal(rng);
    }
    opt.latent_lengthscales = {10.0, 25.0};
    opt.offsets = VectorXd::Constant(tasks, 0.5);
    return opt;
}

/// Domain-split holdout: masks every cell whose centroid along `dim` is >= split.
inline CountGrid mask_above(const CountGrid& grid, double split, Index dim = 0) {
    CountGrid out = grid;
    for (Index n = 0; n < grid.num_cells(); ++n) {
        if (grid.centroids(n, dim) >= split) out.observed.row(n).setConstant(false);
    }
    return out;
}

}  // namespace mcpm
