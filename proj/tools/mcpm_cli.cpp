// SPDX-License-Identifier: Apache-2.0
// mcpm command-line front end: simulate, fit, predict, evaluate.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <Eigen/Core>

#include "CLI11.hpp"
#include "json.hpp"

#include "mcpm/mcpm.hpp"

namespace fs = std::filesystem;
using mcpm::Json;

namespace {

enum ExitCode { kOk = 0, kGeneric = 1, kInput = 2, kNumerical = 3, kConvergence = 4 };

std::ofstream open_output(const std::string& path) {
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw mcpm::InputError("cannot write '" + path + "'");
    return out;
}

// Every CSV we emit starts with the tool version and the resolved configuration.
void write_provenance(std::ostream& out, const Json& config) {
    out << "# mcpm " << mcpm::kVersion << '\n' << "# config " << config.dump() << '\n';
}

void write_json_file(const std::string& path, const Json& j) {
    auto out = open_output(path);
    out << j.dump(2) << '\n';
}

mcpm::CountGrid apply_masks(const mcpm::CountGrid& grid, const Json& run) {
    mcpm::CountGrid out = grid;
    if (!run.at("fold").is_null()) {
        const auto folds = mcpm::make_folds(grid.spec, run.at("folds").get<int>(),
                                            static_cast<int>(grid.num_tasks()), run.at("fold_seed").get<std::uint64_t>());
        out = mcpm::apply_fold(out, folds, run.at("fold").get<int>());
    }
    if (!run.at("split").is_null()) out = mcpm::mask_above(out, run.at("split").get<double>(), 0);
    return out;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
    std::string preset;
    std::string out;
    std::string config;
    int q = 2;
    int p = 3;
    int cells = 20;
    int dim = 2;
    double offset = 1.0;
};

int cmd_simulate(const SimulateArgs& a, std::uint64_t seed) {
    mcpm::CountGrid grid;
    mcpm::MatrixXd intensity, weights;
    Json generator;
    if (a.preset == "s1" || a.preset == "s2") {
        const mcpm::S1Options opt = a.preset == "s1" ? mcpm::S1Options{} : mcpm::s2_options(seed);
        auto ds = mcpm::generate_s1(seed, opt);
        grid = std::move(ds.grid);
        intensity = std::move(ds.intensity);
        weights = std::move(ds.weights);
        generator = Json{{"cells_per_dim", opt.cells_per_dim},
                         {"latent_lengthscales", opt.latent_lengthscales},
                         {"latent_variance", opt.latent_variance},
                         {"noise_std", opt.noise_std},
                         {"offsets", mcpm::detail::to_json(opt.offsets)}};
    } else if (a.preset == "prior") {
        if (a.q <= 0 || a.p <= 0 || a.cells <= 0 || a.dim <= 0) throw mcpm::InputError("q, p, cells and dim must be positive");
        mcpm::ModelConfig mc;
        mc.Q = a.q;
        mc.latent_kernel = mcpm::KernelSpec::isotropic(mcpm::KernelFamily::SquaredExponential, 1.0, 0.2, a.dim);
        if (!a.config.empty()) {
            const Json j = mcpm::parse_json_file(a.config);
            mc = mcpm::model_config_from_json(j.contains("model") ? j.at("model") : j, mc);
        }
        mc.P = a.p;
        if (mc.mode == mcpm::BaselineMode::Lgcp) mc.Q = mc.P;
        mcpm::GridSpec spec{std::vector<int>(static_cast<std::size_t>(a.dim), a.cells),
                            std::vector<mcpm::Interval>(static_cast<std::size_t>(a.dim), mcpm::Interval{0.0, 1.0})};
        mcpm::PriorSampleOptions so;
        so.offsets = mcpm::VectorXd::Constant(a.p, a.offset);
        auto [g, sample] = mcpm::sample_prior_grid(mc, spec, seed, so);
        grid = std::move(g);
        intensity = std::move(sample.intensity);
        weights = std::move(sample.weights);
        mc.normalize();
        generator = Json{{"model", mcpm::model_config_to_json(mc)}, {"offset", a.offset}, {"cells_per_dim", spec.cells_per_dim}};
    } else {
        throw mcpm::InputError("unknown preset '" + a.preset + "' (expected s1|prior|s2)");
    }

    const Json config{{"command", "simulate"},
                      {"preset", a.preset},
                      {"seed", seed},
                      {"version", mcpm::kVersion},
                      {"generator", generator},
                      {"weights", mcpm::detail::to_json(weights)}};
    fs::create_directories(a.out);
    const fs::path dir(a.out);
    {
        auto out = open_output((dir / "counts.csv").string());
        write_provenance(out, config);
        mcpm::write_count_grid_csv(out, grid);
    }
    {
        auto out = open_output((dir / "truth.csv").string());
        write_provenance(out, config);
        out << "cell_id";
        for (mcpm::Index d = 0; d < grid.dim(); ++d) out << ",x" << (d + 1);
        out << ",task,intensity\n";
        for (mcpm::Index n = 0; n < grid.num_cells(); ++n) {
            for (mcpm::Index p = 0; p < grid.num_tasks(); ++p) {
                out << n;
                for (mcpm::Index d = 0; d < grid.dim(); ++d) out << ',' << mcpm::detail::format_double(grid.centroids(n, d));
                out << ',' << p << ',' << mcpm::detail::format_double(intensity(n, p)) << '\n';
            }
        }
    }
    write_json_file((dir / "config.json").string(), config);
    std::cout << Json{{"cells", grid.num_cells()}, {"tasks", grid.num_tasks()}, {"out", a.out}}.dump() << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------

struct FitArgs {
    std::string counts;
    std::string config;
    std::string out;
    std::string trace;
    std::optional<std::string> mode;
    std::optional<std::string> weight_prior;
    std::optional<std::string> kernel;
    std::optional<int> q;
    std::optional<int> m;
    std::optional<int> epochs;
    std::optional<double> lr;
    std::optional<int> batch_size;
    std::optional<int> restarts;
    std::optional<int> fold;
    int folds = 4;
    std::optional<std::uint64_t> fold_seed;
    std::optional<double> split;
    int checkpoint_every = 0;
    bool timing = false;
};

int cmd_fit(const FitArgs& a, std::optional<std::uint64_t> seed) {
    mcpm::RunConfig rc;
    if (!a.config.empty()) rc = mcpm::run_config_from_json(mcpm::parse_json_file(a.config));
    if (a.mode) rc.model.mode = mcpm::baseline_mode_from_string(*a.mode);
    if (a.weight_prior) rc.model.weight_prior = mcpm::weight_prior_from_string(*a.weight_prior);
    if (a.kernel) rc.model.latent_kernel.family = mcpm::kernel_family_from_string(*a.kernel);
    if (a.q) rc.model.Q = *a.q;
    if (a.m) rc.model.M = *a.m;
    if (a.epochs) rc.train.epochs = *a.epochs;
    if (a.lr) rc.train.learning_rate = *a.lr;
    if (a.batch_size) rc.train.batch_size = *a.batch_size;
    if (a.restarts) rc.train.restarts = *a.restarts;
    if (seed) rc.train.seed = *seed;
    if (a.checkpoint_every > 0) rc.train.checkpoint_every = a.checkpoint_every;
    rc.train.record_timing = a.timing;

    const Json run{{"fold", a.fold ? Json(*a.fold) : Json(nullptr)},
                   {"folds", a.folds},
                   {"fold_seed", a.fold_seed.value_or(rc.train.seed)},
                   {"split", a.split ? Json(*a.split) : Json(nullptr)}};
    const mcpm::CountGrid grid = apply_masks(mcpm::load_count_grid_csv(a.counts), run);

    const Json resolved{{"command", "fit"}, {"run", run}, {"config", mcpm::run_config_to_json(rc)}, {"version", mcpm::kVersion}};
    auto write_ckpt = [&](const std::string& path, const mcpm::VariationalState& state, const Json& extra) {
        Json doc = mcpm::state_to_json(state);
        doc["run"] = run;
        doc["train"] = mcpm::train_config_to_json(rc.train);
        doc["summary"] = extra;
        auto out = open_output(path);
        out << mcpm::kCheckpointMagic << '\n' << doc.dump(2) << '\n';
    };
    const mcpm::CheckpointHook hook = [&](int epoch, const mcpm::VariationalState& s) {
        write_ckpt(a.out + ".epoch" + std::to_string(epoch), s, Json{{"epoch", epoch}});
    };
    const auto result = mcpm::fit(rc.model, rc.train, grid, hook);
    const auto& tr = result.trace;
    const Json summary{{"initial_elbo", tr.initial_elbo},
                       {"final_elbo", tr.elbo.empty() ? tr.initial_elbo : tr.elbo.back()},
                       {"best_epoch", tr.best_epoch},
                       {"epochs", tr.epochs()},
                       {"converged", tr.converged},
                       {"rejected_steps", tr.rejected_steps},
                       {"skipped_batches", tr.skipped_batches},
                       {"restart", tr.restart}};
    write_ckpt(a.out, result.state, summary);
    if (!a.trace.empty()) {
        auto out = open_output(a.trace);
        write_provenance(out, resolved);
        mcpm::write_trace_csv(out, tr);
    }
    std::cout << summary.dump() << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------

struct PredictArgs {
    std::string checkpoint;
    std::string counts;
    std::string points;
    std::string out;
    long samples = 1000;
};

mcpm::MatrixXd read_points_csv(const std::string& path, mcpm::Index dim) {
    auto in = mcpm::detail::open_input(path);
    const auto table = mcpm::detail::read_csv(in);
    if (static_cast<mcpm::Index>(table.header.size()) != dim) {
        throw mcpm::InputError("points CSV must have columns x1..x" + std::to_string(dim));
    }
    mcpm::MatrixXd X(static_cast<mcpm::Index>(table.rows.size()), dim);
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        for (mcpm::Index d = 0; d < dim; ++d) {
            X(static_cast<mcpm::Index>(r), d) =
                mcpm::detail::parse_double(table.rows[r][static_cast<std::size_t>(d)], table.line_numbers[r]);
        }
    }
    if (X.rows() == 0) throw mcpm::InputError("points CSV has no rows");
    return X;
}

int cmd_predict(const PredictArgs& a, std::uint64_t seed) {
    const auto state = mcpm::load_checkpoint(a.checkpoint);
    const mcpm::Index D = state.latents.front().inducing.cols();
    mcpm::MatrixXd X;
    if (!a.points.empty()) {
        X = read_points_csv(a.points, D);
    } else if (!a.counts.empty()) {
        X = mcpm::load_count_grid_csv(a.counts).centroids;
    } else {
        throw mcpm::InputError("predict needs --counts (grid centroids) or --points");
    }
    std::vector<mcpm::Index> ids(static_cast<std::size_t>(X.rows()));
    for (mcpm::Index n = 0; n < X.rows(); ++n) ids[static_cast<std::size_t>(n)] = n;
    const auto surface = mcpm::predict_surface(state, X, ids, mcpm::SurfaceOptions{a.samples, seed});
    const Json config{{"command", "predict"},
                      {"model", mcpm::model_config_to_json(state.config)},
                      {"samples", a.samples},
                      {"seed", seed},
                      {"sampled_variance_entries", surface.moments.sampled_entries},
                      {"floored_variance_entries", surface.moments.floored}};
    auto out = open_output(a.out);
    write_provenance(out, config);
    mcpm::write_surface_csv(out, surface);
    std::cout << Json{{"points", X.rows()}, {"tasks", state.P()}, {"sampled_variance_entries", surface.moments.sampled_entries}}
                     .dump()
              << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
    std::string checkpoint;
    std::string counts;
    std::string out;
    std::string cells = "all";
    std::string normalizer = "cells";
    std::optional<int> fold;
    std::optional<int> folds;
    std::optional<std::uint64_t> fold_seed;
    std::optional<double> split;
    bool no_fold = false;
    long samples = 1000;
    int regions = 100;
    int region_cells = 4;
    double level = 0.9;
};

int cmd_evaluate(const EvaluateArgs& a, std::uint64_t seed) {
    std::ifstream in(a.checkpoint, std::ios::binary);
    if (!in) throw mcpm::InputError("cannot open checkpoint '" + a.checkpoint + "'");
    std::string magic;
    if (!std::getline(in, magic) || magic != mcpm::kCheckpointMagic) throw mcpm::InputError("checkpoint: bad magic header");
    Json doc;
    try {
        doc = Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw mcpm::InputError(std::string("checkpoint: ") + e.what());
    }
    const auto state = mcpm::state_from_json(doc);
    Json run = doc.contains("run") ? doc.at("run")
                                   : Json{{"fold", nullptr}, {"folds", 4}, {"fold_seed", 0}, {"split", nullptr}};
    if (a.no_fold) run["fold"] = nullptr;
    if (a.fold) run["fold"] = *a.fold;
    if (a.folds) run["folds"] = *a.folds;
    if (a.fold_seed) run["fold_seed"] = *a.fold_seed;
    if (a.split) run["split"] = *a.split;
    const mcpm::CountGrid grid = apply_masks(mcpm::load_count_grid_csv(a.counts), run);

    mcpm::EvalOptions opt;
    opt.cells = mcpm::cell_selection_from_string(a.cells);
    if (a.normalizer == "cells") opt.normalizer = mcpm::NlplNormalizer::Cells;
    else if (a.normalizer == "events") opt.normalizer = mcpm::NlplNormalizer::Events;
    else throw mcpm::InputError("unknown normalizer '" + a.normalizer + "' (expected cells|events)");
    opt.nlpl_samples = a.samples;
    opt.coverage.subregions = a.regions;
    opt.coverage.region_cells = a.region_cells;
    opt.coverage.level = a.level;
    opt.coverage.samples = a.samples;
    opt.seed = seed;
    auto report = mcpm::evaluate(state, grid, opt);
    if (!run.at("fold").is_null()) report.fold_id = run.at("fold").get<int>();
    const Json echo{{"command", "evaluate"},
                    {"model", mcpm::model_config_to_json(state.config)},
                    {"run", run},
                    {"cells", a.cells},
                    {"normalizer", a.normalizer},
                    {"samples", a.samples},
                    {"regions", a.regions},
                    {"region_cells", a.region_cells},
                    {"level", a.level}};
    const Json j = mcpm::report_to_json(report, echo);
    if (a.out.empty()) {
        std::cout << j.dump(2) << '\n';
    } else {
        write_json_file(a.out, j);
    }
    return kOk;
}

void report_error(const char* kind, const std::exception& e) {
    std::cerr << Json{{"error", kind}, {"message", e.what()}}.dump(-1, ' ', false, Json::error_handler_t::replace) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-task Cox process networks: simulate, fit, predict, evaluate"};
    app.set_version_flag("--version", std::string(mcpm::kVersion));
    app.require_subcommand(1);
    std::uint64_t seed = 0;
    int threads = 1;
    app.add_option("--seed", seed, "Random seed")->capture_default_str();
    app.add_option("--threads", threads, "Upper bound on worker threads")->check(CLI::PositiveNumber)->capture_default_str();

    SimulateArgs sim;
    auto* s = app.add_subcommand("simulate", "Generate a synthetic count grid");
    s->add_option("--preset", sim.preset, "s1 | prior | s2")->required();
    s->add_option("--out", sim.out, "Output directory")->required();
    s->add_option("--q", sim.q, "Latent functions (prior preset)");
    s->add_option("--p", sim.p, "Tasks (prior preset)");
    s->add_option("--cells", sim.cells, "Cells per dimension (prior preset)");
    s->add_option("--dim", sim.dim, "Input dimension (prior preset)");
    s->add_option("--offset", sim.offset, "Log-intensity offset for every task (prior preset)");
    s->add_option("--config", sim.config, "Model config JSON for the prior preset");
    s->add_option("--seed", seed, "Random seed");

    FitArgs fit;
    auto* f = app.add_subcommand("fit", "Train a model on a count grid");
    f->add_option("--counts", fit.counts, "Count grid CSV")->required();
    f->add_option("--config", fit.config, "Run config JSON ({\"model\":…, \"train\":…})");
    f->add_option("--out", fit.out, "Checkpoint path")->required();
    f->add_option("--trace", fit.trace, "Per-epoch trace CSV");
    f->add_option("--mode", fit.mode, "mcpm | lgcp | icm-limit");
    f->add_option("--weight-prior", fit.weight_prior, "independent | coupled");
    f->add_option("--kernel", fit.kernel, "squared_exponential | matern32");
    f->add_option("--q", fit.q, "Latent functions");
    f->add_option("--m", fit.m, "Inducing points per latent");
    f->add_option("--epochs", fit.epochs, "Training epochs");
    f->add_option("--lr", fit.lr, "Learning rate");
    f->add_option("--restarts", fit.restarts, "Random initializations screened before training")->check(CLI::PositiveNumber);
    f->add_option("--batch-size", fit.batch_size, "Cells per minibatch (0 = full batch)");
    f->add_option("--fold", fit.fold, "Mask this fold before training");
    f->add_option("--folds", fit.folds, "Number of subregions Z")->capture_default_str();
    f->add_option("--fold-seed", fit.fold_seed, "Seed of the fold permutation (default: training seed)");
    f->add_option("--split", fit.split, "Mask cells with x1 >= split");
    f->add_option("--checkpoint-every", fit.checkpoint_every, "Write an intermediate checkpoint every K epochs");
    f->add_flag("--timing", fit.timing, "Record wall-clock seconds in the trace");
    std::optional<std::uint64_t> fit_seed;
    f->add_option("--seed", fit_seed, "Random seed");

    PredictArgs pred;
    auto* p = app.add_subcommand("predict", "Write an intensity surface");
    p->add_option("--checkpoint", pred.checkpoint, "Checkpoint path")->required();
    p->add_option("--counts", pred.counts, "Count grid CSV whose centroids are predicted");
    p->add_option("--points", pred.points, "CSV of x1..xD points to predict at");
    p->add_option("--out", pred.out, "Surface CSV")->required();
    p->add_option("--samples", pred.samples, "Predictive samples per cell for the 90% band")->capture_default_str();
    p->add_option("--seed", seed, "Random seed");

    EvaluateArgs ev;
    auto* e = app.add_subcommand("evaluate", "Compute RMSE, NLPL and coverage");
    e->add_option("--checkpoint", ev.checkpoint, "Checkpoint path")->required();
    e->add_option("--counts", ev.counts, "Count grid CSV")->required();
    e->add_option("--out", ev.out, "Report JSON (stdout if omitted)");
    e->add_option("--cells", ev.cells, "observed | missing | all")->capture_default_str();
    e->add_option("--normalizer", ev.normalizer, "NLPL normalizer: cells | events")->capture_default_str();
    e->add_option("--fold", ev.fold, "Fold to mask (default: the one used for training)");
    e->add_flag("--no-fold", ev.no_fold, "Ignore the training fold");
    e->add_option("--folds", ev.folds, "Number of subregions Z");
    e->add_option("--fold-seed", ev.fold_seed, "Seed of the fold permutation");
    e->add_option("--split", ev.split, "Mask cells with x1 >= split");
    e->add_option("--samples", ev.samples, "Posterior samples")->capture_default_str();
    e->add_option("--regions", ev.regions, "Random subregions L for coverage")->capture_default_str();
    e->add_option("--region-cells", ev.region_cells, "Cells per coverage subregion")->capture_default_str();
    e->add_option("--level", ev.level, "Credible level for coverage")->capture_default_str();
    e->add_option("--seed", seed, "Random seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kOk : kInput;
    }
    Eigen::setNbThreads(threads);

    try {
        if (*s) return cmd_simulate(sim, seed);
        if (*f) return cmd_fit(fit, fit_seed ? fit_seed : (app.count("--seed") ? std::optional(seed) : std::nullopt));
        if (*p) return cmd_predict(pred, seed);
        if (*e) return cmd_evaluate(ev, seed);
    } catch (const mcpm::InputError& err) {
        report_error("input", err);
        return kInput;
    } catch (const mcpm::NumericalError& err) {
        report_error("numerical", err);
        return kNumerical;
    } catch (const mcpm::ConvergenceError& err) {
        report_error("convergence", err);
        return kConvergence;
    } catch (const fs::filesystem_error& err) {
        report_error("input", err);
        return kInput;
    } catch (const std::exception& err) {
        report_error("internal", err);
        return kGeneric;
    }
    return kGeneric;
}
