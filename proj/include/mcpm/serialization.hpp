// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>

#include <Eigen/Dense>

#include "json.hpp"

#include "mcpm/errors.hpp"
#include "mcpm/kernels.hpp"
#include "mcpm/metrics.hpp"
#include "mcpm/model.hpp"
#include "mcpm/trainer.hpp"

#ifndef MCPM_VERSION
#define MCPM_VERSION "0.0.0"
#endif

namespace mcpm {

using Json = nlohmann::json;

inline constexpr const char* kVersion = MCPM_VERSION;
inline constexpr const char* kCheckpointMagic = "MCPM1";

namespace detail {

inline Json to_json(const VectorXd& v) {
    Json a = Json::array();
    for (Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

inline Json to_json(const MatrixXd& m) {
    Json a = Json::array();
    for (Index i = 0; i < m.rows(); ++i) a.push_back(to_json(VectorXd(m.row(i).transpose())));
    return a;
}

inline double json_number(const Json& j, const std::string& what) {
    if (!j.is_number()) throw InputError(what + ": expected a number");
    return j.get<double>();
}

inline VectorXd vector_from_json(const Json& j, const std::string& what) {
    if (!j.is_array()) throw InputError(what + ": expected an array");
    VectorXd v(static_cast<Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Index>(i)] = json_number(j[i], what);
    return v;
}

inline MatrixXd matrix_from_json(const Json& j, const std::string& what) {
    if (!j.is_array()) throw InputError(what + ": expected an array of rows");
    if (j.empty()) return MatrixXd(0, 0);
    const std::size_t cols = j[0].is_array() ? j[0].size() : 0;
    MatrixXd m(static_cast<Index>(j.size()), static_cast<Index>(cols));
    for (std::size_t r = 0; r < j.size(); ++r) {
        if (!j[r].is_array() || j[r].size() != cols) throw InputError(what + ": ragged matrix");
        for (std::size_t c = 0; c < cols; ++c) m(static_cast<Index>(r), static_cast<Index>(c)) = json_number(j[r][c], what);
    }
    return m;
}

inline void reject_unknown(const Json& j, std::initializer_list<const char*> keys, const std::string& where) {
    if (!j.is_object()) throw InputError(where + ": expected an object");
    const std::set<std::string> allowed(keys.begin(), keys.end());
    for (const auto& [k, _] : j.items()) {
        if (!allowed.count(k)) throw InputError(where + ": unknown key '" + k + "'");
    }
}

template <class T>
void read_if(const Json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw InputError(std::string("config key '") + key + "' has the wrong type");
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Configuration

inline Json kernel_to_json(const KernelSpec& k) {
    return Json{{"family", std::string(to_string(k.family))},
                {"variance", k.variance},
                {"lengthscales", detail::to_json(k.lengthscales)}};
}

inline KernelSpec kernel_from_json(const Json& j, KernelSpec k = {}) {
    detail::reject_unknown(j, {"family", "variance", "lengthscales"}, "kernel");
    if (j.contains("family")) k.family = kernel_family_from_string(j.at("family").get<std::string>());
    detail::read_if(j, "variance", k.variance);
    if (j.contains("lengthscales")) {
        const auto& l = j.at("lengthscales");
        k.lengthscales = l.is_number() ? VectorXd::Constant(1, l.get<double>()) : detail::vector_from_json(l, "lengthscales");
    }
    return k;
}

inline Json model_config_to_json(const ModelConfig& c) {
    Json j{{"Q", c.Q},
           {"P", c.P},
           {"M", c.M},
           {"inducing_fraction", c.inducing_fraction},
           {"latent_kernel", kernel_to_json(c.latent_kernel)},
           {"weight_prior", std::string(to_string(c.weight_prior))},
           {"offsets_init", std::string(to_string(c.offsets_init))},
           {"mode", std::string(to_string(c.mode))},
           {"learn_inducing", c.learn_inducing},
           {"base_jitter", c.base_jitter}};
    if (c.prior_means.size()) j["prior_means"] = detail::to_json(c.prior_means);
    if (c.prior_vars.size()) j["prior_vars"] = detail::to_json(c.prior_vars);
    if (c.task_descriptors.size()) {
        j["task_descriptors"] = detail::to_json(c.task_descriptors);
        j["weight_kernel"] = kernel_to_json(c.weight_kernel);
    }
    return j;
}

inline ModelConfig model_config_from_json(const Json& j, ModelConfig c = {}) {
    detail::reject_unknown(j,
                           {"Q", "P", "M", "inducing_fraction", "latent_kernel", "weight_prior", "prior_means", "prior_vars",
                            "task_descriptors", "weight_kernel", "offsets_init", "mode", "learn_inducing", "base_jitter"},
                           "model config");
    detail::read_if(j, "Q", c.Q);
    detail::read_if(j, "P", c.P);
    detail::read_if(j, "M", c.M);
    detail::read_if(j, "inducing_fraction", c.inducing_fraction);
    if (j.contains("latent_kernel")) c.latent_kernel = kernel_from_json(j.at("latent_kernel"), c.latent_kernel);
    if (j.contains("weight_prior")) c.weight_prior = weight_prior_from_string(j.at("weight_prior").get<std::string>());
    if (j.contains("prior_means")) c.prior_means = detail::matrix_from_json(j.at("prior_means"), "prior_means");
    if (j.contains("prior_vars")) c.prior_vars = detail::matrix_from_json(j.at("prior_vars"), "prior_vars");
    if (j.contains("task_descriptors")) {
        c.task_descriptors = detail::matrix_from_json(j.at("task_descriptors"), "task_descriptors");
    }
    if (j.contains("weight_kernel")) c.weight_kernel = kernel_from_json(j.at("weight_kernel"), c.weight_kernel);
    if (j.contains("offsets_init")) c.offsets_init = offset_init_from_string(j.at("offsets_init").get<std::string>());
    if (j.contains("mode")) c.mode = baseline_mode_from_string(j.at("mode").get<std::string>());
    detail::read_if(j, "learn_inducing", c.learn_inducing);
    detail::read_if(j, "base_jitter", c.base_jitter);
    return c;
}

inline Json train_config_to_json(const TrainConfig& t) {
    return Json{{"learning_rate", t.learning_rate},
                {"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"optimizer", t.optimizer == Optimizer::Adam ? "adam" : "sgd"},
                {"adam_beta1", t.adam_beta1},
                {"adam_beta2", t.adam_beta2},
                {"adam_eps", t.adam_eps},
                {"seed", t.seed},
                {"convergence_tol", t.convergence_tol},
                {"convergence_window", t.convergence_window},
                {"max_halvings", t.max_halvings},
                {"checkpoint_every", t.checkpoint_every},
                {"whiten_updates", t.whiten_updates},
                {"restarts", t.restarts},
                {"restart_epochs", t.restart_epochs}};
}

inline TrainConfig train_config_from_json(const Json& j, TrainConfig t = {}) {
    detail::reject_unknown(j,
                           {"learning_rate", "epochs", "batch_size", "optimizer", "adam_beta1", "adam_beta2", "adam_eps",
                            "seed", "convergence_tol", "convergence_window", "max_halvings", "checkpoint_every",
                            "whiten_updates", "restarts", "restart_epochs"},
                           "train config");
    detail::read_if(j, "learning_rate", t.learning_rate);
    detail::read_if(j, "epochs", t.epochs);
    detail::read_if(j, "batch_size", t.batch_size);
    if (j.contains("optimizer")) {
        const auto name = j.at("optimizer").get<std::string>();
        if (name == "adam") t.optimizer = Optimizer::Adam;
        else if (name == "sgd") t.optimizer = Optimizer::Sgd;
        else throw InputError("unknown optimizer '" + name + "' (expected adam|sgd)");
    }
    detail::read_if(j, "adam_beta1", t.adam_beta1);
    detail::read_if(j, "adam_beta2", t.adam_beta2);
    detail::read_if(j, "adam_eps", t.adam_eps);
    detail::read_if(j, "seed", t.seed);
    detail::read_if(j, "convergence_tol", t.convergence_tol);
    detail::read_if(j, "convergence_window", t.convergence_window);
    detail::read_if(j, "max_halvings", t.max_halvings);
    detail::read_if(j, "checkpoint_every", t.checkpoint_every);
    detail::read_if(j, "whiten_updates", t.whiten_updates);
    detail::read_if(j, "restarts", t.restarts);
    detail::read_if(j, "restart_epochs", t.restart_epochs);
    return t;
}

/// Top-level run configuration file: {"model": {...}, "train": {...}}.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
};

inline Json run_config_to_json(const RunConfig& r) {
    return Json{{"model", model_config_to_json(r.model)}, {"train", train_config_to_json(r.train)}};
}

inline RunConfig run_config_from_json(const Json& j, RunConfig r = {}) {
    detail::reject_unknown(j, {"model", "train"}, "config");
    if (j.contains("model")) r.model = model_config_from_json(j.at("model"), r.model);
    if (j.contains("train")) r.train = train_config_from_json(j.at("train"), r.train);
    return r;
}

inline Json parse_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open '" + path + "'");
    try {
        return Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw InputError("'" + path + "' is not valid JSON: " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

inline Json state_to_json(const VariationalState& s) {
    Json latents = Json::array();
    for (const auto& l : s.latents) {
        Json j{{"log_variance", l.log_variance},
               {"log_lengthscales", detail::to_json(l.log_lengthscales)},
               {"inducing", detail::to_json(l.inducing)},
               {"u_mean", detail::to_json(l.u_mean)},
               {"u_factor_raw", detail::to_json(l.u_factor_raw)},
               {"w_mean", detail::to_json(l.w_mean)}};
        if (l.w_log_var.size()) j["w_log_var"] = detail::to_json(l.w_log_var);
        if (l.w_factor_raw.size()) {
            j["w_factor_raw"] = detail::to_json(l.w_factor_raw);
            j["w_log_variance"] = l.w_log_variance;
            j["w_log_lengthscales"] = detail::to_json(l.w_log_lengthscales);
        }
        latents.push_back(std::move(j));
    }
    return Json{{"format", "mcpm-checkpoint"},
                {"version", kVersion},
                {"seed", s.seed},
                {"config", model_config_to_json(s.config)},
                {"offsets", detail::to_json(s.offsets)},
                {"latents", std::move(latents)}};
}

inline VariationalState state_from_json(const Json& j) {
    if (!j.is_object() || j.value("format", "") != "mcpm-checkpoint") throw InputError("not a checkpoint document");
    VariationalState s;
    try {
        s.seed = j.at("seed").get<std::uint64_t>();
        s.config = model_config_from_json(j.at("config"));
        s.offsets = detail::vector_from_json(j.at("offsets"), "offsets");
        for (const auto& lj : j.at("latents")) {
            LatentState l;
            l.log_variance = lj.at("log_variance").get<double>();
            l.log_lengthscales = detail::vector_from_json(lj.at("log_lengthscales"), "log_lengthscales");
            l.inducing = detail::matrix_from_json(lj.at("inducing"), "inducing");
            l.u_mean = detail::vector_from_json(lj.at("u_mean"), "u_mean");
            l.u_factor_raw = detail::matrix_from_json(lj.at("u_factor_raw"), "u_factor_raw");
            l.w_mean = detail::vector_from_json(lj.at("w_mean"), "w_mean");
            if (lj.contains("w_log_var")) l.w_log_var = detail::vector_from_json(lj.at("w_log_var"), "w_log_var");
            if (lj.contains("w_factor_raw")) {
                l.w_factor_raw = detail::matrix_from_json(lj.at("w_factor_raw"), "w_factor_raw");
                l.w_log_variance = lj.at("w_log_variance").get<double>();
                l.w_log_lengthscales = detail::vector_from_json(lj.at("w_log_lengthscales"), "w_log_lengthscales");
            }
            s.latents.push_back(std::move(l));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed checkpoint: ") + e.what());
    }
    if (static_cast<Index>(s.latents.size()) != s.config.Q || s.offsets.size() != s.config.P) {
        throw InputError("malformed checkpoint: shapes disagree with the embedded config");
    }
    return s;
}

inline void write_checkpoint(std::ostream& out, const VariationalState& s) {
    out << kCheckpointMagic << '\n' << state_to_json(s).dump(2) << '\n';
}

inline VariationalState read_checkpoint(std::istream& in) {
    std::string magic;
    if (!std::getline(in, magic) || magic != kCheckpointMagic) throw InputError("checkpoint: bad magic header");
    try {
        return state_from_json(Json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw InputError(std::string("checkpoint: ") + e.what());
    }
}

inline void save_checkpoint(const std::string& path, const VariationalState& s) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write '" + path + "'");
    write_checkpoint(out, s);
}

inline VariationalState load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open checkpoint '" + path + "'");
    return read_checkpoint(in);
}

// ---------------------------------------------------------------------------
// Evaluation report

inline Json report_to_json(const EvalReport& r, const Json& config_echo = Json::object()) {
    auto num = [](double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); };
    auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
    Json tasks = Json::object();
    for (std::size_t p = 0; p < r.tasks.size(); ++p) {
        const auto& t = r.tasks[p];
        tasks[std::to_string(p)] = Json{{"cells", t.cells},
                                        {"rmse", num(t.rmse)},
                                        {"nlpl", num(t.nlpl)},
                                        {"ec_in", opt(t.ec_in)},
                                        {"ec_out", opt(t.ec_out)}};
    }
    return Json{{"tasks", std::move(tasks)},
                {"fold_id", r.fold_id ? Json(*r.fold_id) : Json(nullptr)},
                {"seed", r.seed},
                {"config", config_echo},
                {"version", kVersion}};
}

}  // namespace mcpm
