#pragma once

// Experiment configuration. One JSON document describes a whole run: the
// dataset to generate, the probability path, the model, training, the
// solver, evaluation, and event guidance. Every artifact a command writes
// carries the FNV-1a hash of this document so downstream commands can refuse
// mismatched pairs. The output directory is deliberately left out of the
// hash: moving results around does not change what they are.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "fdm/errors.hpp"
#include "fdm/guidance.hpp"
#include "fdm/losses.hpp"
#include "fdm/model.hpp"
#include "fdm/ode.hpp"
#include "fdm/paths.hpp"
#include "fdm/trainer.hpp"

namespace fdm {

struct DataBlock {
    std::string kind = "mix1d";  // mix1d | checkerboard | lorenz | fhn
    std::size_t count = 10000;   // samples, or trajectories for the dynamics kinds
    std::size_t steps = 60;      // recorded steps per trajectory
    bool standardize = false;    // train in per-coordinate z-scores

    bool is_trajectory() const { return kind == "lorenz" || kind == "fhn"; }

    std::size_t coord_dim() const {
        if (kind == "mix1d") return 1;
        if (kind == "checkerboard") return 2;
        if (kind == "lorenz") return 3;
        if (kind == "fhn") return 4;
        throw ConfigError("unknown dataset kind '" + kind + "'");
    }

    // width of one training row (trajectories are flattened)
    std::size_t flat_dim() const { return is_trajectory() ? steps * coord_dim() : coord_dim(); }

    void validate() const {
        coord_dim();
        if (count == 0) throw ConfigError("dataset count must be positive");
        if (is_trajectory() && steps == 0) throw ConfigError("trajectory steps must be positive");
    }
};

struct EvalBlock {
    std::size_t bins = 200;   // histogram resolution for TV/KL
    double grid_lo = -5.0;    // 1D density grid for tv_density_1d
    double grid_hi = 5.0;
    std::size_t grid_n = 2000;
    std::size_t samples = 10000;   // model draws for sample-based metrics
    std::size_t nll_rows = 0;      // cap on rows scored by likelihood; 0 scores all
    std::size_t hutch_probes = 0;  // likelihood divergence probes; 0 uses the exact trace

    void validate() const {
        if (bins < 2) throw ConfigError("eval bins must be at least 2");
        if (!(grid_lo < grid_hi)) throw ConfigError("eval grid range is empty");
        if (grid_n < 16) throw ConfigError("eval grid is too coarse");
        if (samples == 0) throw ConfigError("eval needs at least one sample");
    }
};

struct EventBlock {
    double scale = 1.0;
    std::string cov = "full-tweedie";
    double clip = 1e3;
    std::size_t count = 500;  // guided draws

    GuidanceConfig guidance() const {
        GuidanceConfig g;
        g.scale = scale;
        g.cov = cov_mode_from_name(cov);
        g.clip = clip;
        g.validate();
        return g;
    }

    void validate() const { guidance(); }
};

struct ExperimentConfig {
    std::string preset = "custom";
    DataBlock data;
    std::string family = "vp";  // probability path family
    PathParams path;
    ModelConfig model;  // dim is derived from the data block, not configured
    TrainConfig train;  // out_dir/meta/seed filled in by the command layer
    OdeOptions solver;
    EvalBlock eval;
    EventBlock event;
    std::string out_dir = "out";
    std::uint64_t seed = 1;

    void validate() const {
        data.validate();
        family_from_name(family);
        eval.validate();
        event.validate();
        if (model.hidden.empty()) throw ConfigError("model needs at least one hidden layer");
        if (train.batch_size == 0) throw ConfigError("train batch size must be positive");
        if (train.epochs == 0) throw ConfigError("train epochs must be positive");
        if (!(train.lr > 0.0)) throw ConfigError("learning rate must be positive");
        if (!(solver.atol > 0.0) || !(solver.rtol > 0.0))
            throw ConfigError("solver tolerances must be positive");
    }

    Path make_path() const { return Path(family_from_name(family), data.flat_dim(), path); }
};

namespace detail {

// Strict block reader: every key must be known, so typos fail loudly
// instead of silently keeping a default.
class BlockReader {
  public:
    BlockReader(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) throw ConfigError("config block '" + name_ + "' must be an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.push_back(key);
        if (!j_.contains(key)) return;
        const nlohmann::json& v = j_.at(key);
        // json happily folds -5 into an unsigned field, so reject signs here
        if constexpr (std::is_unsigned_v<T>) {
            if (v.is_number_integer() && !v.is_number_unsigned())
                throw ConfigError("config key '" + name_ + "." + key + "' must not be negative");
        }
        try {
            out = v.get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("config key '" + name_ + "." + key + "' has the wrong type");
        }
    }

    const nlohmann::json* block(const char* key) {
        seen_.push_back(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    ~BlockReader() noexcept(false) {
        if (std::uncaught_exceptions()) return;
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            bool known = false;
            for (const char* k : seen_) known = known || it.key() == k;
            if (!known)
                throw ConfigError("unknown config key '" + name_ + "." + it.key() + "'");
        }
    }

  private:
    const nlohmann::json& j_;
    std::string name_;
    std::vector<const char*> seen_;
};

} // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["preset"] = c.preset;
    j["seed"] = c.seed;
    j["out"] = c.out_dir;
    j["data"] = {{"kind", c.data.kind},
                 {"count", c.data.count},
                 {"steps", c.data.steps},
                 {"standardize", c.data.standardize}};
    j["path"] = {{"family", c.family},
                 {"sigma_min", c.path.sigma_min},
                 {"beta_min", c.path.beta_min},
                 {"beta_max", c.path.beta_max},
                 {"ve_sigma_a", c.path.ve_sigma_a},
                 {"ve_sigma_b", c.path.ve_sigma_b},
                 {"clip_delta", c.path.clip_delta}};
    j["model"] = {{"hidden", c.model.hidden},
                  {"activation", ad::act_name(c.model.activation)},
                  {"time_freqs", c.model.time_freqs}};
    j["loss"] = {{"variant", variant_name(c.train.loss.variant)},
                 {"lambda_cfm", c.train.loss.lambda_cfm},
                 {"lambda_cdm", c.train.loss.lambda_cdm},
                 {"probes", c.train.probes}};
    j["train"] = {{"epochs", c.train.epochs},
                  {"batch", c.train.batch_size},
                  {"lr", c.train.lr},
                  {"schedule", schedule_name(c.train.schedule)},
                  {"ema", c.train.ema_decay},
                  {"log_every", c.train.log_every},
                  {"checkpoint_every", c.train.checkpoint_every}};
    j["solver"] = {{"atol", c.solver.atol},
                   {"rtol", c.solver.rtol},
                   {"max_steps", c.solver.max_steps}};
    j["eval"] = {{"bins", c.eval.bins},
                 {"grid_lo", c.eval.grid_lo},
                 {"grid_hi", c.eval.grid_hi},
                 {"grid_n", c.eval.grid_n},
                 {"samples", c.eval.samples},
                 {"nll_rows", c.eval.nll_rows},
                 {"hutch_probes", c.eval.hutch_probes}};
    j["event"] = {{"scale", c.event.scale},
                  {"cov", c.event.cov},
                  {"clip", c.event.clip},
                  {"count", c.event.count}};
    return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    detail::BlockReader top(j, "config");
    top.get("preset", c.preset);
    top.get("seed", c.seed);
    top.get("out", c.out_dir);

    if (const nlohmann::json* b = top.block("data")) {
        detail::BlockReader r(*b, "data");
        r.get("kind", c.data.kind);
        r.get("count", c.data.count);
        r.get("steps", c.data.steps);
        r.get("standardize", c.data.standardize);
    }
    if (const nlohmann::json* b = top.block("path")) {
        detail::BlockReader r(*b, "path");
        r.get("family", c.family);
        r.get("sigma_min", c.path.sigma_min);
        r.get("beta_min", c.path.beta_min);
        r.get("beta_max", c.path.beta_max);
        r.get("ve_sigma_a", c.path.ve_sigma_a);
        r.get("ve_sigma_b", c.path.ve_sigma_b);
        r.get("clip_delta", c.path.clip_delta);
    }
    if (const nlohmann::json* b = top.block("model")) {
        detail::BlockReader r(*b, "model");
        r.get("hidden", c.model.hidden);
        std::string act = ad::act_name(c.model.activation);
        r.get("activation", act);
        c.model.activation = ad::act_from_name(act);
        r.get("time_freqs", c.model.time_freqs);
    }
    if (const nlohmann::json* b = top.block("loss")) {
        detail::BlockReader r(*b, "loss");
        std::string variant = variant_name(c.train.loss.variant);
        r.get("variant", variant);
        c.train.loss.variant = variant_from_name(variant);
        r.get("lambda_cfm", c.train.loss.lambda_cfm);
        r.get("lambda_cdm", c.train.loss.lambda_cdm);
        r.get("probes", c.train.probes);
    }
    if (const nlohmann::json* b = top.block("train")) {
        detail::BlockReader r(*b, "train");
        r.get("epochs", c.train.epochs);
        r.get("batch", c.train.batch_size);
        r.get("lr", c.train.lr);
        std::string sched = schedule_name(c.train.schedule);
        r.get("schedule", sched);
        c.train.schedule = schedule_from_name(sched);
        r.get("ema", c.train.ema_decay);
        r.get("log_every", c.train.log_every);
        r.get("checkpoint_every", c.train.checkpoint_every);
    }
    if (const nlohmann::json* b = top.block("solver")) {
        detail::BlockReader r(*b, "solver");
        r.get("atol", c.solver.atol);
        r.get("rtol", c.solver.rtol);
        r.get("max_steps", c.solver.max_steps);
    }
    if (const nlohmann::json* b = top.block("eval")) {
        detail::BlockReader r(*b, "eval");
        r.get("bins", c.eval.bins);
        r.get("grid_lo", c.eval.grid_lo);
        r.get("grid_hi", c.eval.grid_hi);
        r.get("grid_n", c.eval.grid_n);
        r.get("samples", c.eval.samples);
        r.get("nll_rows", c.eval.nll_rows);
        r.get("hutch_probes", c.eval.hutch_probes);
    }
    if (const nlohmann::json* b = top.block("event")) {
        detail::BlockReader r(*b, "event");
        r.get("scale", c.event.scale);
        r.get("cov", c.event.cov);
        r.get("clip", c.event.clip);
        r.get("count", c.event.count);
    }

    c.model.dim = c.data.flat_dim();
    c.validate();
    return c;
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

// Hash of the canonical (key-sorted) dump, output directory excluded.
inline std::uint64_t config_hash(const ExperimentConfig& c) {
    nlohmann::json j = to_json(c);
    j.erase("out");
    return fnv1a64(j.dump());
}

inline std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline ExperimentConfig load_config(const std::string& file) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open config file " + file);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + file + " is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

inline void save_config(const std::string& file, const ExperimentConfig& c) {
    std::ofstream out(file);
    if (!out) throw IoError("cannot write config file " + file);
    out << to_json(c).dump(2) << "\n";
    if (!out) throw IoError("failed writing config file " + file);
}

// Environment may override exactly two things: the seed and the output
// directory. Everything else changes the experiment's identity and has to
// come through the config file or an explicit flag.
inline void apply_env_overrides(ExperimentConfig& c) {
    if (const char* s = std::getenv("FDM_SEED")) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(s, &end, 10);
        if (end == s || *end != '\0') throw ConfigError("FDM_SEED must be an integer");
        c.seed = v;
    }
    if (const char* o = std::getenv("FDM_OUT")) {
        if (*o == '\0') throw ConfigError("FDM_OUT must not be empty");
        c.out_dir = o;
    }
}

// Reference experiments at desk scale. The dynamics presets keep the source
// systems' training hyperparameters but run on 4,000 trajectories for 200
// epochs instead of 32,000 for 2,000; directional comparisons survive that
// reduction, absolute benchmark tables do not.
inline ExperimentConfig preset_config(const std::string& name) {
    ExperimentConfig c;
    c.preset = name;
    if (name == "mix1d") {
        c.data = {"mix1d", 10000, 60, false};
        c.family = "vp";
        c.model.hidden = {64, 64, 64};
        c.train.loss = {CdmVariant::Abs, 1.0, 0.2};
        // the narrow modes (sd 0.1) need the annealed tail of the poly
        // schedule; constant-lr runs plateau near tv 0.2
        c.train.epochs = 180;
        c.train.batch_size = 128;
        c.train.lr = 1e-3;
        c.train.schedule = LrSchedule::Poly;
        c.train.ema_decay = 0.995;
        c.eval.grid_lo = -5.0;
        c.eval.grid_hi = 5.0;
        c.eval.grid_n = 512;
        c.solver.atol = 1e-6;
        c.solver.rtol = 1e-4;
        c.out_dir = "out/mix1d";
    } else if (name == "checkerboard") {
        c.data = {"checkerboard", 100000, 60, false};
        c.family = "ot";
        c.model.hidden = {64, 64, 64};
        c.train.loss = {CdmVariant::Abs, 1.0, 0.2};
        // 195 steps per epoch x 103 epochs is the 2e4-iteration budget
        c.train.epochs = 103;
        c.train.batch_size = 512;
        c.train.lr = 7e-4;
        c.train.ema_decay = 0.999;
        c.eval.grid_lo = -4.0;
        c.eval.grid_hi = 4.0;
        c.eval.samples = 2000;
        c.eval.nll_rows = 1024;
        c.solver.atol = 1e-6;
        c.solver.rtol = 1e-4;
        c.out_dir = "out/checkerboard";
    } else if (name == "lorenz") {
        c.data = {"lorenz", 4000, 60, false};
        c.family = "ve";
        c.model.hidden = {128, 128};
        c.train.loss = {CdmVariant::Abs, 1.0, 0.000385};
        c.train.epochs = 200;
        c.train.batch_size = 500;
        c.train.lr = 0.000796;
        c.train.schedule = LrSchedule::ExpEpoch;
        c.train.ema_decay = 0.995;
        c.eval.grid_lo = -3.0;
        c.eval.grid_hi = 3.0;
        c.eval.samples = 2000;
        c.eval.nll_rows = 128;
        c.eval.hutch_probes = 8;
        c.solver.atol = 1e-6;
        c.solver.rtol = 1e-4;
        c.out_dir = "out/lorenz";
    } else if (name == "fhn") {
        c.data = {"fhn", 4000, 60, true};
        c.family = "ve";
        c.model.hidden = {128, 128};
        c.train.loss = {CdmVariant::Abs, 1.0, 0.00552};
        c.train.epochs = 200;
        c.train.batch_size = 500;
        c.train.lr = 0.000245;
        c.train.schedule = LrSchedule::ExpEpoch;
        c.train.ema_decay = 0.995;
        c.eval.grid_lo = -3.0;
        c.eval.grid_hi = 3.0;
        c.eval.samples = 2000;
        c.eval.nll_rows = 128;
        c.eval.hutch_probes = 8;
        c.solver.atol = 1e-6;
        c.solver.rtol = 1e-4;
        c.out_dir = "out/fhn";
    } else {
        throw ConfigError("unknown preset '" + name + "' (want mix1d|checkerboard|lorenz|fhn)");
    }
    c.model.dim = c.data.flat_dim();
    c.validate();
    return c;
}

} // namespace fdm
