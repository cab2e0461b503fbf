#pragma once

// Glue between an experiment config and the library: dataset synthesis,
// training-row preparation, checkpoint metadata, sampling, likelihood
// scoring, metric assembly, and the preset reproduction loop. The command
// line driver and the acceptance suite both sit on this layer so the two
// cannot drift apart.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fdm/checkpoint.hpp"
#include "fdm/config.hpp"
#include "fdm/datasets.hpp"
#include "fdm/dynamics.hpp"
#include "fdm/eval.hpp"
#include "fdm/events.hpp"
#include "fdm/guidance.hpp"
#include "fdm/mixture.hpp"
#include "fdm/ode.hpp"
#include "fdm/trainer.hpp"

namespace fdm {

// Stream tags for work that happens outside the trainer. Trajectory
// generation derives per-record streams from the dataset seed on its own.
inline constexpr std::uint64_t kSynthDataStream = 0x73796e7468646174ULL;    // "synthdat"
inline constexpr std::uint64_t kModelSampleStream = 0x6d6f64656c73616dULL;  // "modelsam"
inline constexpr std::uint64_t kEvalProbeStream = 0x6576616c70726f62ULL;    // "evalprob"

// The held-out split gets a seed derived by hashing so it cannot alias the
// training data, whatever seed the user picked.
inline std::uint64_t test_split_seed(std::uint64_t seed) {
    return fnv1a64("test-split:" + std::to_string(seed));
}

// ---------------------------------------------------------------------------
// datasets

namespace detail {

inline TrajectoryDataset make_dataset(const ExperimentConfig& cfg, std::size_t count,
                                      std::uint64_t seed) {
    TrajectoryDataset ds;
    if (cfg.data.is_trajectory()) {
        const TrajectorySpec spec = cfg.data.kind == "lorenz" ? lorenz_spec(cfg.data.steps)
                                                              : fhn_spec(cfg.data.steps);
        // the generator tolerance is part of the dataset definition (event
        // rates were calibrated under it); cfg.solver only steers the flow
        ds = generate_trajectories(spec, count, seed);
    } else {
        Rng rng = Rng::stream(seed, kSynthDataStream);
        const Tensor rows = cfg.data.kind == "mix1d"
                                ? sample_mixture_data(mix1d_target(), count, rng)
                                : sample_checkerboard_data(count, rng);
        ds.system = cfg.data.kind;
        ds.count = rows.rows;
        ds.steps = 1;
        ds.dim = rows.cols;
        ds.dt = 0.0;
        ds.data = rows.data;
    }
    ds.seed = seed;
    ds.config_hash = config_hash(cfg);
    return ds;
}

} // namespace detail

inline TrajectoryDataset build_dataset(const ExperimentConfig& cfg) {
    return detail::make_dataset(cfg, cfg.data.count, cfg.seed);
}

inline TrajectoryDataset build_test_dataset(const ExperimentConfig& cfg, std::size_t count) {
    return detail::make_dataset(cfg, count, test_split_seed(cfg.seed));
}

// Training rows in model space: standardized when the config says so,
// otherwise the flat dataset as is.
struct PreparedData {
    Tensor rows;
    Standardizer st;  // identity unless the config standardizes
};

inline PreparedData prepare_rows(const TrajectoryDataset& ds, const ExperimentConfig& cfg) {
    PreparedData p;
    if (cfg.data.standardize) {
        p.st = fit_standardizer(ds);
        p.rows = standardized_rows(ds, p.st);
    } else {
        p.st = Standardizer::identity(ds.dim);
        p.rows = ds.to_tensor();
    }
    return p;
}

// Undo a per-coordinate standardizer on flattened rows. Column c of a
// flattened trajectory holds coordinate c % dim.
inline void destandardize_rows(Tensor& rows, const Standardizer& st) {
    const std::size_t d = st.dim();
    if (d == 0) throw ShapeError("destandardize needs a fitted standardizer");
    for (std::size_t i = 0; i < rows.rows; ++i)
        for (std::size_t c = 0; c < rows.cols; ++c)
            rows.at(i, c) = st.x(rows.at(i, c), c % d);
}

// ---------------------------------------------------------------------------
// training

// The checkpoint meta block carries everything needed to evaluate the model
// later without the original config file: the config identity hash, the
// data-space description, and the standardizer when one was fitted.
inline TrainConfig trainer_config(const ExperimentConfig& cfg, const Standardizer* st = nullptr) {
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    tc.out_dir = cfg.out_dir;
    if (cfg.data.is_trajectory()) {
        tc.weight_steps = cfg.data.steps;
        tc.weight_dim = cfg.data.coord_dim();
    }
    tc.meta["config_hash"] = hash_hex(config_hash(cfg));
    tc.meta["preset"] = cfg.preset;
    tc.meta["dataset"] = cfg.data.kind;
    tc.meta["family"] = cfg.family;
    tc.meta["coord_dim"] = cfg.data.coord_dim();
    tc.meta["record_steps"] = cfg.data.steps;
    if (cfg.data.standardize) {
        if (st == nullptr || st->dim() != cfg.data.coord_dim())
            throw ConfigError("standardizing config needs a fitted standardizer to train");
        tc.meta["standardizer"] = {{"mean", st->mean}, {"sd", st->sd}};
    }
    return tc;
}

inline TrainResult run_training(const ExperimentConfig& cfg, const Tensor& rows,
                                const Standardizer* st = nullptr,
                                const Checkpoint* resume = nullptr) {
    const TrainConfig tc = trainer_config(cfg, st);
    if (!tc.out_dir.empty()) std::filesystem::create_directories(tc.out_dir);
    return train(cfg.model, cfg.make_path(), rows, tc, resume);
}

struct LoadedModel {
    VectorFieldModel model;
    nlohmann::json meta;
    Standardizer st;  // identity when the checkpoint carries none

    bool standardized() const { return meta.contains("standardizer"); }
};

inline LoadedModel load_model(const std::string& file, bool prefer_ema = true) {
    const Checkpoint ck = load_checkpoint(file);
    LoadedModel lm{ck.to_model(prefer_ema), ck.meta, {}};
    const std::size_t coord = lm.meta.value("coord_dim", lm.model.config().dim);
    if (lm.meta.contains("standardizer")) {
        const nlohmann::json& sj = lm.meta.at("standardizer");
        lm.st.mean = sj.at("mean").get<std::vector<double>>();
        lm.st.sd = sj.at("sd").get<std::vector<double>>();
        if (lm.st.dim() != coord || lm.st.sd.size() != coord)
            throw DataError("checkpoint standardizer does not match its coordinate count");
    } else {
        lm.st = Standardizer::identity(coord);
    }
    return lm;
}

// Guards artifact mixing: a dataset or checkpoint produced under one config
// must not silently feed an evaluation under another.
inline void check_artifact_hash(std::uint64_t expect, std::uint64_t got, const std::string& what,
                                bool force) {
    if (force || expect == got) return;
    throw ConfigError(what + " was produced under config " + hash_hex(got) +
                      ", current config is " + hash_hex(expect) + " (use force to override)");
}

// ---------------------------------------------------------------------------
// sampling and likelihood

struct SampleRun {
    Tensor rows;  // kept draws in model space
    std::size_t dropped = 0;
};

inline SampleRun sample_rows(const VectorFieldModel& m, const Path& path, std::size_t n,
                             std::uint64_t seed, const OdeOptions& opt = {}) {
    VectorFieldModel::Workspace ws = m.make_workspace();
    DivField f;
    f.dim = m.config().dim;
    f.value = [&m, &ws](double t, const double* x, double* v) { m.velocity(t, x, v, ws); };
    SampleRun out;
    out.rows = Tensor(n, f.dim);
    std::vector<double> x(f.dim);
    std::size_t kept = 0;
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng = Rng::stream(seed, kModelSampleStream, i);
        try {
            sample_flow(f, path, rng, x, OdeMethod::Dopri5, 100, opt);
        } catch (const NumericError&) {
            ++out.dropped;
            continue;
        }
        std::copy(x.begin(), x.end(), out.rows.ptr() + kept * f.dim);
        ++kept;
    }
    out.rows.rows = kept;
    out.rows.data.resize(kept * f.dim);
    return out;
}

// Exact trace divergence by default; Hutchinson with fixed probes when the
// config asks for it (the only tractable option at trajectory widths).
inline DivField eval_div_field(const VectorFieldModel& m, VectorFieldModel::Workspace& ws,
                               const ExperimentConfig& cfg) {
    if (cfg.eval.hutch_probes == 0) return model_div_field(m, ws);
    Rng prng = Rng::stream(cfg.seed, kEvalProbeStream);
    return model_div_field_probes(
        m, ws, rademacher_probes(m.config().dim, cfg.eval.hutch_probes, prng));
}

inline NllResult model_nll(const VectorFieldModel& m, const Path& path, const Tensor& rows,
                           const ExperimentConfig& cfg) {
    VectorFieldModel::Workspace ws = m.make_workspace();
    const DivField f = eval_div_field(m, ws, cfg);
    if (cfg.eval.nll_rows == 0 || rows.rows <= cfg.eval.nll_rows)
        return mean_nll(f, path, rows, cfg.solver);
    Tensor sub(cfg.eval.nll_rows, rows.cols);
    std::copy(rows.ptr(), rows.ptr() + sub.size(), sub.ptr());
    return mean_nll(f, path, sub, cfg.solver);
}

// ---------------------------------------------------------------------------
// events

inline GuidedSamples run_guided(const VectorFieldModel& m, const Path& path,
                                const EventConstraint& ev, const ExperimentConfig& cfg) {
    VectorFieldModel::Workspace ws = m.make_workspace();
    const VectorField vf = model_vector_field(m, ws);
    return sample_guided(vf, path, constraint_view(ev), cfg.event.count, cfg.event.guidance(),
                         cfg.seed, cfg.solver);
}

// KL between the constraint-value histogram of the dataset's event rows and
// the guided draws, in that order. Finite because the KL floor pads empty
// guided bins.
inline double event_value_kl(const Tensor& data_rows, std::span<const double> guided_c,
                             const EventConstraint& ev, std::size_t bins) {
    if (data_rows.cols != ev.flat_dim())
        throw ShapeError("row width does not match the event constraint");
    std::vector<double> data_c;
    for (std::size_t i = 0; i < data_rows.rows; ++i) {
        std::span<const double> row(data_rows.ptr() + i * data_rows.cols, data_rows.cols);
        const double v = ev.value(row);
        if (v > 0.0) data_c.push_back(v);
    }
    if (data_c.empty()) throw DataError("dataset contains no event rows to compare against");
    return kl_histogram(data_c, guided_c, histogram_over(data_c, guided_c, bins));
}

// ---------------------------------------------------------------------------
// evaluation

// Dataset-level metrics, plus model metrics when a checkpoint is supplied.
// Rows arrive in whatever space the dataset lives in; this routine moves
// everything into model space itself using the checkpoint's standardizer.
inline std::vector<MetricRow> evaluate(const ExperimentConfig& cfg, const TrajectoryDataset& ds,
                                       const LoadedModel* lm = nullptr) {
    std::vector<MetricRow> out;
    out.push_back({"rows", static_cast<double>(ds.count), 0.0, static_cast<std::size_t>(ds.count)});

    const bool trajectory = cfg.data.is_trajectory();
    Tensor data_rows;  // model space
    if (trajectory) {
        const Standardizer* st = nullptr;
        Standardizer fitted;
        if (cfg.data.standardize) {
            if (lm != nullptr && lm->standardized()) {
                st = &lm->st;
            } else {
                fitted = fit_standardizer(ds);
                st = &fitted;
            }
            data_rows = standardized_rows(ds, *st);
        } else {
            data_rows = ds.to_tensor();
        }
        const EventConstraint ev = event_for_system(cfg.data.kind, cfg.data.steps);
        const double rate = event_fraction(data_rows, ev);
        const double se = std::sqrt(std::max(rate * (1.0 - rate), 0.0) /
                                    std::max<std::size_t>(ds.count, 1));
        out.push_back({"event_rate_data", rate, se, static_cast<std::size_t>(ds.count)});
    } else {
        data_rows = ds.to_tensor();
    }

    if (lm == nullptr) return out;

    const Path path = cfg.make_path();
    const VectorFieldModel& m = lm->model;
    if (m.config().dim != data_rows.cols)
        throw ShapeError("checkpoint width does not match the dataset rows");

    if (cfg.data.kind == "mix1d") {
        VectorFieldModel::Workspace ws = m.make_workspace();
        const DivField f = eval_div_field(m, ws, cfg);
        const double tv = tv_density_1d(f, path, mix1d_target(), cfg.eval.grid_lo,
                                        cfg.eval.grid_hi, cfg.eval.grid_n, cfg.solver);
        out.push_back({"tv_density", tv, 0.0, cfg.eval.grid_n});
    }

    // held-out likelihood for every kind; kept small by eval.nll_rows
    {
        const std::size_t want = cfg.eval.nll_rows > 0 ? cfg.eval.nll_rows : 1000;
        TrajectoryDataset test = build_test_dataset(cfg, want);
        const Tensor test_rows =
            cfg.data.standardize ? standardized_rows(test, lm->st) : test.to_tensor();
        const NllResult nll = model_nll(m, path, test_rows, cfg);
        out.push_back({"nll", nll.mean, nll.se, nll.used});
        out.push_back({"nll_failed", static_cast<double>(nll.failed), 0.0, nll.failed});
        if (cfg.data.kind == "checkerboard") {
            // per-point log-likelihood reads more naturally for this target
            out.push_back({"test_loglik", -nll.mean * static_cast<double>(test_rows.cols),
                           nll.se * static_cast<double>(test_rows.cols), nll.used});
        }
    }

    // sample-based comparison against the dataset rows; for the 1D mixture
    // the density-grid TV above already covers this, one solve per sample
    // would only add cost
    if (cfg.data.kind != "mix1d") {
        const SampleRun run = sample_rows(m, path, cfg.eval.samples, cfg.seed, cfg.solver);
        if (run.rows.rows == 0) throw NumericError("every evaluation sample diverged");
        out.push_back({"sample_dropped", static_cast<double>(run.dropped), 0.0, run.dropped});
        out.push_back({"marginal_tv", mean_marginal_tv(run.rows, data_rows, cfg.eval.bins), 0.0,
                       run.rows.rows});
        if (trajectory) {
            const EventConstraint ev = event_for_system(cfg.data.kind, cfg.data.steps);
            const double rate = event_fraction(run.rows, ev);
            const double se = std::sqrt(std::max(rate * (1.0 - rate), 0.0) /
                                        std::max<std::size_t>(run.rows.rows, 1));
            out.push_back({"event_rate_model", rate, se, run.rows.rows});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// preset reproduction

struct ReproResult {
    std::string preset;
    std::vector<MetricRow> summary;
    std::string table;  // human-readable rendition of the same numbers
};

namespace detail {

inline double median3(double a, double b, double c) {
    return std::max(std::min(a, b), std::min(std::max(a, b), c));
}

// One trained arm of a reproduction run: tv/nll-style headline metrics keyed
// by the preset kind.
struct ArmScore {
    double primary = 0.0;  // tv_density, test_loglik, or marginal_tv
    double nll = 0.0;
};

} // namespace detail

// Trains the preset's comparison arms (velocity matching alone vs the
// divergence-augmented objective) over three seeds, evaluates both, and for
// the trajectory presets also measures event-guided sampling on the
// augmented arm. Artifacts land under out_root/<preset>/seed<k>/<arm>/.
inline ReproResult run_repro(const std::string& preset, std::uint64_t base_seed,
                             const std::string& out_root,
                             const std::function<void(const std::string&)>& log = {}) {
    const auto say = [&log](const std::string& s) {
        if (log) log(s);
    };
    ExperimentConfig base = preset_config(preset);
    base.seed = base_seed;

    ReproResult res;
    res.preset = preset;
    const bool trajectory = base.data.is_trajectory();
    const bool mix = base.data.kind == "mix1d";
    const bool board = base.data.kind == "checkerboard";

    // primary metric per arm and seed; lower_wins tells the table how to read
    double primary[2][3] = {};
    double nll[2][3] = {};
    const bool lower_wins = !board;

    for (int k = 0; k < 3; ++k) {
        ExperimentConfig cfg = base;
        cfg.seed = base_seed + static_cast<std::uint64_t>(k);

        const TrajectoryDataset ds = detail::make_dataset(cfg, cfg.data.count, cfg.seed);
        const PreparedData prep = prepare_rows(ds, cfg);

        for (int arm = 0; arm < 2; ++arm) {
            ExperimentConfig run = cfg;
            run.train.loss = arm == 0 ? LossSpec{CdmVariant::None, 1.0, 0.0}
                                      : base.train.loss;
            run.out_dir = out_root + "/" + preset + "/seed" + std::to_string(k) +
                          (arm == 0 ? "/fm" : "/fdm");
            say("training " + run.out_dir);
            const TrainResult tr =
                run_training(run, prep.rows, cfg.data.standardize ? &prep.st : nullptr);

            const LoadedModel lm = load_model(run.out_dir + "/final.fdm", true);
            const std::vector<MetricRow> rows = evaluate(run, ds, &lm);
            write_metrics_csv(run.out_dir + "/metrics_eval.csv", rows, config_hash(run));
            for (const MetricRow& r : rows) {
                if (r.name == "tv_density" && mix) primary[arm][k] = r.value;
                if (r.name == "test_loglik" && board) primary[arm][k] = r.value;
                if (r.name == "marginal_tv" && trajectory) primary[arm][k] = r.value;
                if (r.name == "nll") nll[arm][k] = r.value;
            }
            say("  steps " + std::to_string(tr.steps_run) + ", primary " +
                std::to_string(primary[arm][k]));
        }
    }

    const char* metric_name = mix ? "tv" : board ? "loglik" : "marginal_tv";
    int wins = 0, nll_wins = 0;
    for (int k = 0; k < 3; ++k) {
        const bool w = lower_wins ? primary[1][k] <= primary[0][k] : primary[1][k] >= primary[0][k];
        wins += w ? 1 : 0;
        nll_wins += nll[1][k] <= nll[0][k] ? 1 : 0;
        res.summary.push_back({std::string(metric_name) + "_fm_seed" + std::to_string(k),
                               primary[0][k], 0.0, 1});
        res.summary.push_back({std::string(metric_name) + "_fdm_seed" + std::to_string(k),
                               primary[1][k], 0.0, 1});
    }
    res.summary.push_back({std::string(metric_name) + "_fm",
                           detail::median3(primary[0][0], primary[0][1], primary[0][2]), 0.0, 3});
    res.summary.push_back({std::string(metric_name) + "_fdm",
                           detail::median3(primary[1][0], primary[1][1], primary[1][2]), 0.0, 3});
    res.summary.push_back({"wins_fdm", static_cast<double>(wins), 0.0, 3});
    if (trajectory || mix) {
        res.summary.push_back(
            {"nll_fm", detail::median3(nll[0][0], nll[0][1], nll[0][2]), 0.0, 3});
        res.summary.push_back(
            {"nll_fdm", detail::median3(nll[1][0], nll[1][1], nll[1][2]), 0.0, 3});
        res.summary.push_back({"nll_wins_fdm", static_cast<double>(nll_wins), 0.0, 3});
    }

    // guided sampling on the augmented arm of the base seed
    if (trajectory) {
        ExperimentConfig cfg = base;
        cfg.out_dir = out_root + "/" + preset + "/seed0/fdm";
        say("guided sampling " + cfg.out_dir);
        const LoadedModel lm = load_model(cfg.out_dir + "/final.fdm", true);
        const Path path = cfg.make_path();
        const EventConstraint ev = event_for_system(cfg.data.kind, cfg.data.steps);

        const TrajectoryDataset ds = detail::make_dataset(cfg, cfg.data.count, cfg.seed);
        const Tensor data_rows =
            cfg.data.standardize ? standardized_rows(ds, lm.st) : ds.to_tensor();

        const SampleRun plain = sample_rows(lm.model, path, cfg.event.count, cfg.seed, cfg.solver);
        const GuidedSamples guided = run_guided(lm.model, path, ev, cfg);
        if (guided.rows.rows == 0) throw NumericError("every guided sample diverged");
        const double rate0 = event_fraction(plain.rows, ev);
        const double rate1 = event_fraction(guided.rows, ev);
        res.summary.push_back({"event_rate_data", event_fraction(data_rows, ev), 0.0,
                               static_cast<std::size_t>(ds.count)});
        res.summary.push_back({"event_rate_unguided", rate0, 0.0, plain.rows.rows});
        res.summary.push_back({"event_rate_guided", rate1, 0.0, guided.rows.rows});
        res.summary.push_back(
            {"event_kl", event_value_kl(data_rows, guided.c_values, ev, cfg.eval.bins), 0.0,
             guided.rows.rows});
    }

    // human summary
    std::ostringstream tb;
    tb << "preset " << preset << " (seeds " << base_seed << ".." << base_seed + 2 << ")\n";
    tb << "  desk scale: directional comparisons only; full-scale benchmark\n"
       << "  tables are not reproducible at this budget.\n";
    tb << "  " << metric_name << " per seed, velocity-only vs divergence-matched:\n";
    for (int k = 0; k < 3; ++k) {
        tb << "    seed" << k << ":  " << primary[0][k] << "  vs  " << primary[1][k] << "\n";
    }
    for (const MetricRow& r : res.summary) {
        if (r.name.find("seed") != std::string::npos) continue;
        tb << "  " << r.name << " = " << r.value;
        if (r.name == "event_kl") {
            tb << (preset == "lorenz" ? "  (full-scale reference 0.3045)"
                                      : "  (full-scale reference 0.2084)");
        }
        tb << "\n";
    }
    res.table = tb.str();
    return res;
}

} // namespace fdm
