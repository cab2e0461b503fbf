// Command line driver. One subcommand per process; the real work lives in
// the pipeline header so the test suites exercise exactly the code that
// ships here. Exit codes: 2 config, 3 data, 4 numeric, 5 io, and the last
// stderr line is a single machine-parseable diagnostic.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "fdm/pipeline.hpp"

namespace {

using namespace fdm;

struct Options {
    std::string config_file;
    std::string preset;
    std::string out;
    std::string data_file;
    std::string model_file;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::size_t count = 0;
    int threads = 1;
    bool force = false;
    bool csv = false;
    bool raw_params = false;
};

void add_common(CLI::App* c, Options& o) {
    c->add_option("--config", o.config_file, "experiment config (json)");
    c->add_option("--preset", o.preset, "built-in config: mix1d|checkerboard|lorenz|fhn");
    auto* s = c->add_option("--seed", o.seed, "override the experiment seed");
    c->callback([&o, s] { o.seed_set = o.seed_set || s->count() > 0; });
    c->add_option("--out", o.out, "override the output directory");
    c->add_option("--threads", o.threads, "accepted for interface stability; math runs on one")
        ->check(CLI::PositiveNumber);
    c->add_flag("--force", o.force, "skip artifact hash checks");
}

// precedence: config file < environment < flags
ExperimentConfig resolve(const Options& o) {
    if (!o.config_file.empty() && !o.preset.empty())
        throw ConfigError("pass either --config or --preset, not both");
    if (o.config_file.empty() && o.preset.empty())
        throw ConfigError("need --config or --preset to know what to run");
    ExperimentConfig cfg =
        o.config_file.empty() ? preset_config(o.preset) : load_config(o.config_file);
    apply_env_overrides(cfg);
    if (o.seed_set) cfg.seed = o.seed;
    if (!o.out.empty()) cfg.out_dir = o.out;
    cfg.validate();
    return cfg;
}

std::string join(const ExperimentConfig& cfg, const char* leaf) {
    return cfg.out_dir + "/" + leaf;
}

void start_out_dir(const ExperimentConfig& cfg) {
    std::filesystem::create_directories(cfg.out_dir);
    save_config(join(cfg, "config.json"), cfg);
}

void check_model_hash(const ExperimentConfig& cfg, const LoadedModel& lm, bool force) {
    const std::string got = lm.meta.value("config_hash", std::string());
    if (got.empty()) return;  // hand-rolled checkpoint, nothing to compare
    if (!force && got != hash_hex(config_hash(cfg)))
        throw ConfigError("checkpoint was trained under config " + got + ", current config is " +
                          hash_hex(config_hash(cfg)) + " (use --force to override)");
}

TrajectoryDataset load_input_dataset(const ExperimentConfig& cfg, const Options& o) {
    const std::string file = o.data_file.empty() ? join(cfg, "data.bin") : o.data_file;
    TrajectoryDataset ds = load_dataset(file);
    check_artifact_hash(config_hash(cfg), ds.config_hash, "dataset " + file, o.force);
    return ds;
}

// wraps flat rows (already in data space) in the dataset container
TrajectoryDataset rows_as_dataset(const ExperimentConfig& cfg, const Tensor& rows) {
    TrajectoryDataset ds;
    ds.system = cfg.data.kind;
    ds.count = rows.rows;
    ds.steps = cfg.data.is_trajectory() ? cfg.data.steps : 1;
    ds.dim = cfg.data.coord_dim();
    ds.dt = cfg.data.kind == "lorenz" ? lorenz_spec().dt
            : cfg.data.kind == "fhn"  ? fhn_spec().dt
                                      : 0.0;
    ds.seed = cfg.seed;
    ds.config_hash = config_hash(cfg);
    ds.data = rows.data;
    return ds;
}

int cmd_gen_data(const Options& o) {
    const ExperimentConfig cfg = resolve(o);
    start_out_dir(cfg);
    const TrajectoryDataset ds = build_dataset(cfg);
    save_dataset(join(cfg, "data.bin"), ds);
    if (o.csv) export_dataset_csv(join(cfg, "data.csv"), ds);
    std::cout << "wrote " << join(cfg, "data.bin") << ": " << ds.count << " records, config "
              << hash_hex(ds.config_hash) << "\n";
    return 0;
}

int cmd_train(const Options& o) {
    const ExperimentConfig cfg = resolve(o);
    start_out_dir(cfg);
    TrajectoryDataset ds;
    if (o.data_file.empty() && !std::filesystem::exists(join(cfg, "data.bin"))) {
        std::cout << "no dataset on disk, generating in memory\n";
        ds = build_dataset(cfg);
    } else {
        ds = load_input_dataset(cfg, o);
    }
    const PreparedData prep = prepare_rows(ds, cfg);
    const TrainResult tr =
        run_training(cfg, prep.rows, cfg.data.standardize ? &prep.st : nullptr);
    std::cout << "trained " << tr.steps_run << " steps (" << tr.skipped
              << " skipped), final losses cfm " << tr.final_cfm << " cdm " << tr.final_cdm
              << " total " << tr.final_fdm << "\n"
              << "checkpoint " << join(cfg, "final.fdm") << "\n";
    return 0;
}

int cmd_sample(const Options& o) {
    const ExperimentConfig cfg = resolve(o);
    start_out_dir(cfg);
    const std::string file = o.model_file.empty() ? join(cfg, "final.fdm") : o.model_file;
    const LoadedModel lm = load_model(file, !o.raw_params);
    check_model_hash(cfg, lm, o.force);
    const std::size_t n = o.count > 0 ? o.count : cfg.eval.samples;
    SampleRun run = sample_rows(lm.model, cfg.make_path(), n, cfg.seed, cfg.solver);
    if (cfg.data.standardize) destandardize_rows(run.rows, lm.st);
    const TrajectoryDataset out = rows_as_dataset(cfg, run.rows);
    save_dataset(join(cfg, "samples.bin"), out);
    if (o.csv) export_dataset_csv(join(cfg, "samples.csv"), out);
    std::cout << "wrote " << join(cfg, "samples.bin") << ": " << out.count << " rows kept, "
              << run.dropped << " dropped\n";
    return 0;
}

int cmd_likelihood(const Options& o) {
    const ExperimentConfig cfg = resolve(o);
    start_out_dir(cfg);
    const std::string file = o.model_file.empty() ? join(cfg, "final.fdm") : o.model_file;
    const LoadedModel lm = load_model(file, !o.raw_params);
    check_model_hash(cfg, lm, o.force);

    Tensor rows;
    if (!o.data_file.empty()) {
        const TrajectoryDataset ds = load_input_dataset(cfg, o);
        rows = cfg.data.standardize ? standardized_rows(ds, lm.st) : ds.to_tensor();
    } else {
        const std::size_t want = cfg.eval.nll_rows > 0 ? cfg.eval.nll_rows : 1000;
        const TrajectoryDataset ds = build_test_dataset(cfg, want);
        rows = cfg.data.standardize ? standardized_rows(ds, lm.st) : ds.to_tensor();
    }
    const NllResult r = model_nll(lm.model, cfg.make_path(), rows, cfg);
    write_metrics_csv(join(cfg, "likelihood.csv"),
                      {{"nll", r.mean, r.se, r.used},
                       {"nll_failed", static_cast<double>(r.failed), 0.0, r.failed}},
                      config_hash(cfg));
    std::cout << "nll " << r.mean << " se " << r.se << " rows " << r.used << " failed "
              << r.failed << "\n";
    return 0;
}

int cmd_guided_sample(const Options& o) {
    const ExperimentConfig cfg = resolve(o);
    start_out_dir(cfg);
    const std::string file = o.model_file.empty() ? join(cfg, "final.fdm") : o.model_file;
    const LoadedModel lm = load_model(file, !o.raw_params);
    check_model_hash(cfg, lm, o.force);
    const EventConstraint ev = event_for_system(cfg.data.kind, cfg.data.steps);
    GuidedSamples g = run_guided(lm.model, cfg.make_path(), ev, cfg);
    const double rate = event_fraction(g.rows, ev);
    if (cfg.data.standardize) destandardize_rows(g.rows, lm.st);
    save_dataset(join(cfg, "guided.bin"), rows_as_dataset(cfg, g.rows));
    write_constraint_csv(join(cfg, "guided_c.csv"), g.c_values);
    std::cout << "wrote " << join(cfg, "guided.bin") << ": " << g.rows.rows << " rows kept, "
              << g.dropped << " dropped, event fraction " << rate << "\n";
    return 0;
}

int cmd_eval(const Options& o) {
    const ExperimentConfig cfg = resolve(o);
    start_out_dir(cfg);
    const TrajectoryDataset ds = load_input_dataset(cfg, o);
    std::vector<MetricRow> rows;
    if (!o.model_file.empty() || std::filesystem::exists(join(cfg, "final.fdm"))) {
        const std::string file = o.model_file.empty() ? join(cfg, "final.fdm") : o.model_file;
        const LoadedModel lm = load_model(file, !o.raw_params);
        check_model_hash(cfg, lm, o.force);
        rows = evaluate(cfg, ds, &lm);
    } else {
        rows = evaluate(cfg, ds, nullptr);
    }
    write_metrics_csv(join(cfg, "eval.csv"), rows, config_hash(cfg));
    for (const MetricRow& r : rows) {
        std::cout << r.name << " = " << r.value;
        if (r.se > 0.0) std::cout << " +- " << r.se;
        std::cout << " (n=" << r.n << ")\n";
    }
    return 0;
}

int cmd_repro(const Options& o, const std::string& positional) {
    std::string preset = !positional.empty() ? positional : o.preset;
    if (preset.empty()) throw ConfigError("repro needs a preset name");
    ExperimentConfig base = preset_config(preset);  // validates the name
    base.out_dir = "out/repro";
    apply_env_overrides(base);
    if (o.seed_set) base.seed = o.seed;
    if (!o.out.empty()) base.out_dir = o.out;

    const ReproResult res = run_repro(preset, base.seed, base.out_dir, [](const std::string& s) {
        std::cerr << s << "\n";
    });
    const std::string dir = base.out_dir + "/" + preset;
    std::filesystem::create_directories(dir);
    write_metrics_csv(dir + "/summary.csv", res.summary, config_hash(base));
    std::ofstream txt(dir + "/summary.txt");
    txt << res.table;
    if (!txt) throw IoError("failed writing " + dir + "/summary.txt");
    std::cout << res.table;
    return 0;
}

int fail(const char* category, int code, const std::string& msg) {
    std::cerr << "fdm: error category=" << category << " message=\"" << msg << "\"\n";
    return code;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"flow matching toolkit: density paths, divergence-matched training,\n"
                 "likelihoods, and event-guided sampling"};
    app.require_subcommand(1);
    Options o;
    std::string repro_preset;

    CLI::App* gen = app.add_subcommand("gen-data", "synthesize a dataset");
    add_common(gen, o);
    gen->add_flag("--csv", o.csv, "also export rows as csv");

    CLI::App* tr = app.add_subcommand("train", "train a model on a dataset");
    add_common(tr, o);
    tr->add_option("--data", o.data_file, "dataset file (default <out>/data.bin)");

    CLI::App* sa = app.add_subcommand("sample", "draw from a trained flow");
    add_common(sa, o);
    sa->add_option("--model", o.model_file, "checkpoint (default <out>/final.fdm)");
    sa->add_option("-n,--count", o.count, "number of draws (default eval.samples)");
    sa->add_flag("--csv", o.csv, "also export rows as csv");
    sa->add_flag("--raw", o.raw_params, "use raw weights instead of the EMA");

    CLI::App* li = app.add_subcommand("likelihood", "score rows under a trained flow");
    add_common(li, o);
    li->add_option("--model", o.model_file, "checkpoint (default <out>/final.fdm)");
    li->add_option("--data", o.data_file, "rows to score (default: fresh held-out split)");
    li->add_flag("--raw", o.raw_params, "use raw weights instead of the EMA");

    CLI::App* gu = app.add_subcommand("guided-sample", "draw with event guidance");
    add_common(gu, o);
    gu->add_option("--model", o.model_file, "checkpoint (default <out>/final.fdm)");
    gu->add_flag("--raw", o.raw_params, "use raw weights instead of the EMA");

    CLI::App* ev = app.add_subcommand("eval", "metrics for a dataset and optional model");
    add_common(ev, o);
    ev->add_option("--data", o.data_file, "dataset file (default <out>/data.bin)");
    ev->add_option("--model", o.model_file, "checkpoint (default <out>/final.fdm if present)");
    ev->add_flag("--raw", o.raw_params, "use raw weights instead of the EMA");

    CLI::App* re = app.add_subcommand("repro", "run a preset end to end and summarize");
    add_common(re, o);
    re->add_option("name", repro_preset, "mix1d|checkerboard|lorenz|fhn");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen_data(o);
        if (tr->parsed()) return cmd_train(o);
        if (sa->parsed()) return cmd_sample(o);
        if (li->parsed()) return cmd_likelihood(o);
        if (gu->parsed()) return cmd_guided_sample(o);
        if (ev->parsed()) return cmd_eval(o);
        if (re->parsed()) return cmd_repro(o, repro_preset);
        return 2;  // unreachable: a subcommand is required
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        return fail("config", 2, e.what());
    } catch (const UnsupportedError& e) {
        return fail("config", 2, e.what());
    } catch (const DataError& e) {
        return fail("data", 3, e.what());
    } catch (const ShapeError& e) {
        return fail("data", 3, e.what());
    } catch (const NumericError& e) {
        return fail("numeric", 4, e.what());
    } catch (const IoError& e) {
        return fail("io", 5, e.what());
    } catch (const nlohmann::json::exception& e) {
        return fail("config", 2, e.what());
    }
}
