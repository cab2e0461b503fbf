// Drives the installed command line binary as a subprocess: artifact
// determinism, exit codes, and the hash guard. Heavy preset runs live in
// the acceptance suite, not here.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace {

const std::string kBin = FDM_CLI_PATH;

int run(const std::string& args) {
    const std::string cmd = kBin + " " + args + " > /dev/null 2> /dev/null";
    const int rc = std::system(cmd.c_str());
    REQUIRE(rc != -1);
    return WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::string capture(const std::string& args) {
    const std::string tmp = "/tmp/fdm_cli_capture.txt";
    const std::string cmd = kBin + " " + args + " > " + tmp + " 2>&1";
    std::system(cmd.c_str());
    return slurp(tmp);
}

struct Workdir {
    std::string root;
    explicit Workdir(const char* name) : root(std::string("/tmp/fdm_cli_") + name) {
        std::system(("rm -rf " + root + " && mkdir -p " + root).c_str());
    }
    ~Workdir() { std::system(("rm -rf " + root).c_str()); }

    std::string config(const char* body) const {
        const std::string path = root + "/cfg.json";
        std::ofstream(path) << body;
        return path;
    }
};

constexpr const char* kTinyMix = R"({
  "seed": 5,
  "out": "unused",
  "data": {"kind": "mix1d", "count": 2000},
  "path": {"family": "vp"},
  "train": {"epochs": 3, "batch": 128, "lr": 0.001},
  "solver": {"atol": 1e-6, "rtol": 1e-4},
  "eval": {"samples": 200, "nll_rows": 16, "grid_n": 512}
})";

} // namespace

TEST_CASE("same seed, same bytes, end to end") {
    Workdir wd("determinism");
    const std::string cfg = wd.config(kTinyMix);
    for (const char* d : {"a", "b"}) {
        const std::string out = " --out " + wd.root + "/" + d;
        REQUIRE(run("gen-data --config " + cfg + out) == 0);
        REQUIRE(run("train --config " + cfg + out) == 0);
        REQUIRE(run("sample --config " + cfg + out + " -n 50") == 0);
    }
    for (const char* f : {"/data.bin", "/final.fdm", "/samples.bin"})
        REQUIRE(slurp(wd.root + "/a" + f) == slurp(wd.root + "/b" + f));

    // a different seed must move the artifacts
    const std::string out = " --out " + wd.root + "/c --seed 6";
    REQUIRE(run("gen-data --config " + cfg + out) == 0);
    REQUIRE(slurp(wd.root + "/a/data.bin") != slurp(wd.root + "/c/data.bin"));
}

TEST_CASE("exit codes follow the error taxonomy") {
    Workdir wd("exitcodes");
    const std::string cfg = wd.config(kTinyMix);

    SECTION("config errors are 2") {
        const std::string bad = wd.config(R"({"data": {"kind": "wat"}})");
        REQUIRE(run("train --config " + bad) == 2);
        REQUIRE(run("train --config " + cfg + " --preset mix1d") == 2);
        REQUIRE(run("guided-sample --config " + cfg + " --out " + wd.root) == 2);
        REQUIRE(run("nonsense-subcommand") == 2);
    }
    SECTION("missing files are 5") {
        REQUIRE(run("eval --config " + cfg + " --out " + wd.root + "/empty") == 5);
        REQUIRE(run("sample --config " + cfg + " --out " + wd.root + "/empty") == 5);
        REQUIRE(run("train --config " + wd.root + "/nofile.json") == 5);
    }
    SECTION("help exits clean") {
        REQUIRE(run("--help") == 0);
        REQUIRE(run("train --help") == 0);
    }
}

TEST_CASE("hash guard refuses mixed artifacts unless forced") {
    Workdir wd("hashguard");
    const std::string cfg = wd.config(kTinyMix);
    const std::string out = " --out " + wd.root + "/run";
    REQUIRE(run("gen-data --config " + cfg + out) == 0);

    // same config, different seed: the dataset no longer matches
    REQUIRE(run("train --config " + cfg + out + " --seed 11") == 2);
    REQUIRE(run("train --config " + cfg + out + " --seed 11 --force") == 0);
}

TEST_CASE("eval without a model reports data metrics only") {
    Workdir wd("dataonly");
    const std::string cfg = wd.config(R"({
      "seed": 3,
      "data": {"kind": "lorenz", "count": 25, "steps": 60},
      "path": {"family": "ve"},
      "eval": {"samples": 10}
    })");
    const std::string out = " --out " + wd.root + "/run";
    REQUIRE(run("gen-data --config " + cfg + out) == 0);
    const std::string text = capture("eval --config " + cfg + out);
    REQUIRE(text.find("event_rate_data") != std::string::npos);
    REQUIRE(text.find("nll") == std::string::npos);
    REQUIRE(text.find("marginal_tv") == std::string::npos);
}

TEST_CASE("environment overrides yield to flags") {
    Workdir wd("envprec");
    const std::string cfg = wd.config(kTinyMix);
    setenv("FDM_SEED", "77", 1);
    setenv("FDM_OUT", (wd.root + "/env").c_str(), 1);
    // flag beats env for seed; env supplies the directory
    REQUIRE(run("gen-data --config " + cfg + " --seed 5") == 0);
    unsetenv("FDM_SEED");
    unsetenv("FDM_OUT");

    REQUIRE(run("gen-data --config " + cfg + " --out " + wd.root + "/flag --seed 5") == 0);
    REQUIRE(slurp(wd.root + "/env/data.bin") == slurp(wd.root + "/flag/data.bin"));
}
