#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "experiments.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
namespace ic = insider::cli;

namespace {

struct Proc {
    int code;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("insider_cli_test_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

Proc run_cli(const std::string& args, const fs::path& dir) {
    const fs::path o = dir / "stdout.txt", e = dir / "stderr.txt";
    const std::string cmd = std::string("cd '") + dir.string() + "' && '" + INSIDER_CLI_PATH + "' " + args + " >'" +
                            o.string() + "' 2>'" + e.string() + "'";
    const int st = std::system(cmd.c_str());
    return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, slurp(o), slurp(e)};
}

fs::path write_config(const fs::path& dir, const std::string& name, const std::string& text) {
    const fs::path p = dir / name;
    std::ofstream(p) << text;
    return p;
}

const char* kSmallPortfolio = R"(kind: portfolio
seed: 7
output: out
model: {a0: 0.1, b0: 0.3, T: 0.5, T0: 1.0, z: 0.0}
grid: {n_steps: 50, n_cells: 8}
mc: {n_paths: 200, antithetic: true}
tolerance: {gap_sigmas: 0.0}
)";

}  // namespace

TEST(Cli, ListShowsSixKinds) {
    const auto d = scratch("list");
    const Proc p = run_cli("list", d);
    EXPECT_EQ(p.code, 0);
    int lines = 0;
    for (char c : p.out) lines += c == '\n';
    EXPECT_EQ(lines, 6);
    for (const char* k : {"donsker-table", "forward-convergence", "portfolio", "stationarity", "zakai-benchmark", "coercivity"})
        EXPECT_NE(p.out.find(k), std::string::npos) << k;
    EXPECT_EQ(ic::experiment_kinds().size(), 6u);
}

TEST(Cli, UnknownKindSuggests) {
    const auto d = scratch("unknown");
    const Proc p = run_cli("list zakai-bench", d);
    EXPECT_NE(p.code, 0);
    EXPECT_NE(p.err.find("zakai-benchmark"), std::string::npos);
}

TEST(Cli, ZakaiSchemaHasParticles) {
    const auto d = scratch("schema");
    const Proc p = run_cli("list zakai-benchmark", d);
    EXPECT_EQ(p.code, 0);
    EXPECT_NE(p.out.find("n_particles"), std::string::npos);
}

TEST(Cli, HelpDocumentsCsvColumns) {
    const auto d = scratch("help");
    const Proc p = run_cli("--help", d);
    EXPECT_EQ(p.code, 0);
    EXPECT_NE(p.out.find("control,j_mean,stderr"), std::string::npos);
    EXPECT_NE(p.out.find("t,x,unnormalized,normalized"), std::string::npos);
}

TEST(Cli, HorizonPastRevealExitsTwo) {
    const auto d = scratch("horizon");
    write_config(d, "bad.yaml", "kind: portfolio\nmodel: {T: 1.0, T0: 1.0}\n");
    const Proc p = run_cli("run --config bad.yaml", d);
    EXPECT_EQ(p.code, 2);
    EXPECT_NE(p.err.find("T < T0"), std::string::npos) << p.err;
    EXPECT_FALSE(fs::exists(d / "results"));
}

TEST(Cli, ValidationErrors) {
    const auto d = scratch("validation");
    write_config(d, "typo.yaml", "kind: portfolio\nmc: {n_path: 10}\n");
    Proc p = run_cli("validate --config typo.yaml", d);
    EXPECT_EQ(p.code, 2);
    EXPECT_NE(p.err.find("mc.n_paths"), std::string::npos) << p.err;

    write_config(d, "type.yaml", "kind: portfolio\ngrid: {n_steps: many}\n");
    p = run_cli("validate --config type.yaml", d);
    EXPECT_EQ(p.code, 2);
    EXPECT_NE(p.err.find("grid.n_steps"), std::string::npos);

    write_config(d, "vol.yaml", "kind: stationarity\nmodel: {b0: 0.0}\n");
    p = run_cli("validate --config vol.yaml", d);
    EXPECT_EQ(p.code, 2);
    EXPECT_NE(p.err.find("eps_vol"), std::string::npos);

    write_config(d, "kind.yaml", "kind: portfolios\n");
    p = run_cli("validate --config kind.yaml", d);
    EXPECT_EQ(p.code, 2);
    EXPECT_NE(p.err.find("portfolio"), std::string::npos);

    p = run_cli("validate --config missing.yaml", d);
    EXPECT_EQ(p.code, 2);

    write_config(d, "ok.yaml", kSmallPortfolio);
    p = run_cli("validate --config ok.yaml", d);
    EXPECT_EQ(p.code, 0) << p.err;
}

TEST(Cli, RunIsDeterministicAndContained) {
    const auto d = scratch("determinism");
    write_config(d, "p.yaml", kSmallPortfolio);
    Proc a = run_cli("run --config p.yaml --out first", d);
    ASSERT_EQ(a.code, 0) << a.err << a.out;
    Proc b = run_cli("run --config p.yaml --out second --threads 2", d);
    ASSERT_EQ(b.code, 0) << b.err;
    EXPECT_EQ(slurp(d / "first" / "portfolio.csv"), slurp(d / "second" / "portfolio.csv"));

    // only the two output directories and the config/log files appear
    for (const auto& e : fs::directory_iterator(d)) {
        const std::string n = e.path().filename().string();
        EXPECT_TRUE(n == "first" || n == "second" || n == "p.yaml" || n == "stdout.txt" || n == "stderr.txt") << n;
    }
    const auto m = nlohmann::json::parse(slurp(d / "first" / "manifest.json"));
    EXPECT_EQ(m["kind"], "portfolio");
    EXPECT_EQ(m["seeds"]["master"], 7);
    EXPECT_EQ(m["status"], "pass");
    EXPECT_EQ(m["files"].size(), 1u);
    EXPECT_FALSE(m["checks"].empty());
    EXPECT_EQ(slurp(d / "first" / "manifest.json"), slurp(d / "second" / "manifest.json"));

    // seed override changes the data and the hash
    Proc c = run_cli("run --config p.yaml --out third --seed 8", d);
    ASSERT_EQ(c.code, 0) << c.err;
    EXPECT_NE(slurp(d / "first" / "portfolio.csv"), slurp(d / "third" / "portfolio.csv"));
    const auto m3 = nlohmann::json::parse(slurp(d / "third" / "manifest.json"));
    EXPECT_NE(m["config_hash"], m3["config_hash"]);
}

TEST(Cli, FailingCheckExitsThree) {
    const auto d = scratch("failing");
    // an impossible oracle tolerance
    write_config(d, "c.yaml", "kind: donsker-table\ntolerance: {oracle: -1.0}\n");
    const Proc p = run_cli("run --config c.yaml", d);
    EXPECT_EQ(p.code, 3);
    EXPECT_NE(p.err.find("oracle_equivalence"), std::string::npos);
    EXPECT_TRUE(fs::exists(d / "results" / "manifest.json"));
}

TEST(Experiments, CanonicalConfigFillsDefaults) {
    const auto a = ic::parse_config("kind: coercivity\n");
    const auto b = ic::parse_config("kind: coercivity\nmodel: {pi: 1.0}\nthreads: 4\noutput: elsewhere\n");
    EXPECT_EQ(ic::canonical_config(a), ic::canonical_config(b));
    EXPECT_NE(ic::canonical_config(a).find("grid.n_cells: [32, 64, 128]"), std::string::npos);
    EXPECT_EQ(ic::fnv1a64(""), 0xcbf29ce484222325ULL);
    EXPECT_EQ(ic::fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Experiments, SmallKindsPass) {
    const auto d = scratch("kinds");
    for (const std::string kind : {"donsker-table", "coercivity"}) {
        auto cfg = ic::parse_config("kind: " + kind + "\n", d);
        const auto r = ic::run_experiment(cfg);
        EXPECT_TRUE(r.passed()) << kind;
        EXPECT_TRUE(fs::exists(d / "results" / "manifest.json"));
    }
    auto z = ic::parse_config(R"(kind: zakai-benchmark
grid: {n_cells: 200, n_steps: 50}
filter: {n_particles: 500, replicates: 4, substeps: 1}
mc: {n_obs_paths: 1}
tolerance: {ratio_lo: 0.0, ratio_hi: 100.0}
output: zk
)", d);
    const auto rz = ic::run_experiment(z);
    for (const auto& c : rz.checks) EXPECT_TRUE(c.passed) << c.name << " " << c.value;
    for (const char* f : {"zakai_benchmark.csv", "zakai_convergence.csv", "filter_snapshots.csv", "manifest.json"})
        EXPECT_TRUE(fs::exists(d / "zk" / f)) << f;
}
