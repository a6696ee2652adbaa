#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "experiments.hpp"
#include "insider/error.hpp"

namespace ic = insider::cli;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct Overrides {
    std::string config;
    long long seed = -1;
    std::string out;
    long long threads = -1;
};

ic::ExperimentConfig load_with_overrides(const Overrides& o) {
    std::ifstream is(o.config, std::ios::binary);
    if (!is) throw ic::ConfigError("cannot read config file " + o.config);
    std::ostringstream ss;
    ss << is.rdbuf();
    YAML::Node root;
    try {
        root = YAML::Load(ss.str());
    } catch (const YAML::Exception& e) {
        throw ic::ConfigError(std::string("config is not valid YAML: ") + e.what());
    }
    if (!root.IsMap()) throw ic::ConfigError("config must be a mapping of sections");
    if (o.seed >= 0) root["seed"] = o.seed;
    if (o.threads >= 0) root["threads"] = o.threads;
    if (!o.out.empty()) root["output"] = o.out;
    YAML::Emitter e;
    e << root;
    return ic::parse_config(e.c_str());
}

void print_checks(const ic::RunResult& r) {
    for (const auto& c : r.checks)
        std::printf("%s %s value=%.6g threshold=%.6g%s%s\n", c.passed ? "PASS" : "FAIL", c.name.c_str(), c.value,
                    c.threshold, c.detail.empty() ? "" : " ", c.detail.c_str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"insider: SPDE insider-control experiments"};
    app.set_version_flag("--version", std::string(ic::kVersion));
    app.footer(ic::csv_help());
    app.require_subcommand(1);

    Overrides o;
    auto* run = app.add_subcommand("run", "run an experiment from a YAML config");
    auto* val = app.add_subcommand("validate", "check a config without running it");
    for (auto* sc : {run, val}) {
        sc->add_option("-c,--config", o.config, "YAML config file")->required();
        sc->add_option("--seed", o.seed, "override the master seed");
        sc->add_option("--out", o.out, "override the output directory");
        sc->add_option("--threads", o.threads, "override the worker count");
    }
    std::string kind;
    auto* list = app.add_subcommand("list", "list experiment kinds, or the schema of one kind");
    list->add_option("kind", kind, "experiment kind");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        if (*list) {
            if (kind.empty()) {
                for (const auto& k : ic::experiment_kinds()) std::printf("%-20s %s\n", k.name.c_str(), k.summary.c_str());
                return 0;
            }
            const auto* k = ic::find_kind(kind);
            if (!k) {
                std::fprintf(stderr, "error: unknown experiment kind '%s'; did you mean '%s'?\n", kind.c_str(),
                             ic::suggest_kind(kind).c_str());
                return kExitConfig;
            }
            std::fputs(ic::schema_text(*k).c_str(), stdout);
            return 0;
        }
        const ic::ExperimentConfig cfg = load_with_overrides(o);
        if (*val) {
            std::printf("config ok: kind=%s hash=%016llx\n", cfg.kind.c_str(),
                        static_cast<unsigned long long>(ic::fnv1a64(ic::canonical_config(cfg))));
            return 0;
        }
        const ic::RunResult r = ic::run_experiment(cfg);
        print_checks(r);
        std::printf("output: %s\n", cfg.output.string().c_str());
        if (!r.passed()) {
            for (const auto& c : r.checks)
                if (!c.passed) std::fprintf(stderr, "error: check '%s' failed\n", c.name.c_str());
            return kExitNumerical;
        }
        return 0;
    } catch (const ic::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const insider::Error& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumerical;
    }
}
