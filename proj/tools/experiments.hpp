#pragma once

// Config-driven experiment runner shared by the CLI and the acceptance binary.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

namespace insider::cli {

inline constexpr const char* kVersion = "0.1.0";

enum class FieldType { integer, number, boolean, string, integer_list, number_list };

struct FieldSpec {
    std::string path;  ///< dotted, e.g. "grid.n_steps"
    FieldType type;
    std::string default_value;  ///< YAML literal
    std::string description;
};

struct OutputSpec {
    std::string file;
    std::string columns;
};

struct KindInfo {
    std::string name;
    std::string summary;
    std::vector<FieldSpec> fields;
    std::vector<OutputSpec> outputs;
};

const std::vector<KindInfo>& experiment_kinds();
const KindInfo* find_kind(const std::string& name);
/// Closest known kind by edit distance.
std::string suggest_kind(const std::string& name);
std::string schema_text(const KindInfo& kind);
std::string csv_help();

/// Exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
    std::string kind;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::filesystem::path output;
    YAML::Node root;
};

/// Parses and schema-validates; throws ConfigError.
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = ".");
ExperimentConfig load_config(const std::filesystem::path& file);

struct Check {
    std::string name;
    bool passed = false;
    double value = 0.0;
    double threshold = 0.0;
    std::string detail;
};

struct RunResult {
    std::vector<Check> checks;
    std::vector<std::filesystem::path> files;  ///< relative to the output directory

    bool passed() const {
        for (const auto& c : checks)
            if (!c.passed) return false;
        return true;
    }
};

/// Runs the experiment, writing CSVs, reports and manifest.json into cfg.output.
RunResult run_experiment(const ExperimentConfig& cfg);

std::uint64_t fnv1a64(const std::string& bytes);
/// Canonical text of the effective config (defaults filled in, overrides applied).
std::string canonical_config(const ExperimentConfig& cfg);

}  // namespace insider::cli
