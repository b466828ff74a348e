#pragma once

// Experiment driver behind the `hetpref` command line tool.

#include "hetpref/hetpref.hpp"
#include "hetpref/io.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace hetpref::cli {

namespace fs = std::filesystem;

enum ExitCode : int { ok = 0, other_error = 1, config_error = 2, data_error = 3, invariant_error = 4 };

struct Options {
    std::optional<fs::path> config;
    std::optional<std::uint64_t> seed;
    std::optional<fs::path> out;
    std::optional<std::string> method;
    std::vector<std::size_t> k_grid;
};

struct AggregateSettings {
    std::string method = "mmra_ae";  // mmra_ae | mmra_lw | mmra_full | uniform
    std::size_t hedge_iterations = 5000;
    std::optional<double> hedge_step;
    LwConfig lw;
    FullConfig full;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    fs::path out;
    io::Json world;  // world specification
    GeneratorConfig generator;
    std::size_t eval_pairs_per_group = 500;
    std::size_t validation_pairs_per_group = 200;
    TrainConfig train;
    EmConfig em;
    AggregateSettings aggregate;
    bool vanilla = true;
    bool cluster = true;
    bool true_label = true;
    IdentifyOptions identify;
    std::vector<std::size_t> k_grid{1, 2, 3, 4};
};

/// Reads the config file (if any) and applies command-line overrides.
ExperimentConfig load_config(const Options& options);

/// Builds a world from its specification; randomness (if the world needs
/// any) comes from the "world" substream of `seed`.
World build_world(const io::Json& spec, std::uint64_t seed);

/// Hex SHA-256 of a byte string.
std::string sha256_hex(const std::string& bytes);

void cmd_generate(const ExperimentConfig& config);
void cmd_em(const ExperimentConfig& config);
void cmd_vanilla(const ExperimentConfig& config);
void cmd_cluster(const ExperimentConfig& config);
void cmd_true_label(const ExperimentConfig& config);
void cmd_aggregate(const ExperimentConfig& config);
void cmd_eval(const ExperimentConfig& config);
void cmd_identify(const ExperimentConfig& config);
void cmd_sweep_k(const ExperimentConfig& config);

/// Parses argv, runs one subcommand and maps failures to exit codes.
int run(int argc, const char* const* argv);

}  // namespace hetpref::cli
