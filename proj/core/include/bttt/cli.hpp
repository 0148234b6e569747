#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bttt/experiment.hpp"

namespace bttt::cli {

/// Multi-seed experiment: one preset re-seeded per entry in `seeds`, plus the
/// ablation mask sweep and the directory all artifacts land in.
struct ExperimentConfig {
    experiment::Preset preset;
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    std::string output_dir = "out";
    std::vector<double> mask_ratios = {0.5, 0.6, 0.7, 0.8, 0.9};
};

/// seeds non-empty; mask ratios in [0, 1); the target fleet must differ from
/// the source fleet in at least one physical parameter.
void validate(const ExperimentConfig& cfg);

[[nodiscard]] ExperimentConfig default_experiment_config();
[[nodiscard]] std::string experiment_config_json(const ExperimentConfig& cfg);
[[nodiscard]] ExperimentConfig experiment_config_from_json(const std::string& text);

/// Entry point behind main(). Returns the process exit code: 0 on success,
/// nonzero with a message on stderr naming the failed contract.
[[nodiscard]] int run_cli(int argc, char** argv);

}  // namespace bttt::cli
