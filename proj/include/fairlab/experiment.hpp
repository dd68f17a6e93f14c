#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "fairlab/dataset.hpp"
#include "fairlab/memprobe.hpp"
#include "fairlab/model_config.hpp"
#include "fairlab/trainer.hpp"

namespace fairlab {

/// One training run: where the data comes from, the architecture, and the
/// optimizer settings. A single root seed fans out into fixed-purpose
/// subseeds so that, say, changing the architecture cannot silently reshuffle
/// the data.
struct ExperimentConfig {
  std::optional<SyntheticSpec> data;  // absent when the run loads CSVs
  ModelConfig model;                  // input_dim/num_classes of 0 mean "infer from data"
  TrainConfig train;
  bool class_reweight = false;
  std::uint64_t seed = 0;

  std::uint64_t data_seed() const;
  std::uint64_t init_seed() const;
  std::uint64_t shuffle_seed() const;
  std::uint64_t allocation_seed() const;
  std::uint64_t probe_seed() const;

  /// Copies the derived subseeds into the member configs and fills inferred
  /// model dimensions from the dataset.
  void resolve(const GroupedDataset& train_split);
};

ExperimentConfig experiment_from_json_string(const std::string& text);
ExperimentConfig experiment_from_json_file(const std::filesystem::path& path);

/// A sweep file holds a base experiment plus the points to try, given as an
/// explicit "points" list, a "grid" of per-field lists (crossed in position,
/// p_gen, p_mem, learning_rate, weight_decay order), or both. Fields missing
/// from a point or grid fall back to the base config's values.
struct SweepExperiment {
  ExperimentConfig base;
  std::vector<SweepPoint> points;
  int budget = 0;
};

SweepExperiment sweep_experiment_from_json_string(const std::string& text);
SweepExperiment sweep_experiment_from_json_file(const std::filesystem::path& path);

// Artifact writers. CSV floats use 17 significant digits so files reload
// exactly; schemas are documented in docs/schemas.md.
void save_history_csv(const History& history, const std::filesystem::path& path);
void save_history_json(const History& history, const std::filesystem::path& path);
void save_sweep_csv(const SweepResult& result, const std::filesystem::path& path);
void save_sweep_json(const SweepResult& result, const std::filesystem::path& path);
void save_probe_csv(const ProbeReport& report, const std::filesystem::path& path);
void save_probe_summary_json(const ProbeReport& report, const std::filesystem::path& path);

}  // namespace fairlab
