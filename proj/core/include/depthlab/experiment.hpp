#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "depthlab/data.hpp"
#include "depthlab/metrics.hpp"
#include "depthlab/pipeline.hpp"
#include "depthlab/recovery.hpp"

namespace depthlab {

struct TaskSettings {
  McTaskSpec spec;
  std::size_t n_items = 64;
  std::size_t n_shots = 5;
  std::uint64_t seed = 0;
};

// Everything run_experiment needs. Relative paths in the file are resolved
// against the file's directory.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 0;  // 0 keeps the current setting

  std::filesystem::path checkpoint;

  // Exactly one data source: a packed dataset, a corpus, or generated text.
  std::filesystem::path dataset;
  std::filesystem::path corpus;
  CorpusLayout corpus_layout = CorpusLayout::Directory;
  std::size_t synthetic_docs = 0;
  std::size_t seq_len = 128;
  double calib_fraction = 0.8;
  std::size_t calibration_rows = 0;  // 0 keeps every row
  std::size_t validation_rows = 0;

  std::optional<TaskSettings> task;

  std::vector<std::string> metrics;  // metric ids, or "random"
  std::vector<Granularity> granularities{Granularity::Block};
  std::vector<RecoverySpec> recoveries{RecoverySpec{}};
  ShapleyEstimator shapley_estimator = ShapleyEstimator::LeaveOneOut;
  std::size_t shapley_permutations = 64;
  AdapterConfig adapter;
  std::size_t max_k = 0;
  bool iterative = false;

  std::vector<std::filesystem::path> evolution_snapshots;
  std::string evolution_metric = "cosine";

  std::filesystem::path output_dir = "out";

  // Throws InputError describing the first problem.
  void validate() const;
};

// YAML text; `base_dir` resolves relative paths.
ExperimentConfig parse_experiment_config(const std::string& text, const std::filesystem::path& base_dir);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Resolved configuration as JSON (for report/manifest echo).
nlohmann::json to_json(const ExperimentConfig& config);

struct ExperimentResult {
  std::vector<std::filesystem::path> files;  // everything written, in order
};

// metric computation → ranking → sweeps → CSV/JSON/plot data. On failure
// writes report.json with status "incomplete" and the failing stage, then
// throws PipelineError tagged with that stage.
ExperimentResult run_experiment(const ExperimentConfig& config);

std::string version_string();

}  // namespace depthlab
