#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "depthlab/data.hpp"
#include "depthlab/model.hpp"

namespace depthlab {

struct LrSchedule {
  std::size_t warmup_steps = 100;
  double peak_lr = 3e-3;
  double min_lr = 3e-4;  // cosine decay floor
};

// Linear warmup to peak, then cosine decay to the floor at `total_steps`.
// Steps are 1-based.
double lr_at(const LrSchedule& schedule, std::size_t step, std::size_t total_steps);

struct TrainConfig {
  ModelConfig model;
  std::size_t steps = 3000;
  std::size_t batch = 16;
  LrSchedule schedule;
  double weight_decay = 0.1;  // matrices only
  double grad_clip = 1.0;     // global L2 norm
  std::size_t snapshot_every = 500;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct TrainResult {
  Model model;
  std::filesystem::path final_checkpoint;
  std::vector<std::filesystem::path> snapshots;  // ascending step, last = final
  std::vector<std::size_t> snapshot_steps;
  std::vector<double> loss_history;  // one entry per step
};

using TrainProgress = std::function<void(std::size_t step, double loss, double lr)>;

// AdamW on masked next-token NLL. Rows are drawn uniformly with replacement.
// Writes snapshot_<step>.prlb every snapshot_every steps (and at the end)
// plus final.prlb into out_dir. Non-finite loss raises TrainingError.
TrainResult train_toy(const TrainConfig& config, const PackedDataset& corpus, const std::filesystem::path& out_dir,
                      const TrainProgress& progress = {});

struct GradCheckEntry {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  std::size_t n_coords = 0;
  double max_rel_err = 0.0;
  bool passed = false;
  std::vector<GradCheckEntry> worst;  // largest errors first, at most 5
};

// Full-model loss gradients against central differences, in 64-bit. Meant
// for tiny configurations (L ≤ 2, D ≤ 16).
GradCheckReport grad_step_check(const ModelConfig& config, const PackedDataset& corpus, std::uint64_t seed,
                                std::size_t n_coords = 50, double tolerance = 1e-3);

}  // namespace depthlab
