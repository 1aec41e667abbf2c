#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "depthlab/data.hpp"
#include "depthlab/influence_table.hpp"
#include "depthlab/model.hpp"
#include "depthlab/recovery_params.hpp"

namespace depthlab {

// Per-channel mean/std of the unit's residual update (H_out − H_in) over
// every non-boundary calibration token, in one streaming pass.
std::vector<EmulatedUpdateParams> estimate_emulated_update(const Model& model, const PackedDataset& calibration,
                                                           std::span<const UnitId> units);

struct AdapterConfig {
  std::size_t rank = 8;
  AdapterObjective objective = AdapterObjective::MseRepr;
  std::size_t steps = 800;
  std::size_t effective_batch = 8;
  double learning_rate = 0.0;  // ≤ 0 picks the objective's default
  std::uint64_t seed = 0;
};

double default_adapter_lr(AdapterObjective objective);

template <typename T>
struct AdapterTensors {
  BasicTensor<T> wa;         // [D×r]
  BasicTensor<T> wb;         // [r×D]
  BasicTensor<T> norm_gain;  // [D]
};

// Objective value for one batch with the adapter substituted for `unit`
// (base weights frozen). When `grads` is given, also fills the gradients
// with respect to the three adapter tensors.
template <typename T>
double adapter_objective(const ModelConfig& config, const BasicTransformerWeights<T>& weights, const Batch& batch,
                         const UnitId& unit, AdapterObjective objective, const AdapterTensors<T>& params,
                         AdapterTensors<T>* grads = nullptr);

// Adam(0.9, 0.999) at a fixed learning rate; rows are drawn uniformly with
// replacement, `effective_batch` per step. Non-finite loss raises
// TrainingError with the step index.
AdapterParams train_adapter(const Model& model, const PackedDataset& calibration, const UnitId& unit,
                            const AdapterConfig& config);

// Score = mean of the last 10% of each adapter's loss curve.
InfluenceTable adapter_loss_influence(std::span<const AdapterParams> adapters);

struct RecoveryBundle {
  std::vector<EmulatedUpdateParams> updates;
  std::vector<AdapterParams> adapters;

  const EmulatedUpdateParams* update_for(const UnitId& unit) const;
  const AdapterParams* adapter_for(const UnitId& unit) const;
};

// "PRLR" container plus `<path>.json` with the adapters' training metadata.
void save_recovery(const RecoveryBundle& bundle, const std::filesystem::path& path);
RecoveryBundle load_recovery(const std::filesystem::path& path);

}  // namespace depthlab
