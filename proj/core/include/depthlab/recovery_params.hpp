#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "depthlab/tensor.hpp"
#include "depthlab/units.hpp"

namespace depthlab {

// Constant stand-in for a pruned unit: the mean residual update it applied
// on the calibration set.
struct EmulatedUpdateParams {
  UnitId unit;
  Tensor delta_mean;  // [D]
  Tensor delta_std;   // [D], diagnostic only
  std::size_t n_tokens = 0;
};

enum class AdapterObjective { MseRepr, Sft, LogitDistill };

std::string to_string(AdapterObjective objective);
AdapterObjective parse_adapter_objective(const std::string& text);

struct AdapterTrainingMeta {
  AdapterObjective objective = AdapterObjective::MseRepr;
  std::size_t steps = 0;
  std::size_t effective_batch = 0;
  double learning_rate = 0.0;
  std::uint64_t seed = 0;
  double final_loss = 0.0;
  std::vector<double> loss_curve;  // one entry per optimizer step
};

// Low-rank linear replacement for a pruned unit:
//   update = (rmsnorm_gain(h) · wa) · wb,  wa: [D×r], wb: [r×D].
struct AdapterParams {
  UnitId unit;
  Tensor wa;
  Tensor wb;
  Tensor norm_gain;  // [D]
  std::size_t rank = 0;
  AdapterTrainingMeta meta;
};

}  // namespace depthlab
