#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "depthlab/data.hpp"
#include "depthlab/influence_table.hpp"
#include "depthlab/metrics.hpp"
#include "depthlab/model.hpp"
#include "depthlab/recovery.hpp"

namespace depthlab {

struct EvalReport {
  double mean_nll = 0.0;
  double perplexity = 0.0;
  std::optional<double> mc_accuracy;
  std::size_t n_tokens = 0;
  std::optional<std::size_t> n_items;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

EvalReport evaluate(const Model& model, const ExecutionPlan& plan, const PackedDataset& validation,
                    const McTask* task = nullptr);

enum class RecoveryKind { None, EmulatedUpdate, Adapter };

std::string to_string(RecoveryKind kind);
RecoveryKind parse_recovery_kind(const std::string& text);

struct RecoverySpec {
  RecoveryKind kind = RecoveryKind::None;
  AdapterConfig adapter;  // used when kind == Adapter

  // "none", "emulated_update", "adapter_r8_mse_repr"
  std::string label() const;
};

struct EvalDelta {
  double mean_nll = 0.0;
  std::optional<double> mc_accuracy;

  friend bool operator==(const EvalDelta&, const EvalDelta&) = default;
};

struct SweepRecord {
  std::size_t k = 0;
  std::vector<UnitId> pruned_units;
  double compression_ratio = 0.0;
  RecoverySpec recovery;
  EvalReport eval;
  std::optional<EvalDelta> relative;  // subject − baseline
};

struct SweepOptions {
  std::size_t max_k = 0;
  // Rescore the remaining units on the pruned model after every step
  // instead of following the one-shot order.
  bool iterative = false;
  MetricRequest rescoring;
  // Prefitted artifacts; anything missing is fitted on the calibration set.
  const RecoveryBundle* artifacts = nullptr;
};

// Plan executing everything except `pruned`, which are skipped or replaced
// by the matching artifact from `bundle`.
ExecutionPlan recovery_plan(std::size_t n_blocks, const std::vector<UnitId>& pruned, RecoveryKind kind,
                            const RecoveryBundle& bundle);

// k = 0..max_k; step k prunes order.units[0..k). Compression ratio is
// k / order.units.size().
std::vector<SweepRecord> prune_sweep(const Model& model, const PruneOrder& order, const RecoverySpec& recovery,
                                     const PackedDataset& calibration, const PackedDataset& validation,
                                     const McTask* task, const SweepOptions& options);

// Per-k deltas subject − baseline; the k grids must match.
std::vector<SweepRecord> relative_report(const std::vector<SweepRecord>& sweep,
                                         const std::vector<SweepRecord>& baseline);

// CSV with columns k, compression_ratio, pruned_units, mean_nll, perplexity
// and (only when the sweep has a task) mc_accuracy. Numbers use %.6g.
std::string sweep_csv(const std::vector<SweepRecord>& sweep);

std::string format_number(double value);

}  // namespace depthlab
