#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "depthlab/data.hpp"
#include "depthlab/influence_table.hpp"
#include "depthlab/model.hpp"

namespace depthlab {

// Optional context for scoring a partially pruned model (iterative mode):
// `base_plan` is applied underneath, and only `units` are scored.
struct MetricContext {
  const ExecutionPlan* base_plan = nullptr;
  std::optional<std::vector<UnitId>> units;
};

// ---------------------------------------------------------------------------
// Representation metrics (one streaming pass collects all of them)

// Norms below this are treated as zero and the token is left out.
inline constexpr double kZeroNorm = 1e-12;

struct StaticScores {
  Granularity granularity = Granularity::Block;
  std::vector<UnitId> units;
  std::vector<double> cosine;     // 1 − mean cos(H_in, H_out)
  std::vector<double> rel_l1;     // mean ‖ΔH‖₁ / ‖H_in‖₁
  std::vector<double> rel_l2;     // mean ‖ΔH‖₂ / ‖H_in‖₂
  std::vector<double> update_l2;  // mean ‖ΔH‖₂
  std::size_t n_tokens = 0;
  std::vector<std::size_t> excluded_cosine;
  std::vector<std::size_t> excluded_rel_l1;
  std::vector<std::size_t> excluded_rel_l2;
};

// Means are over every non-boundary position of the dataset. Throws
// DegenerateInputError when a unit has no usable token.
StaticScores static_scores(const Model& model, const PackedDataset& ds, Granularity granularity,
                           const MetricContext& ctx = {});

InfluenceTable cosine_influence(const Model& model, const PackedDataset& ds, Granularity granularity);
// p ∈ {1, 2}
InfluenceTable relative_lp_influence(const Model& model, const PackedDataset& ds, int p, Granularity granularity);
// Mean per-token ‖ΔH‖₂ per unit, units_at() order.
std::vector<double> update_norm(const Model& model, const PackedDataset& ds, Granularity granularity);

InfluenceTable static_table(const StaticScores& scores, MetricId metric);

// ---------------------------------------------------------------------------
// Shapley attribution

enum class ShapleyObjective { LogitDistance, LmLoss, TaskLoss };
// ExhaustiveUniform averages marginals uniformly over subsets instead of
// using the Shapley weights.
enum class ShapleyEstimator { LeaveOneOut, PermutationMc, Exhaustive, ExhaustiveUniform };

std::string to_string(ShapleyObjective objective);
std::string to_string(ShapleyEstimator estimator);
ShapleyObjective parse_shapley_objective(const std::string& text);
ShapleyEstimator parse_shapley_estimator(const std::string& text);
MetricId metric_for(ShapleyObjective objective);

inline constexpr std::size_t kMaxExhaustiveUnits = 16;

struct ShapleyOptions {
  ShapleyObjective objective = ShapleyObjective::LmLoss;
  ShapleyEstimator estimator = ShapleyEstimator::LeaveOneOut;
  std::size_t n_permutations = 64;
  std::uint64_t seed = 0;
  const McTask* task = nullptr;  // required by TaskLoss
};

// Loss of the model with exactly the units in `present` executed (the rest
// skipped), for a given objective. logit_distance is measured against the
// model with every scored unit present.
class CoalitionGame {
 public:
  CoalitionGame(const Model& model, const PackedDataset& ds, std::vector<UnitId> units, const ShapleyOptions& options,
                const ExecutionPlan* base_plan = nullptr);

  std::size_t n_players() const noexcept { return units_.size(); }
  const std::vector<UnitId>& units() const noexcept { return units_; }

  // Bit i of `coalition` set means units()[i] is present. Values are cached.
  double value(std::uint64_t coalition);
  std::size_t evaluations() const noexcept { return cache_.size(); }

 private:
  double evaluate(std::uint64_t coalition) const;
  ExecutionPlan plan_for(std::uint64_t coalition) const;

  const Model& model_;
  const PackedDataset& ds_;
  std::vector<UnitId> units_;
  ShapleyOptions options_;
  ExecutionPlan base_;
  std::vector<Tensor> full_logits_;  // per chunk, LogitDistance only
  std::map<std::uint64_t, double> cache_;
};

// Reported influence is −SHAP, so larger means more important.
InfluenceTable shapley_influence(const Model& model, const PackedDataset& ds, Granularity granularity,
                                 const ShapleyOptions& options, const MetricContext& ctx = {});

// ---------------------------------------------------------------------------
// Dispatch and evolution

struct MetricRequest {
  MetricId metric = MetricId::Cosine;
  Granularity granularity = Granularity::Block;
  ShapleyOptions shapley;  // estimator, permutations, seed, task
};

// Every metric except AdapterLoss, which needs trained adapters (recovery).
InfluenceTable compute_influence(const Model& model, const PackedDataset& ds, const MetricRequest& request,
                                 const MetricContext& ctx = {});

// One table per checkpoint; all must share a ModelConfig.
std::vector<InfluenceTable> influence_evolution(std::span<const Model> checkpoints, const PackedDataset& ds,
                                                const MetricRequest& request);

}  // namespace depthlab
