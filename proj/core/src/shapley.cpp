#include <bit>
#include <cmath>

#include "depthlab/errors.hpp"
#include "depthlab/metrics.hpp"
#include "depthlab/parallel.hpp"
#include "depthlab/rng.hpp"
#include "depthlab/scoring.hpp"

namespace depthlab {
namespace {

// Exact in double for n ≤ 18.
double factorial(std::size_t n) {
  double f = 1.0;
  for (std::size_t i = 2; i <= n; ++i) f *= static_cast<double>(i);
  return f;
}

}  // namespace

std::string to_string(ShapleyObjective objective) {
  switch (objective) {
    case ShapleyObjective::LogitDistance: return "logit_distance";
    case ShapleyObjective::LmLoss: return "lm_loss";
    case ShapleyObjective::TaskLoss: return "task_loss";
  }
  return "?";
}

std::string to_string(ShapleyEstimator estimator) {
  switch (estimator) {
    case ShapleyEstimator::LeaveOneOut: return "leave_one_out";
    case ShapleyEstimator::PermutationMc: return "permutation_mc";
    case ShapleyEstimator::Exhaustive: return "exhaustive";
    case ShapleyEstimator::ExhaustiveUniform: return "exhaustive_uniform";
  }
  return "?";
}

ShapleyObjective parse_shapley_objective(const std::string& text) {
  for (auto o : {ShapleyObjective::LogitDistance, ShapleyObjective::LmLoss, ShapleyObjective::TaskLoss}) {
    if (text == to_string(o)) return o;
  }
  throw ContractError("unknown Shapley objective '" + text + "'");
}

ShapleyEstimator parse_shapley_estimator(const std::string& text) {
  for (auto e : {ShapleyEstimator::LeaveOneOut, ShapleyEstimator::PermutationMc, ShapleyEstimator::Exhaustive,
                 ShapleyEstimator::ExhaustiveUniform}) {
    if (text == to_string(e)) return e;
  }
  throw ContractError("unknown Shapley estimator '" + text + "'");
}

MetricId metric_for(ShapleyObjective objective) {
  switch (objective) {
    case ShapleyObjective::LogitDistance: return MetricId::ShapleyLogitDist;
    case ShapleyObjective::LmLoss: return MetricId::ShapleyLmLoss;
    case ShapleyObjective::TaskLoss: return MetricId::ShapleyTaskLoss;
  }
  return MetricId::ShapleyLmLoss;
}

CoalitionGame::CoalitionGame(const Model& model, const PackedDataset& ds, std::vector<UnitId> units,
                             const ShapleyOptions& options, const ExecutionPlan* base_plan)
    : model_(model),
      ds_(ds),
      units_(std::move(units)),
      options_(options),
      base_(base_plan ? *base_plan : ExecutionPlan::all_execute(model.config.n_blocks)) {
  if (units_.empty()) throw ContractError("Shapley game without players");
  if (units_.size() >= 64) throw ResourceError("Shapley game supports at most 63 units");
  if (options_.objective == ShapleyObjective::TaskLoss && (!options_.task || options_.task->items.empty())) {
    throw ContractError("task_loss objective requires a multiple-choice task");
  }
  if (options_.objective != ShapleyObjective::TaskLoss && ds_.empty()) {
    throw ContractError("Shapley objective needs a nonempty calibration set");
  }
  if (options_.objective == ShapleyObjective::LogitDistance) {
    const auto chunks = row_chunks(ds_.rows(), kChunkRows);
    full_logits_.resize(chunks.size());
    const ExecutionPlan full = plan_for((std::uint64_t{1} << units_.size()) - 1);
    parallel_for(chunks.size(), [&](std::size_t c) {
      const Batch batch = make_batch(ds_, chunks[c].first, chunks[c].second);
      full_logits_[c] = forward(model_, batch.tokens, full).logits;
    });
  }
}

ExecutionPlan CoalitionGame::plan_for(std::uint64_t coalition) const {
  ExecutionPlan plan = base_;
  for (std::size_t i = 0; i < units_.size(); ++i) {
    if (!(coalition >> i & 1)) plan.set(units_[i], UnitAction::skip());
  }
  return plan;
}

double CoalitionGame::value(std::uint64_t coalition) {
  if (auto it = cache_.find(coalition); it != cache_.end()) return it->second;
  const double v = evaluate(coalition);
  cache_.emplace(coalition, v);
  return v;
}

double CoalitionGame::evaluate(std::uint64_t coalition) const {
  const ExecutionPlan plan = plan_for(coalition);
  switch (options_.objective) {
    case ShapleyObjective::LmLoss:
      return dataset_nll(model_, plan, ds_).mean();
    case ShapleyObjective::TaskLoss:
      return task_loss(*options_.task, task_option_scores(model_, plan, *options_.task));
    case ShapleyObjective::LogitDistance:
      break;
  }
  const auto chunks = row_chunks(ds_.rows(), kChunkRows);
  std::vector<double> sums(chunks.size(), 0.0);
  std::vector<std::size_t> counts(chunks.size(), 0);
  parallel_for(chunks.size(), [&](std::size_t c) {
    const Batch batch = make_batch(ds_, chunks[c].first, chunks[c].second);
    const Tensor logits = forward(model_, batch.tokens, plan).logits;
    const Tensor& ref = full_logits_[c];
    const std::size_t v = logits.cols();
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      if (!batch.token_mask[r]) continue;
      const auto a = logits.row(r);
      const auto b = ref.row(r);
      double s = 0.0;
      for (std::size_t k = 0; k < v; ++k) {
        const double d = static_cast<double>(a[k]) - b[k];
        s += d * d;
      }
      sums[c] += std::sqrt(s);
      ++counts[c];
    }
  });
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < chunks.size(); ++c) {
    total += sums[c];
    n += counts[c];
  }
  if (n == 0) throw ContractError("logit_distance: every position is masked");
  return total / static_cast<double>(n);
}

InfluenceTable shapley_influence(const Model& model, const PackedDataset& ds, Granularity granularity,
                                 const ShapleyOptions& options, const MetricContext& ctx) {
  std::vector<UnitId> units = ctx.units ? *ctx.units : units_at(granularity, model.config.n_blocks);
  const std::size_t n = units.size();
  const bool exhaustive =
      options.estimator == ShapleyEstimator::Exhaustive || options.estimator == ShapleyEstimator::ExhaustiveUniform;
  if (exhaustive && n > kMaxExhaustiveUnits) {
    throw ResourceError("exhaustive Shapley over " + std::to_string(n) + " units exceeds the limit of " +
                        std::to_string(kMaxExhaustiveUnits));
  }
  if (options.estimator == ShapleyEstimator::PermutationMc && options.n_permutations < 1) {
    throw ContractError("permutation_mc needs at least one permutation");
  }

  CoalitionGame game(model, ds, units, options, ctx.base_plan);
  const std::uint64_t all = (std::uint64_t{1} << n) - 1;
  std::vector<double> shap(n, 0.0);
  std::vector<double> std_errors;

  switch (options.estimator) {
    case ShapleyEstimator::LeaveOneOut: {
      const double full = game.value(all);
      for (std::size_t i = 0; i < n; ++i) shap[i] = full - game.value(all & ~(std::uint64_t{1} << i));
      break;
    }
    case ShapleyEstimator::PermutationMc: {
      // Welford running mean/variance of each unit's marginals.
      std::vector<double> mean(n, 0.0), m2(n, 0.0);
      Rng rng(options.seed);
      for (std::size_t p = 0; p < options.n_permutations; ++p) {
        const auto perm = random_permutation(n, rng);
        std::uint64_t coalition = 0;
        double prev = game.value(coalition);
        for (std::size_t idx : perm) {
          coalition |= std::uint64_t{1} << idx;
          const double cur = game.value(coalition);
          const double marginal = cur - prev;
          const double delta = marginal - mean[idx];
          mean[idx] += delta / static_cast<double>(p + 1);
          m2[idx] += delta * (marginal - mean[idx]);
          prev = cur;
        }
      }
      const auto k = static_cast<double>(options.n_permutations);
      for (std::size_t i = 0; i < n; ++i) {
        shap[i] = mean[i];
        std_errors.push_back(options.n_permutations > 1 ? std::sqrt(m2[i] / (k - 1.0) / k) : 0.0);
      }
      break;
    }
    case ShapleyEstimator::Exhaustive:
    case ShapleyEstimator::ExhaustiveUniform: {
      // Shapley weight |s|!(n−|s|−1)!/n! for a coalition s not containing the unit.
      std::vector<double> weight(n, 0.0);
      for (std::size_t s = 0; s < n; ++s) {
        if (options.estimator == ShapleyEstimator::ExhaustiveUniform) {
          weight[s] = 1.0 / std::ldexp(1.0, static_cast<int>(n - 1));
        } else {
          weight[s] = factorial(s) * factorial(n - s - 1) / factorial(n);
        }
      }
      for (std::uint64_t c = 0; c <= all; ++c) game.value(c);
      for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t bit = std::uint64_t{1} << i;
        for (std::uint64_t c = 0; c <= all; ++c) {
          if (c & bit) continue;
          const auto size = static_cast<std::size_t>(std::popcount(c));
          shap[i] += weight[size] * (game.value(c | bit) - game.value(c));
        }
      }
      break;
    }
  }

  InfluenceTable t;
  t.metric = metric_for(options.objective);
  t.granularity = granularity;
  for (std::size_t i = 0; i < n; ++i) t.scores.push_back({units[i], -shap[i]});
  t.meta.estimator = to_string(options.estimator);
  t.meta.n_tokens = options.objective == ShapleyObjective::TaskLoss ? 0 : ds.rows() * ds.seq_len();
  t.meta.n_subsets = game.evaluations();
  t.meta.n_permutations = options.estimator == ShapleyEstimator::PermutationMc ? options.n_permutations : 0;
  t.meta.seed = options.seed;
  t.meta.std_errors = std::move(std_errors);
  return t;
}

}  // namespace depthlab
