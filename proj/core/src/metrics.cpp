#include "depthlab/metrics.hpp"

#include <cmath>

#include "depthlab/errors.hpp"
#include "depthlab/parallel.hpp"
#include "depthlab/scoring.hpp"

namespace depthlab {
namespace {

struct UnitAcc {
  double cos_sum = 0.0, l1_sum = 0.0, l2_sum = 0.0, upd_sum = 0.0;
  std::size_t cos_n = 0, l1_n = 0, l2_n = 0, upd_n = 0;

  void merge(const UnitAcc& o) {
    cos_sum += o.cos_sum;
    l1_sum += o.l1_sum;
    l2_sum += o.l2_sum;
    upd_sum += o.upd_sum;
    cos_n += o.cos_n;
    l1_n += o.l1_n;
    l2_n += o.l2_n;
    upd_n += o.upd_n;
  }
};

void accumulate_unit(const Tensor& in, const Tensor& out, std::span<const std::uint8_t> token_mask, UnitAcc& acc) {
  const std::size_t d = in.cols();
  for (std::size_t r = 0; r < in.rows(); ++r) {
    if (!token_mask[r]) continue;
    const auto x = in.row(r);
    const auto y = out.row(r);
    double dot = 0.0, xx = 0.0, yy = 0.0, dd = 0.0, x1 = 0.0, d1 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double a = x[c];
      const double b = y[c];
      const double diff = b - a;
      dot += a * b;
      xx += a * a;
      yy += b * b;
      dd += diff * diff;
      x1 += std::abs(a);
      d1 += std::abs(diff);
    }
    const double nx = std::sqrt(xx);
    const double ny = std::sqrt(yy);
    const double nd = std::sqrt(dd);
    if (nx >= kZeroNorm && ny >= kZeroNorm) {
      acc.cos_sum += dot / (nx * ny);
      ++acc.cos_n;
    }
    if (x1 >= kZeroNorm) {
      acc.l1_sum += d1 / x1;
      ++acc.l1_n;
    }
    if (nx >= kZeroNorm) {
      acc.l2_sum += nd / nx;
      ++acc.l2_n;
    }
    acc.upd_sum += nd;
    ++acc.upd_n;
  }
}

double checked_mean(double sum, std::size_t n, const UnitId& unit, const char* what) {
  if (n == 0) throw DegenerateInputError(std::string(what) + ": every token of " + to_string(unit) + " has zero norm");
  return sum / static_cast<double>(n);
}

std::size_t count_total(const std::vector<std::size_t>& v) {
  std::size_t s = 0;
  for (auto x : v) s += x;
  return s;
}

}  // namespace

StaticScores static_scores(const Model& model, const PackedDataset& ds, Granularity granularity,
                           const MetricContext& ctx) {
  if (ds.empty()) throw ContractError("static metrics: empty calibration set");
  StaticScores out;
  out.granularity = granularity;
  out.units = ctx.units ? *ctx.units : units_at(granularity, model.config.n_blocks);
  const ExecutionPlan plan = ctx.base_plan ? *ctx.base_plan : ExecutionPlan::all_execute(model.config.n_blocks);
  const std::size_t n_units = out.units.size();

  const auto chunks = row_chunks(ds.rows(), kChunkRows);
  std::vector<std::vector<UnitAcc>> parts(chunks.size(), std::vector<UnitAcc>(n_units));
  std::vector<std::size_t> tokens(chunks.size(), 0);
  parallel_for(chunks.size(), [&](std::size_t c) {
    const Batch batch = make_batch(ds, chunks[c].first, chunks[c].second);
    ForwardOptions fo;
    fo.capture = true;
    const auto result = forward(model, batch.tokens, plan, fo);
    for (std::size_t u = 0; u < n_units; ++u) {
      accumulate_unit(result.trace->input(out.units[u]), result.trace->output(out.units[u]), batch.token_mask,
                      parts[c][u]);
    }
    for (auto m : batch.token_mask) tokens[c] += m;
  });

  std::vector<UnitAcc> total(n_units);
  for (std::size_t c = 0; c < chunks.size(); ++c) {
    for (std::size_t u = 0; u < n_units; ++u) total[u].merge(parts[c][u]);
    out.n_tokens += tokens[c];
  }
  for (std::size_t u = 0; u < n_units; ++u) {
    const auto& a = total[u];
    const auto& unit = out.units[u];
    out.cosine.push_back(1.0 - checked_mean(a.cos_sum, a.cos_n, unit, "cosine influence"));
    out.rel_l1.push_back(checked_mean(a.l1_sum, a.l1_n, unit, "relative L1 influence"));
    out.rel_l2.push_back(checked_mean(a.l2_sum, a.l2_n, unit, "relative L2 influence"));
    out.update_l2.push_back(checked_mean(a.upd_sum, a.upd_n, unit, "update norm"));
    out.excluded_cosine.push_back(out.n_tokens - a.cos_n);
    out.excluded_rel_l1.push_back(out.n_tokens - a.l1_n);
    out.excluded_rel_l2.push_back(out.n_tokens - a.l2_n);
  }
  return out;
}

InfluenceTable static_table(const StaticScores& s, MetricId metric) {
  const std::vector<double>* values = nullptr;
  const std::vector<std::size_t>* excluded = nullptr;
  switch (metric) {
    case MetricId::Cosine:
      values = &s.cosine;
      excluded = &s.excluded_cosine;
      break;
    case MetricId::RelL1:
      values = &s.rel_l1;
      excluded = &s.excluded_rel_l1;
      break;
    case MetricId::RelL2:
      values = &s.rel_l2;
      excluded = &s.excluded_rel_l2;
      break;
    default:
      throw ContractError("static_table: " + to_string(metric) + " is not a representation metric");
  }
  InfluenceTable t;
  t.metric = metric;
  t.granularity = s.granularity;
  for (std::size_t u = 0; u < s.units.size(); ++u) t.scores.push_back({s.units[u], (*values)[u]});
  t.meta.estimator = "token_mean";
  t.meta.n_tokens = s.n_tokens;
  t.meta.n_excluded = count_total(*excluded);
  return t;
}

InfluenceTable cosine_influence(const Model& model, const PackedDataset& ds, Granularity granularity) {
  return static_table(static_scores(model, ds, granularity), MetricId::Cosine);
}

InfluenceTable relative_lp_influence(const Model& model, const PackedDataset& ds, int p, Granularity granularity) {
  if (p != 1 && p != 2) throw ContractError("relative_lp_influence: p must be 1 or 2");
  return static_table(static_scores(model, ds, granularity), p == 1 ? MetricId::RelL1 : MetricId::RelL2);
}

std::vector<double> update_norm(const Model& model, const PackedDataset& ds, Granularity granularity) {
  return static_scores(model, ds, granularity).update_l2;
}

InfluenceTable compute_influence(const Model& model, const PackedDataset& ds, const MetricRequest& request,
                                 const MetricContext& ctx) {
  switch (request.metric) {
    case MetricId::Cosine:
    case MetricId::RelL1:
    case MetricId::RelL2:
      return static_table(static_scores(model, ds, request.granularity, ctx), request.metric);
    case MetricId::ShapleyLogitDist:
    case MetricId::ShapleyLmLoss:
    case MetricId::ShapleyTaskLoss: {
      ShapleyOptions opt = request.shapley;
      opt.objective = request.metric == MetricId::ShapleyLogitDist ? ShapleyObjective::LogitDistance
                      : request.metric == MetricId::ShapleyLmLoss  ? ShapleyObjective::LmLoss
                                                                   : ShapleyObjective::TaskLoss;
      return shapley_influence(model, ds, request.granularity, opt, ctx);
    }
    case MetricId::AdapterLoss:
      break;
  }
  throw ContractError("adapter_loss influence requires trained adapters; use the recovery module");
}

std::vector<InfluenceTable> influence_evolution(std::span<const Model> checkpoints, const PackedDataset& ds,
                                                const MetricRequest& request) {
  if (checkpoints.empty()) throw ContractError("influence_evolution: no checkpoints");
  for (const auto& m : checkpoints) {
    if (!(m.config == checkpoints.front().config)) {
      throw ContractError("influence_evolution: checkpoints do not share one model config");
    }
  }
  std::vector<InfluenceTable> series;
  series.reserve(checkpoints.size());
  for (const auto& m : checkpoints) series.push_back(compute_influence(m, ds, request));
  return series;
}

}  // namespace depthlab
