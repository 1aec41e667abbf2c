#include "depthlab/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "depthlab/errors.hpp"
#include "depthlab/parallel.hpp"
#include "depthlab/scoring.hpp"

namespace depthlab {

EvalReport evaluate(const Model& model, const ExecutionPlan& plan, const PackedDataset& validation,
                    const McTask* task) {
  if (validation.empty()) throw ContractError("evaluate: empty validation set");
  const NllSum nll = dataset_nll(model, plan, validation);
  EvalReport r;
  r.mean_nll = nll.mean();
  r.perplexity = std::exp(r.mean_nll);
  r.n_tokens = nll.count;
  if (task) {
    r.mc_accuracy = mc_accuracy(*task, task_option_scores(model, plan, *task));
    r.n_items = task->items.size();
  }
  return r;
}

std::string to_string(RecoveryKind kind) {
  switch (kind) {
    case RecoveryKind::None: return "none";
    case RecoveryKind::EmulatedUpdate: return "emulated_update";
    case RecoveryKind::Adapter: return "adapter";
  }
  return "?";
}

RecoveryKind parse_recovery_kind(const std::string& text) {
  for (auto k : {RecoveryKind::None, RecoveryKind::EmulatedUpdate, RecoveryKind::Adapter}) {
    if (text == to_string(k)) return k;
  }
  throw ContractError("unknown recovery '" + text + "'");
}

std::string RecoverySpec::label() const {
  if (kind != RecoveryKind::Adapter) return to_string(kind);
  return "adapter_r" + std::to_string(adapter.rank) + "_" + to_string(adapter.objective);
}

ExecutionPlan recovery_plan(std::size_t n_blocks, const std::vector<UnitId>& pruned, RecoveryKind kind,
                            const RecoveryBundle& bundle) {
  ExecutionPlan plan(n_blocks);
  for (const auto& u : pruned) {
    switch (kind) {
      case RecoveryKind::None:
        plan.set(u, UnitAction::skip());
        break;
      case RecoveryKind::EmulatedUpdate: {
        const auto* p = bundle.update_for(u);
        if (!p) throw PlanError("no emulated update for " + to_string(u));
        plan.set(u, UnitAction::emulated(std::make_shared<const EmulatedUpdateParams>(*p)));
        break;
      }
      case RecoveryKind::Adapter: {
        const auto* p = bundle.adapter_for(u);
        if (!p) throw PlanError("no adapter for " + to_string(u));
        plan.set(u, UnitAction::with_adapter(std::make_shared<const AdapterParams>(*p)));
        break;
      }
    }
  }
  return plan;
}

namespace {

// Makes sure `bundle` holds the artifact each of `units` needs.
void fit_missing(const Model& model, const RecoverySpec& recovery, const PackedDataset& calibration,
                 const std::vector<UnitId>& units, RecoveryBundle& bundle) {
  std::vector<UnitId> missing;
  for (const auto& u : units) {
    const bool have = recovery.kind == RecoveryKind::EmulatedUpdate ? bundle.update_for(u) != nullptr
                      : recovery.kind == RecoveryKind::Adapter      ? bundle.adapter_for(u) != nullptr
                                                                    : true;
    if (!have) missing.push_back(u);
  }
  if (missing.empty()) return;
  try {
    if (recovery.kind == RecoveryKind::EmulatedUpdate) {
      for (auto& p : estimate_emulated_update(model, calibration, missing)) bundle.updates.push_back(std::move(p));
    } else {
      std::vector<AdapterParams> fitted(missing.size());
      parallel_for(missing.size(), [&](std::size_t i) {
        AdapterConfig cfg = recovery.adapter;
        fitted[i] = train_adapter(model, calibration, missing[i], cfg);
      });
      for (auto& a : fitted) bundle.adapters.push_back(std::move(a));
    }
  } catch (const PipelineError&) {
    throw;
  } catch (const Error& e) {
    throw PipelineError("recovery", std::string("cannot fit ") + to_string(recovery.kind) + ": " + e.what());
  }
}

}  // namespace

std::vector<SweepRecord> prune_sweep(const Model& model, const PruneOrder& order, const RecoverySpec& recovery,
                                     const PackedDataset& calibration, const PackedDataset& validation,
                                     const McTask* task, const SweepOptions& options) {
  if (options.max_k > order.units.size()) {
    throw ContractError("prune_sweep: max_k " + std::to_string(options.max_k) + " exceeds the " +
                        std::to_string(order.units.size()) + " ranked units");
  }
  const std::size_t n_blocks = model.config.n_blocks;
  const double total = static_cast<double>(order.units.size());
  RecoveryBundle bundle;
  if (options.artifacts) bundle = *options.artifacts;

  std::vector<UnitId> pruned;
  if (!options.iterative) {
    // Every artifact is fitted against the intact model, up front.
    const std::vector<UnitId> needed(order.units.begin(), order.units.begin() + static_cast<std::ptrdiff_t>(options.max_k));
    fit_missing(model, recovery, calibration, needed, bundle);
  }

  std::vector<SweepRecord> records;
  for (std::size_t k = 0; k <= options.max_k; ++k) {
    if (k > 0) {
      UnitId next = order.units[k - 1];
      if (options.iterative) {
        std::vector<UnitId> remaining;
        for (const auto& u : order.units) {
          if (std::find(pruned.begin(), pruned.end(), u) == pruned.end()) remaining.push_back(u);
        }
        const ExecutionPlan base = recovery_plan(n_blocks, pruned, recovery.kind, bundle);
        MetricContext ctx;
        ctx.base_plan = &base;
        ctx.units = remaining;
        next = rank_units(compute_influence(model, calibration, options.rescoring, ctx)).units.front();
        fit_missing(model, recovery, calibration, {next}, bundle);
      }
      pruned.push_back(next);
    }
    SweepRecord rec;
    rec.k = k;
    rec.pruned_units = pruned;
    rec.compression_ratio = static_cast<double>(k) / total;
    rec.recovery = recovery;
    rec.eval = evaluate(model, recovery_plan(n_blocks, pruned, recovery.kind, bundle), validation, task);
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<SweepRecord> relative_report(const std::vector<SweepRecord>& sweep,
                                         const std::vector<SweepRecord>& baseline) {
  if (sweep.size() != baseline.size()) throw ContractError("relative_report: sweeps differ in length");
  std::vector<SweepRecord> out = sweep;
  for (std::size_t i = 0; i < sweep.size(); ++i) {
    if (sweep[i].k != baseline[i].k) throw ContractError("relative_report: mismatched k grids");
    EvalDelta d;
    d.mean_nll = sweep[i].eval.mean_nll - baseline[i].eval.mean_nll;
    if (sweep[i].eval.mc_accuracy && baseline[i].eval.mc_accuracy) {
      d.mc_accuracy = *sweep[i].eval.mc_accuracy - *baseline[i].eval.mc_accuracy;
    }
    out[i].relative = d;
  }
  return out;
}

std::string format_number(double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", value);
  std::string s(buf);
  if (s == "-0") s = "0";
  return s;
}

std::string sweep_csv(const std::vector<SweepRecord>& sweep) {
  const bool with_task = !sweep.empty() && sweep.front().eval.mc_accuracy.has_value();
  std::string out = "k,compression_ratio,pruned_units,mean_nll,perplexity";
  out += with_task ? ",mc_accuracy\n" : "\n";
  for (const auto& r : sweep) {
    std::string units;
    for (std::size_t i = 0; i < r.pruned_units.size(); ++i) {
      if (i) units += ';';
      units += to_string(r.pruned_units[i]);
    }
    out += std::to_string(r.k) + "," + format_number(r.compression_ratio) + "," + units + "," +
           format_number(r.eval.mean_nll) + "," + format_number(r.eval.perplexity);
    if (with_task) out += "," + format_number(r.eval.mc_accuracy.value_or(0.0));
    out += "\n";
  }
  return out;
}

}  // namespace depthlab
