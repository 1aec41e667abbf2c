#include "depthlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "depthlab/errors.hpp"
#include "depthlab/rng.hpp"

namespace depthlab {

double lr_at(const LrSchedule& s, std::size_t step, std::size_t total_steps) {
  if (s.warmup_steps > 0 && step <= s.warmup_steps) {
    return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  if (total_steps <= s.warmup_steps) return s.peak_lr;
  const double progress =
      static_cast<double>(step - s.warmup_steps) / static_cast<double>(total_steps - s.warmup_steps);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
  return s.min_lr + (s.peak_lr - s.min_lr) * cosine;
}

void TrainConfig::validate() const {
  model.validate();
  if (steps < 1) throw ContractError("train: steps must be at least 1");
  if (batch < 1) throw ContractError("train: batch must be at least 1");
  if (snapshot_every < 1) throw ContractError("train: snapshot_every must be at least 1");
  if (!(schedule.peak_lr > 0.0) || schedule.min_lr < 0.0) throw ContractError("train: bad learning-rate schedule");
  if (weight_decay < 0.0 || !(grad_clip > 0.0)) throw ContractError("train: bad weight decay or clip");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"model", c.model},
          {"steps", c.steps},
          {"batch", c.batch},
          {"warmup_steps", c.schedule.warmup_steps},
          {"peak_lr", c.schedule.peak_lr},
          {"min_lr", c.schedule.min_lr},
          {"weight_decay", c.weight_decay},
          {"grad_clip", c.grad_clip},
          {"snapshot_every", c.snapshot_every},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("model")) c.model = j["model"].get<ModelConfig>();
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.schedule.warmup_steps = j.value("warmup_steps", c.schedule.warmup_steps);
  c.schedule.peak_lr = j.value("peak_lr", c.schedule.peak_lr);
  c.schedule.min_lr = j.value("min_lr", c.schedule.min_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.snapshot_every = j.value("snapshot_every", c.snapshot_every);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

Batch sample_rows(const PackedDataset& ds, std::size_t n, Rng& rng) {
  std::vector<std::size_t> rows(n);
  for (auto& r : rows) r = static_cast<std::size_t>(rng.below(ds.rows()));
  const PackedDataset picked = ds.subset(rows);
  return make_batch(picked, 0, picked.rows());
}

std::filesystem::path snapshot_name(const std::filesystem::path& dir, std::size_t step) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "snapshot_%06zu.prlb", step);
  return dir / buf;
}

}  // namespace

TrainResult train_toy(const TrainConfig& config, const PackedDataset& corpus, const std::filesystem::path& out_dir,
                      const TrainProgress& progress) {
  config.validate();
  if (corpus.empty()) throw ContractError("train_toy: empty corpus");
  if (corpus.seq_len() > config.model.max_seq_len) throw InputError("train_toy: corpus rows exceed max_seq_len");
  std::filesystem::create_directories(out_dir);

  TrainResult result;
  result.model = make_model(config.model, config.seed);
  std::vector<Tensor*> params;
  std::vector<std::string> names;
  TransformerWeights::visit(result.model.weights, [&](const std::string& name, Tensor& t) {
    params.push_back(&t);
    names.push_back(name);
  });
  std::vector<std::vector<double>> m(params.size()), v(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i].assign(params[i]->numel(), 0.0);
    v[i].assign(params[i]->numel(), 0.0);
  }

  Rng sampler = Rng::derive(config.seed, 0x7a1);
  constexpr double b1 = 0.9, b2 = 0.95, eps = 1e-8;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const Batch batch = sample_rows(corpus, config.batch, sampler);
    ad::Tape<float> tape;
    const auto wv = bind_watched(tape, result.model.weights);
    const auto graph = build_graph(tape, config.model, wv, batch.tokens, ExecutionPlan::all_execute(config.model.n_blocks));
    const auto loss = ad::masked_nll(graph.logits, batch.targets, batch.loss_mask);
    const double loss_value = loss.value()[0];
    if (!std::isfinite(loss_value)) throw TrainingError("toy training loss is not finite", step);
    auto grads = tape.backward(loss);

    double sq = 0.0;
    for (const auto& [id, g] : grads) {
      for (float x : g.data()) sq += static_cast<double>(x) * x;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw TrainingError("toy training gradient is not finite", step);
    const double clip = norm > config.grad_clip ? config.grad_clip / norm : 1.0;

    const double lr = lr_at(config.schedule, step, config.steps);
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      const Tensor& g = grads.at(i);
      const double decay = p.rank() == 2 ? config.weight_decay : 0.0;
      for (std::size_t j = 0; j < p.numel(); ++j) {
        const double gj = static_cast<double>(g[j]) * clip;
        m[i][j] = b1 * m[i][j] + (1.0 - b1) * gj;
        v[i][j] = b2 * v[i][j] + (1.0 - b2) * gj * gj;
        const double update = (m[i][j] / c1) / (std::sqrt(v[i][j] / c2) + eps) + decay * p[j];
        p[j] = static_cast<float>(p[j] - lr * update);
      }
    }
    result.loss_history.push_back(loss_value);
    if (progress) progress(step, loss_value, lr);

    if (step % config.snapshot_every == 0 || step == config.steps) {
      CheckpointInfo info;
      info.step = step;
      info.extra = {{"train_config", to_json(config)}, {"loss", loss_value}};
      const auto path = snapshot_name(out_dir, step);
      save_checkpoint(result.model, path, info);
      result.snapshots.push_back(path);
      result.snapshot_steps.push_back(step);
    }
  }

  CheckpointInfo info;
  info.step = config.steps;
  info.extra = {{"train_config", to_json(config)}};
  result.final_checkpoint = out_dir / "final.prlb";
  save_checkpoint(result.model, result.final_checkpoint, info);
  return result;
}

GradCheckReport grad_step_check(const ModelConfig& config, const PackedDataset& corpus, std::uint64_t seed,
                                std::size_t n_coords, double tolerance) {
  if (config.n_blocks > 2 || config.dim > 16) throw ContractError("grad_step_check: model too large (L ≤ 2, D ≤ 16)");
  if (corpus.empty()) throw ContractError("grad_step_check: empty corpus");
  const auto weights = init_weights(config, seed).cast<double>();
  const Batch batch = make_batch(corpus, 0, std::min<std::size_t>(2, corpus.rows()));
  const auto plan = ExecutionPlan::all_execute(config.n_blocks);

  auto loss_of = [&](const BasicTransformerWeights<double>& w) {
    ad::Tape<double> tape(false);
    const auto wv = bind_constants(tape, w);
    const auto g = build_graph(tape, config, wv, batch.tokens, plan);
    return static_cast<double>(ad::masked_nll(g.logits, batch.targets, batch.loss_mask).value()[0]);
  };

  ad::Tape<double> tape;
  const auto wv = bind_watched(tape, weights);
  const auto g = build_graph(tape, config, wv, batch.tokens, plan);
  const auto grads = tape.backward(ad::masked_nll(g.logits, batch.targets, batch.loss_mask));

  std::vector<std::string> names;
  std::vector<std::size_t> sizes;
  BasicTransformerWeights<double>::visit(weights, [&](const std::string& name, const Tensor64& t) {
    names.push_back(name);
    sizes.push_back(t.numel());
  });

  Rng rng(seed ^ 0x9c4ec4);
  constexpr double h = 1e-5;
  GradCheckReport report;
  std::vector<GradCheckEntry> entries;
  for (std::size_t c = 0; c < n_coords; ++c) {
    const std::size_t ti = static_cast<std::size_t>(rng.below(names.size()));
    const std::size_t idx = static_cast<std::size_t>(rng.below(sizes[ti]));
    auto perturbed = [&](double delta) {
      auto w = weights;
      std::size_t k = 0;
      BasicTransformerWeights<double>::visit(w, [&](const std::string&, Tensor64& t) {
        if (k++ == ti) t[idx] += delta;
      });
      return loss_of(w);
    };
    GradCheckEntry e;
    e.tensor = names[ti];
    e.index = idx;
    e.analytic = grads.at(ti)[idx];
    e.numeric = (perturbed(h) - perturbed(-h)) / (2.0 * h);
    const double scale = std::max({std::abs(e.analytic), std::abs(e.numeric), 1e-7});
    e.rel_err = std::abs(e.analytic - e.numeric) / scale;
    report.max_rel_err = std::max(report.max_rel_err, e.rel_err);
    entries.push_back(e);
  }
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.rel_err > b.rel_err; });
  entries.resize(std::min<std::size_t>(entries.size(), 5));
  report.worst = std::move(entries);
  report.n_coords = n_coords;
  report.passed = report.max_rel_err <= tolerance;
  return report;
}

}  // namespace depthlab
