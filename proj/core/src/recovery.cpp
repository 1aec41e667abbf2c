#include "depthlab/recovery.hpp"

#include <algorithm>
#include <cmath>

#include "depthlab/container.hpp"
#include "depthlab/errors.hpp"
#include "depthlab/parallel.hpp"
#include "depthlab/rng.hpp"
#include "depthlab/scoring.hpp"

namespace depthlab {

std::string to_string(AdapterObjective objective) {
  switch (objective) {
    case AdapterObjective::MseRepr: return "mse_repr";
    case AdapterObjective::Sft: return "sft";
    case AdapterObjective::LogitDistill: return "logit_distill";
  }
  return "?";
}

AdapterObjective parse_adapter_objective(const std::string& text) {
  for (auto o : {AdapterObjective::MseRepr, AdapterObjective::Sft, AdapterObjective::LogitDistill}) {
    if (text == to_string(o)) return o;
  }
  throw ContractError("unknown adapter objective '" + text + "'");
}

double default_adapter_lr(AdapterObjective objective) {
  return objective == AdapterObjective::MseRepr ? 1e-3 : 3e-4;
}

namespace {

std::size_t input_state(const UnitId& u) { return u.kind == UnitKind::FeedForward ? 2 * u.block + 1 : 2 * u.block; }
std::size_t output_state(const UnitId& u) { return u.kind == UnitKind::Attention ? 2 * u.block + 1 : 2 * u.block + 2; }

void check_unit(const ModelConfig& config, const UnitId& unit) {
  if (unit.block >= config.n_blocks) throw ContractError("unit " + to_string(unit) + " outside the model");
}

// Chan et al. merge of per-channel (count, mean, M2) accumulators.
struct ChannelStats {
  double n = 0.0;
  std::vector<double> mean, m2;

  explicit ChannelStats(std::size_t d = 0) : mean(d, 0.0), m2(d, 0.0) {}

  void push(std::span<const float> in, std::span<const float> out) {
    n += 1.0;
    for (std::size_t c = 0; c < mean.size(); ++c) {
      const double x = static_cast<double>(out[c]) - static_cast<double>(in[c]);
      const double delta = x - mean[c];
      mean[c] += delta / n;
      m2[c] += delta * (x - mean[c]);
    }
  }

  void merge(const ChannelStats& o) {
    if (o.n == 0.0) return;
    if (n == 0.0) {
      *this = o;
      return;
    }
    const double total = n + o.n;
    for (std::size_t c = 0; c < mean.size(); ++c) {
      const double delta = o.mean[c] - mean[c];
      mean[c] += delta * o.n / total;
      m2[c] += o.m2[c] + delta * delta * n * o.n / total;
    }
    n = total;
  }
};

}  // namespace

std::vector<EmulatedUpdateParams> estimate_emulated_update(const Model& model, const PackedDataset& calibration,
                                                           std::span<const UnitId> units) {
  if (calibration.empty()) throw ContractError("estimate_emulated_update: empty calibration set");
  for (const auto& u : units) check_unit(model.config, u);
  const std::size_t d = model.config.dim;
  const auto chunks = row_chunks(calibration.rows(), kChunkRows);
  std::vector<std::vector<ChannelStats>> parts(chunks.size(), std::vector<ChannelStats>(units.size(), ChannelStats(d)));
  const auto plan = ExecutionPlan::all_execute(model.config.n_blocks);
  parallel_for(chunks.size(), [&](std::size_t c) {
    const Batch batch = make_batch(calibration, chunks[c].first, chunks[c].second);
    ForwardOptions fo;
    fo.capture = true;
    const auto trace = *forward(model, batch.tokens, plan, fo).trace;
    for (std::size_t u = 0; u < units.size(); ++u) {
      const Tensor& in = trace.input(units[u]);
      const Tensor& out = trace.output(units[u]);
      for (std::size_t r = 0; r < in.rows(); ++r) {
        if (batch.token_mask[r]) parts[c][u].push(in.row(r), out.row(r));
      }
    }
  });

  std::vector<EmulatedUpdateParams> result;
  for (std::size_t u = 0; u < units.size(); ++u) {
    ChannelStats total(d);
    for (const auto& p : parts) total.merge(p[u]);
    if (total.n == 0.0) throw ContractError("estimate_emulated_update: every calibration token is masked");
    EmulatedUpdateParams params;
    params.unit = units[u];
    params.n_tokens = static_cast<std::size_t>(total.n);
    params.delta_mean = Tensor({d});
    params.delta_std = Tensor({d});
    for (std::size_t c = 0; c < d; ++c) {
      params.delta_mean[c] = static_cast<float>(total.mean[c]);
      params.delta_std[c] = static_cast<float>(std::sqrt(std::max(0.0, total.m2[c] / total.n)));
    }
    require_finite(params.delta_mean, "emulated update mean");
    result.push_back(std::move(params));
  }
  return result;
}

template <typename T>
double adapter_objective(const ModelConfig& config, const BasicTransformerWeights<T>& weights, const Batch& batch,
                         const UnitId& unit, AdapterObjective objective, const AdapterTensors<T>& params,
                         AdapterTensors<T>* grads) {
  check_unit(config, unit);
  ad::Tape<T> tape(grads != nullptr);
  const auto wv = bind_constants(tape, weights);
  AdapterVars<T> av{unit, tape.watch(0, params.wa), tape.watch(1, params.wb), tape.watch(2, params.norm_gain)};
  const auto plan = ExecutionPlan::all_execute(config.n_blocks);

  ad::Var<T> loss;
  switch (objective) {
    case AdapterObjective::MseRepr: {
      GraphOptions<T> go;
      go.capture = true;
      go.stop_after_block = unit.block;
      const auto g = build_graph(tape, config, wv, batch.tokens, plan, go);
      const auto& in = g.states[input_state(unit)];
      const auto target = ad::sub(g.states[output_state(unit)], in);
      const auto update = ad::matmul(ad::matmul(ad::rmsnorm(in, av.norm_gain, config.norm_eps), av.wa), av.wb);
      loss = ad::mean_row_sq_dist(update, target, batch.token_mask);
      break;
    }
    case AdapterObjective::Sft: {
      GraphOptions<T> go;
      go.adapter = &av;
      const auto g = build_graph(tape, config, wv, batch.tokens, plan, go);
      loss = ad::masked_nll(g.logits, batch.targets, batch.loss_mask);
      break;
    }
    case AdapterObjective::LogitDistill: {
      const auto full = build_graph(tape, config, wv, batch.tokens, plan);
      GraphOptions<T> go;
      go.adapter = &av;
      const auto g = build_graph(tape, config, wv, batch.tokens, plan, go);
      loss = ad::mean_row_sq_dist(g.logits, full.logits, batch.token_mask);
      break;
    }
  }
  const double value = static_cast<double>(loss.value()[0]);
  if (grads) {
    auto g = tape.backward(loss);
    grads->wa = std::move(g.at(0));
    grads->wb = std::move(g.at(1));
    grads->norm_gain = std::move(g.at(2));
  }
  return value;
}

template double adapter_objective(const ModelConfig&, const BasicTransformerWeights<float>&, const Batch&,
                                  const UnitId&, AdapterObjective, const AdapterTensors<float>&,
                                  AdapterTensors<float>*);
template double adapter_objective(const ModelConfig&, const BasicTransformerWeights<double>&, const Batch&,
                                  const UnitId&, AdapterObjective, const AdapterTensors<double>&,
                                  AdapterTensors<double>*);

namespace {

struct AdamSlot {
  std::vector<double> m, v;

  explicit AdamSlot(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

  void step(Tensor& param, const Tensor& grad, double lr, std::size_t t) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (std::size_t i = 0; i < param.numel(); ++i) {
      const double g = grad[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      param[i] = static_cast<float>(param[i] - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps));
    }
  }
};

Batch sample_batch(const PackedDataset& ds, std::size_t n_rows, Rng& rng) {
  std::vector<std::size_t> rows(n_rows);
  for (auto& r : rows) r = static_cast<std::size_t>(rng.below(ds.rows()));
  const PackedDataset picked = ds.subset(rows);
  return make_batch(picked, 0, picked.rows());
}

}  // namespace

AdapterParams train_adapter(const Model& model, const PackedDataset& calibration, const UnitId& unit,
                            const AdapterConfig& config) {
  const std::size_t d = model.config.dim;
  check_unit(model.config, unit);
  if (calibration.empty()) throw ContractError("train_adapter: empty calibration set");
  if (config.rank < 1 || config.rank > d) throw ContractError("train_adapter: rank must lie in [1, D]");
  if (config.steps < 1) throw ContractError("train_adapter: steps must be at least 1");
  if (config.effective_batch < 1) throw ContractError("train_adapter: effective batch must be at least 1");
  const double lr = config.learning_rate > 0.0 ? config.learning_rate : default_adapter_lr(config.objective);

  Rng init = Rng::derive(config.seed, 0xada);
  AdapterTensors<float> p;
  p.wa = Tensor({d, config.rank});
  for (float& x : p.wa.mutable_data()) x = static_cast<float>(init.normal(0.0, 0.02));
  p.wb = Tensor({config.rank, d});
  p.norm_gain = Tensor::full({d}, 1.0f);

  AdamSlot sa(p.wa.numel()), sb(p.wb.numel()), sg(p.norm_gain.numel());
  Rng sampler = Rng::derive(config.seed, 0xba7c4);
  AdapterParams out;
  out.unit = unit;
  out.rank = config.rank;
  out.meta.objective = config.objective;
  out.meta.steps = config.steps;
  out.meta.effective_batch = config.effective_batch;
  out.meta.learning_rate = lr;
  out.meta.seed = config.seed;
  out.meta.loss_curve.reserve(config.steps);

  for (std::size_t step = 1; step <= config.steps; ++step) {
    const Batch batch = sample_batch(calibration, config.effective_batch, sampler);
    AdapterTensors<float> g;
    const double loss = adapter_objective(model.config, model.weights, batch, unit, config.objective, p, &g);
    if (!std::isfinite(loss)) {
      throw TrainingError("adapter training for " + to_string(unit) + " produced a non-finite loss", step);
    }
    out.meta.loss_curve.push_back(loss);
    sa.step(p.wa, g.wa, lr, step);
    sb.step(p.wb, g.wb, lr, step);
    sg.step(p.norm_gain, g.norm_gain, lr, step);
    if (!p.wa.all_finite() || !p.wb.all_finite() || !p.norm_gain.all_finite()) {
      throw TrainingError("adapter parameters for " + to_string(unit) + " became non-finite", step);
    }
  }
  out.meta.final_loss = out.meta.loss_curve.back();
  out.wa = std::move(p.wa);
  out.wb = std::move(p.wb);
  out.norm_gain = std::move(p.norm_gain);
  return out;
}

InfluenceTable adapter_loss_influence(std::span<const AdapterParams> adapters) {
  if (adapters.empty()) throw ContractError("adapter_loss_influence: no adapters");
  const auto& ref = adapters.front();
  bool any_block = false, any_attn = false, any_ffn = false;
  for (const auto& a : adapters) {
    if (a.meta.objective != ref.meta.objective || a.meta.steps != ref.meta.steps ||
        a.meta.effective_batch != ref.meta.effective_batch || a.meta.learning_rate != ref.meta.learning_rate ||
        a.rank != ref.rank) {
      throw ContractError("adapter_loss_influence: adapters were trained with different configurations");
    }
    if (a.meta.loss_curve.empty()) throw ContractError("adapter_loss_influence: adapter without a loss curve");
    any_block |= a.unit.kind == UnitKind::Block;
    any_attn |= a.unit.kind == UnitKind::Attention;
    any_ffn |= a.unit.kind == UnitKind::FeedForward;
  }
  if (any_block && (any_attn || any_ffn)) throw ContractError("adapter_loss_influence: mixed block and sublayer units");

  InfluenceTable t;
  t.metric = MetricId::AdapterLoss;
  t.granularity = any_block ? Granularity::Block
                  : any_attn && any_ffn ? Granularity::JointSublayer
                  : any_attn          ? Granularity::Attention
                                      : Granularity::FeedForward;
  for (const auto& a : adapters) {
    const auto& curve = a.meta.loss_curve;
    const std::size_t window = std::max<std::size_t>(1, (curve.size() + 9) / 10);
    double s = 0.0;
    for (std::size_t i = curve.size() - window; i < curve.size(); ++i) s += curve[i];
    t.scores.push_back({a.unit, s / static_cast<double>(window)});
  }
  std::sort(t.scores.begin(), t.scores.end(), [](const UnitScore& a, const UnitScore& b) { return a.unit < b.unit; });
  t.meta.estimator = "loss_curve_tail_10pct";
  t.meta.seed = ref.meta.seed;
  return t;
}

const EmulatedUpdateParams* RecoveryBundle::update_for(const UnitId& unit) const {
  for (const auto& u : updates) {
    if (u.unit == unit) return &u;
  }
  return nullptr;
}

const AdapterParams* RecoveryBundle::adapter_for(const UnitId& unit) const {
  for (const auto& a : adapters) {
    if (a.unit == unit) return &a;
  }
  return nullptr;
}

namespace {

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".json";
  return p;
}

nlohmann::json meta_json(const AdapterTrainingMeta& m) {
  return {{"objective", to_string(m.objective)}, {"steps", m.steps},
          {"effective_batch", m.effective_batch}, {"learning_rate", m.learning_rate},
          {"seed", m.seed},                       {"final_loss", m.final_loss},
          {"loss_curve", m.loss_curve}};
}

AdapterTrainingMeta meta_from_json(const nlohmann::json& j) {
  AdapterTrainingMeta m;
  m.objective = parse_adapter_objective(j.at("objective").get<std::string>());
  m.steps = j.at("steps").get<std::size_t>();
  m.effective_batch = j.at("effective_batch").get<std::size_t>();
  m.learning_rate = j.at("learning_rate").get<double>();
  m.seed = j.value("seed", std::uint64_t{0});
  m.final_loss = j.at("final_loss").get<double>();
  m.loss_curve = j.at("loss_curve").get<std::vector<double>>();
  return m;
}

}  // namespace

void save_recovery(const RecoveryBundle& bundle, const std::filesystem::path& path) {
  Container c;
  nlohmann::json artifacts = nlohmann::json::array();
  nlohmann::json sidecar = {{"adapters", nlohmann::json::array()}};
  for (const auto& u : bundle.updates) {
    const auto key = to_string(u.unit);
    artifacts.push_back({{"unit", key}, {"type", "emulated_update"}, {"n_tokens", u.n_tokens}});
    c.tensors.emplace_back(key + ".delta_mean", u.delta_mean);
    c.tensors.emplace_back(key + ".delta_std", u.delta_std);
  }
  for (const auto& a : bundle.adapters) {
    const auto key = to_string(a.unit);
    artifacts.push_back({{"unit", key}, {"type", "adapter"}, {"rank", a.rank}});
    c.tensors.emplace_back(key + ".wa", a.wa);
    c.tensors.emplace_back(key + ".wb", a.wb);
    c.tensors.emplace_back(key + ".norm_gain", a.norm_gain);
    sidecar["adapters"].push_back({{"unit", key}, {"training_meta", meta_json(a.meta)}});
  }
  c.meta = {{"kind", "recovery"}, {"artifacts", artifacts}};
  write_container(path, "PRLR", c);
  write_file_atomic(sidecar_path(path), sidecar.dump(2) + "\n");
}

RecoveryBundle load_recovery(const std::filesystem::path& path) {
  const Container c = read_container(path, "PRLR");
  nlohmann::json sidecar;
  if (std::filesystem::exists(sidecar_path(path))) {
    try {
      sidecar = nlohmann::json::parse(read_file(sidecar_path(path)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("recovery sidecar: ") + e.what());
    }
  }
  RecoveryBundle bundle;
  try {
    for (const auto& art : c.meta.at("artifacts")) {
      const auto key = art.at("unit").get<std::string>();
      const UnitId unit = parse_unit(key);
      const auto type = art.at("type").get<std::string>();
      if (type == "emulated_update") {
        EmulatedUpdateParams u;
        u.unit = unit;
        u.n_tokens = art.at("n_tokens").get<std::size_t>();
        u.delta_mean = c.tensor(key + ".delta_mean");
        u.delta_std = c.tensor(key + ".delta_std");
        bundle.updates.push_back(std::move(u));
      } else if (type == "adapter") {
        AdapterParams a;
        a.unit = unit;
        a.rank = art.at("rank").get<std::size_t>();
        a.wa = c.tensor(key + ".wa");
        a.wb = c.tensor(key + ".wb");
        a.norm_gain = c.tensor(key + ".norm_gain");
        if (sidecar.contains("adapters")) {
          for (const auto& entry : sidecar["adapters"]) {
            if (entry.at("unit").get<std::string>() == key) a.meta = meta_from_json(entry.at("training_meta"));
          }
        }
        bundle.adapters.push_back(std::move(a));
      } else {
        throw FormatError("unknown recovery artifact type '" + type + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("recovery manifest: ") + e.what());
  } catch (const ContractError& e) {
    throw FormatError(std::string("recovery manifest: ") + e.what());
  }
  return bundle;
}

}  // namespace depthlab
