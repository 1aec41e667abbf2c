#include "depthlab/model.hpp"

#include <cmath>

#include "depthlab/container.hpp"
#include "depthlab/errors.hpp"
#include "depthlab/rng.hpp"

namespace depthlab {

std::string to_string(Activation activation) {
  return activation == Activation::SwiGLU ? "swiglu" : "gelu";
}

Activation parse_activation(const std::string& text) {
  if (text == "swiglu") return Activation::SwiGLU;
  if (text == "gelu") return Activation::GELU;
  throw ContractError("unknown activation '" + text + "'");
}

std::string to_string(ActionKind kind) {
  switch (kind) {
    case ActionKind::Execute: return "execute";
    case ActionKind::Skip: return "skip";
    case ActionKind::EmulatedUpdate: return "emulated_update";
    case ActionKind::Adapter: return "adapter";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ContractError("vocab_size must be at least 2");
  if (n_blocks < 1) throw ContractError("model needs at least one block");
  if (dim == 0 || n_heads == 0 || dim % n_heads != 0) throw ContractError("dim must be divisible by n_heads");
  if (head_dim() % 2 != 0) throw ContractError("head dimension must be even for rotary positions");
  if (ffn_hidden == 0) throw ContractError("ffn_hidden must be positive");
  if (max_seq_len == 0) throw ContractError("max_seq_len must be positive");
  if (!(norm_eps > 0.0)) throw ContractError("norm_eps must be positive");
  if (!(rope_base > 0.0)) throw ContractError("rope_base must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"dim", c.dim},           {"n_blocks", c.n_blocks},
       {"n_heads", c.n_heads},       {"ffn_hidden", c.ffn_hidden}, {"max_seq_len", c.max_seq_len},
       {"norm_eps", c.norm_eps},     {"rope_base", c.rope_base}, {"activation", to_string(c.activation)}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.dim = j.at("dim").get<std::size_t>();
  c.n_blocks = j.at("n_blocks").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.ffn_hidden = j.at("ffn_hidden").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.norm_eps = j.at("norm_eps").get<double>();
  c.rope_base = j.at("rope_base").get<double>();
  c.activation = parse_activation(j.at("activation").get<std::string>());
}

namespace {

TransformerWeights shaped_weights(const ModelConfig& c) {
  TransformerWeights w;
  const std::size_t d = c.dim;
  const std::size_t f = c.ffn_hidden;
  w.embed = Tensor({c.vocab_size, d});
  for (std::size_t l = 0; l < c.n_blocks; ++l) {
    BlockWeights b;
    b.attn_norm = Tensor({d});
    b.wq = Tensor({d, d});
    b.wk = Tensor({d, d});
    b.wv = Tensor({d, d});
    b.wo = Tensor({d, d});
    b.ffn_norm = Tensor({d});
    b.w1 = Tensor({d, f});
    if (c.activation == Activation::SwiGLU) b.w3 = Tensor({d, f});
    b.w2 = Tensor({f, d});
    w.blocks.push_back(std::move(b));
  }
  w.final_norm = Tensor({d});
  w.unembed = Tensor({d, c.vocab_size});
  return w;
}

bool is_norm(const std::string& name) { return name.find("norm") != std::string::npos; }

bool is_residual_output(const std::string& name) {
  return name.ends_with("attn.wo") || name.ends_with("ffn.w2");
}

}  // namespace

TransformerWeights init_weights(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  TransformerWeights w = shaped_weights(config);
  Rng rng(seed);
  const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_blocks));
  TransformerWeights::visit(w, [&](const std::string& name, Tensor& t) {
    auto data = t.mutable_data();
    if (is_norm(name)) {
      std::fill(data.begin(), data.end(), 1.0f);
      return;
    }
    const double stddev = 0.02 * (is_residual_output(name) ? out_scale : 1.0);
    for (float& x : data) x = static_cast<float>(rng.normal(0.0, stddev));
  });
  return w;
}

Model make_model(const ModelConfig& config, std::uint64_t seed) { return Model{config, init_weights(config, seed)}; }

void validate_weights(const ModelConfig& config, const TransformerWeights& weights) {
  config.validate();
  const TransformerWeights expected = shaped_weights(config);
  std::vector<std::pair<std::string, Shape>> want;
  TransformerWeights::visit(expected, [&](const std::string& n, const Tensor& t) { want.emplace_back(n, t.shape()); });
  std::vector<std::pair<std::string, Shape>> have;
  TransformerWeights::visit(weights, [&](const std::string& n, const Tensor& t) { have.emplace_back(n, t.shape()); });
  if (weights.blocks.size() != config.n_blocks || have.size() != want.size()) {
    throw DimensionError("weights do not match config block structure");
  }
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (have[i] != want[i]) {
      throw DimensionError("tensor '" + have[i].first + "' has shape " + shape_to_string(have[i].second) +
                           ", expected " + want[i].first + " " + shape_to_string(want[i].second));
    }
  }
}

std::size_t parameter_count(const TransformerWeights& weights) {
  std::size_t n = 0;
  TransformerWeights::visit(weights, [&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

TokenMatrix::TokenMatrix(std::size_t r, std::size_t c, std::vector<std::int32_t> values)
    : rows(r), cols(c), ids(std::move(values)) {
  if (ids.size() != rows * cols) throw DimensionError("token matrix size does not match rows×cols");
}

// ---------------------------------------------------------------------------

ExecutionPlan::ExecutionPlan(std::size_t n_blocks) : attention_(n_blocks), feed_forward_(n_blocks) {}

ExecutionPlan ExecutionPlan::skipping(std::size_t n_blocks, std::span<const UnitId> units) {
  ExecutionPlan plan(n_blocks);
  for (const auto& u : units) plan.set(u, UnitAction::skip());
  return plan;
}

void ExecutionPlan::set(const UnitId& unit, UnitAction action) {
  if (unit.block >= n_blocks()) {
    throw PlanError("unit " + to_string(unit) + " outside a " + std::to_string(n_blocks()) + "-block plan");
  }
  if (unit.kind == UnitKind::Block || unit.kind == UnitKind::Attention) attention_[unit.block] = action;
  if (unit.kind == UnitKind::Block || unit.kind == UnitKind::FeedForward) feed_forward_[unit.block] = std::move(action);
}

const UnitAction& ExecutionPlan::action(std::size_t block, UnitKind sublayer) const {
  if (block >= n_blocks()) throw PlanError("block index outside plan");
  switch (sublayer) {
    case UnitKind::Attention: return attention_[block];
    case UnitKind::FeedForward: return feed_forward_[block];
    case UnitKind::Block: break;
  }
  throw PlanError("action() addresses a sublayer, not a block");
}

bool ExecutionPlan::all_executed() const {
  for (std::size_t l = 0; l < n_blocks(); ++l) {
    if (attention_[l].kind != ActionKind::Execute || feed_forward_[l].kind != ActionKind::Execute) return false;
  }
  return true;
}

bool ExecutionPlan::executes(const UnitId& unit) const {
  if (unit.kind == UnitKind::Block) {
    return action(unit.block, UnitKind::Attention).kind == ActionKind::Execute &&
           action(unit.block, UnitKind::FeedForward).kind == ActionKind::Execute;
  }
  return action(unit.block, unit.kind).kind == ActionKind::Execute;
}

const Tensor& Trace::input(const UnitId& unit) const {
  if (unit.block >= n_blocks) throw ContractError("trace has no unit " + to_string(unit));
  const std::size_t i = unit.kind == UnitKind::FeedForward ? 2 * unit.block + 1 : 2 * unit.block;
  if (i >= states.size()) throw ContractError("trace stopped before unit " + to_string(unit));
  return states[i];
}

const Tensor& Trace::output(const UnitId& unit) const {
  if (unit.block >= n_blocks) throw ContractError("trace has no unit " + to_string(unit));
  const std::size_t i = unit.kind == UnitKind::Attention ? 2 * unit.block + 1 : 2 * unit.block + 2;
  if (i >= states.size()) throw ContractError("trace stopped before unit " + to_string(unit));
  return states[i];
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
ad::Var<T> borrow(ad::Tape<T>& tape, const Tensor& t) {
  if constexpr (std::is_same_v<T, float>) {
    return tape.constant_ref(t);
  } else {
    return tape.constant(t.template cast<T>());
  }
}

template <typename T>
ad::Var<T> attention_update(const ad::Var<T>& h, const BlockVars<T>& b, const ModelConfig& c, std::size_t seq_len) {
  auto x = ad::rmsnorm(h, b.attn_norm, c.norm_eps);
  auto q = ad::rope(ad::matmul(x, b.wq), seq_len, c.n_heads, c.rope_base);
  auto k = ad::rope(ad::matmul(x, b.wk), seq_len, c.n_heads, c.rope_base);
  auto v = ad::matmul(x, b.wv);
  auto o = ad::causal_attention(q, k, v, ops::AttentionShape{seq_len, c.n_heads});
  return ad::matmul(o, b.wo);
}

template <typename T>
ad::Var<T> ffn_update(const ad::Var<T>& h, const BlockVars<T>& b, const ModelConfig& c) {
  auto x = ad::rmsnorm(h, b.ffn_norm, c.norm_eps);
  if (c.activation == Activation::SwiGLU) {
    return ad::matmul(ad::swiglu(ad::matmul(x, b.w1), ad::matmul(x, b.w3)), b.w2);
  }
  return ad::matmul(ad::gelu(ad::matmul(x, b.w1)), b.w2);
}

template <typename T>
ad::Var<T> adapter_update(const ad::Var<T>& h, const ad::Var<T>& wa, const ad::Var<T>& wb, const ad::Var<T>& gain,
                          double eps) {
  return ad::matmul(ad::matmul(ad::rmsnorm(h, gain, eps), wa), wb);
}

void check_adapter_shapes(const AdapterParams& a, std::size_t d) {
  if (a.wa.shape() != Shape{d, a.rank} || a.wb.shape() != Shape{a.rank, d} || a.norm_gain.shape() != Shape{d}) {
    throw PlanError("adapter for " + to_string(a.unit) + " has shapes inconsistent with rank " +
                    std::to_string(a.rank) + " and width " + std::to_string(d));
  }
}

// Checks that replacement params belong to this slot. Returns false when a
// block-scoped replacement is met in the feed-forward slot (already applied).
bool replacement_applies(const UnitId& owner, std::size_t block, UnitKind slot) {
  if (owner.block != block) {
    throw PlanError("replacement params for " + to_string(owner) + " placed at block " + std::to_string(block));
  }
  if (owner.kind == UnitKind::Block) return slot == UnitKind::Attention;
  if (owner.kind != slot) {
    throw PlanError("replacement params for " + to_string(owner) + " placed in the " + to_string(slot) + " slot");
  }
  return true;
}

template <typename T>
ad::Var<T> run_slot(ad::Tape<T>& tape, const ad::Var<T>& h, std::size_t l, UnitKind slot, const ModelConfig& c,
                    const WeightVars<T>& w, const ExecutionPlan& plan, const GraphOptions<T>& opt,
                    std::size_t seq_len) {
  if (const AdapterVars<T>* ov = opt.adapter; ov && ov->unit.block == l &&
                                              (ov->unit.kind == slot || ov->unit.kind == UnitKind::Block)) {
    if (!replacement_applies(ov->unit, l, slot)) return h;
    return ad::add(h, adapter_update(h, ov->wa, ov->wb, ov->norm_gain, c.norm_eps));
  }

  const UnitAction& action = plan.action(l, slot);
  switch (action.kind) {
    case ActionKind::Execute:
      return ad::add(h, slot == UnitKind::Attention ? attention_update(h, w.blocks[l], c, seq_len)
                                                    : ffn_update(h, w.blocks[l], c));
    case ActionKind::Skip:
      return h;
    case ActionKind::EmulatedUpdate: {
      if (!action.update) throw PlanError("emulated-update action without parameters at block " + std::to_string(l));
      if (!replacement_applies(action.update->unit, l, slot)) return h;
      if (action.update->delta_mean.numel() != c.dim) throw PlanError("emulated update width mismatch");
      return ad::add_row(h, borrow(tape, action.update->delta_mean));
    }
    case ActionKind::Adapter: {
      if (!action.adapter) throw PlanError("adapter action without parameters at block " + std::to_string(l));
      if (!replacement_applies(action.adapter->unit, l, slot)) return h;
      check_adapter_shapes(*action.adapter, c.dim);
      return ad::add(h, adapter_update(h, borrow(tape, action.adapter->wa), borrow(tape, action.adapter->wb),
                                       borrow(tape, action.adapter->norm_gain), c.norm_eps));
    }
  }
  throw PlanError("unknown action");
}

template <typename T, typename Maker>
WeightVars<T> bind_with(const BasicTransformerWeights<T>& w, Maker&& make) {
  WeightVars<T> v;
  v.embed = make(w.embed);
  for (const auto& b : w.blocks) {
    BlockVars<T> bv;
    bv.attn_norm = make(b.attn_norm);
    bv.wq = make(b.wq);
    bv.wk = make(b.wk);
    bv.wv = make(b.wv);
    bv.wo = make(b.wo);
    bv.ffn_norm = make(b.ffn_norm);
    bv.w1 = make(b.w1);
    if (!b.w3.empty()) bv.w3 = make(b.w3);
    bv.w2 = make(b.w2);
    v.blocks.push_back(std::move(bv));
  }
  v.final_norm = make(w.final_norm);
  v.unembed = make(w.unembed);
  return v;
}

template <typename T>
BlockVars<T> bind_block(ad::Tape<T>& tape, const BasicBlockWeights<T>& b) {
  BlockVars<T> v;
  v.attn_norm = tape.constant_ref(b.attn_norm);
  v.wq = tape.constant_ref(b.wq);
  v.wk = tape.constant_ref(b.wk);
  v.wv = tape.constant_ref(b.wv);
  v.wo = tape.constant_ref(b.wo);
  v.ffn_norm = tape.constant_ref(b.ffn_norm);
  v.w1 = tape.constant_ref(b.w1);
  if (!b.w3.empty()) v.w3 = tape.constant_ref(b.w3);
  v.w2 = tape.constant_ref(b.w2);
  return v;
}

}  // namespace

template <typename T>
WeightVars<T> bind_constants(ad::Tape<T>& tape, const BasicTransformerWeights<T>& weights) {
  return bind_with(weights, [&](const BasicTensor<T>& t) { return tape.constant_ref(t); });
}

template <typename T>
WeightVars<T> bind_watched(ad::Tape<T>& tape, const BasicTransformerWeights<T>& weights) {
  ad::ParamId next = 0;
  return bind_with(weights, [&](const BasicTensor<T>& t) { return tape.watch(next++, t); });
}

template <typename T>
GraphOutput<T> build_graph(ad::Tape<T>& tape, const ModelConfig& config, const WeightVars<T>& weights,
                           const TokenMatrix& tokens, const ExecutionPlan& plan, const GraphOptions<T>& options) {
  if (tokens.rows == 0 || tokens.cols == 0) throw InputError("empty token batch");
  if (tokens.cols > config.max_seq_len) {
    throw InputError("sequence length " + std::to_string(tokens.cols) + " exceeds max_seq_len " +
                     std::to_string(config.max_seq_len));
  }
  if (plan.n_blocks() != config.n_blocks) {
    throw PlanError("plan covers " + std::to_string(plan.n_blocks()) + " blocks, model has " +
                    std::to_string(config.n_blocks));
  }
  if (weights.blocks.size() != config.n_blocks) throw ContractError("weight vars do not match config");

  GraphOutput<T> out;
  auto h = ad::embedding(weights.embed, tokens.ids);
  if (options.capture) out.states.push_back(h);
  for (std::size_t l = 0; l < config.n_blocks; ++l) {
    h = run_slot(tape, h, l, UnitKind::Attention, config, weights, plan, options, tokens.cols);
    if (options.capture) out.states.push_back(h);
    h = run_slot(tape, h, l, UnitKind::FeedForward, config, weights, plan, options, tokens.cols);
    if (options.capture) out.states.push_back(h);
    if (options.stop_after_block && *options.stop_after_block == l) return out;
  }
  out.logits = ad::matmul(ad::rmsnorm(h, weights.final_norm, config.norm_eps), weights.unembed);
  return out;
}

template WeightVars<float> bind_constants(ad::Tape<float>&, const BasicTransformerWeights<float>&);
template WeightVars<double> bind_constants(ad::Tape<double>&, const BasicTransformerWeights<double>&);
template WeightVars<float> bind_watched(ad::Tape<float>&, const BasicTransformerWeights<float>&);
template WeightVars<double> bind_watched(ad::Tape<double>&, const BasicTransformerWeights<double>&);
template GraphOutput<float> build_graph(ad::Tape<float>&, const ModelConfig&, const WeightVars<float>&,
                                        const TokenMatrix&, const ExecutionPlan&, const GraphOptions<float>&);
template GraphOutput<double> build_graph(ad::Tape<double>&, const ModelConfig&, const WeightVars<double>&,
                                         const TokenMatrix&, const ExecutionPlan&, const GraphOptions<double>&);

ForwardResult forward(const Model& model, const TokenMatrix& tokens, const ExecutionPlan& plan,
                      const ForwardOptions& options) {
  ad::Tape<float> tape(/*record=*/false);
  const auto vars = bind_constants(tape, model.weights);
  GraphOptions<float> go;
  go.capture = options.capture;
  go.stop_after_block = options.stop_after_block;
  auto graph = build_graph(tape, model.config, vars, tokens, plan, go);

  ForwardResult result;
  if (graph.logits.valid()) {
    result.logits = graph.logits.value().reshaped({tokens.rows, tokens.cols, model.config.vocab_size});
  }
  if (options.capture) {
    Trace trace;
    trace.n_blocks = model.config.n_blocks;
    trace.states.reserve(graph.states.size());
    for (const auto& s : graph.states) trace.states.push_back(s.value());
    result.trace = std::move(trace);
  }
  return result;
}

Tensor attention_sublayer(const Tensor& h, const BlockWeights& block, const ModelConfig& config) {
  ad::Tape<float> tape(false);
  const auto bv = bind_block(tape, block);
  return attention_update(tape.constant_ref(h), bv, config, h.rows()).value();
}

Tensor ffn_sublayer(const Tensor& h, const BlockWeights& block, const ModelConfig& config) {
  ad::Tape<float> tape(false);
  const auto bv = bind_block(tape, block);
  return ffn_update(tape.constant_ref(h), bv, config).value();
}

double lm_loss(const Tensor& logits, std::span<const std::int32_t> targets, std::span<const std::uint8_t> mask) {
  if (targets.size() != logits.rows() || mask.size() != logits.rows()) {
    throw DimensionError("lm_loss: targets and mask need one entry per logit row");
  }
  const auto logp = ops::target_log_probs(logits, targets);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < logp.size(); ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= logits.cols()) {
      throw InputError("lm_loss: target id outside vocabulary");
    }
    total -= logp[i];
    ++count;
  }
  if (count == 0) throw ContractError("lm_loss: every position is masked");
  return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------

void save_checkpoint(const Model& model, const std::filesystem::path& path, const CheckpointInfo& info) {
  validate_weights(model.config, model.weights);
  Container c;
  c.meta = {{"kind", "checkpoint"}, {"config", model.config}, {"extra", info.extra}};
  if (info.step) c.meta["step"] = *info.step;
  TransformerWeights::visit(model.weights, [&](const std::string& name, const Tensor& t) {
    c.tensors.emplace_back(name, t);
  });
  write_container(path, "PRLB", c);
}

Model load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info) {
  Container c = read_container(path, "PRLB");
  Model m;
  try {
    m.config = c.meta.at("config").get<ModelConfig>();
    m.config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config unreadable: ") + e.what());
  } catch (const ContractError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  m.weights = shaped_weights(m.config);
  std::size_t expected = 0;
  TransformerWeights::visit(m.weights, [&](const std::string& name, Tensor& t) {
    ++expected;
    if (!c.has(name)) throw FormatError("checkpoint is missing tensor '" + name + "'");
    const Tensor& stored = c.tensor(name);
    if (stored.shape() != t.shape()) {
      throw FormatError("tensor '" + name + "' has shape " + shape_to_string(stored.shape()) + ", config implies " +
                        shape_to_string(t.shape()));
    }
    t = stored;
  });
  if (expected != c.tensors.size()) throw FormatError("checkpoint holds tensors the config does not describe");
  if (info) {
    info->step = c.meta.contains("step") ? std::optional<std::size_t>(c.meta["step"].get<std::size_t>()) : std::nullopt;
    info->extra = c.meta.value("extra", nlohmann::json::object());
  }
  return m;
}

}  // namespace depthlab
