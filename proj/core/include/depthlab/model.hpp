#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "depthlab/autograd.hpp"
#include "depthlab/recovery_params.hpp"
#include "depthlab/tensor.hpp"
#include "depthlab/units.hpp"

namespace depthlab {

enum class Activation { SwiGLU, GELU };

std::string to_string(Activation activation);
Activation parse_activation(const std::string& text);

struct ModelConfig {
  std::size_t vocab_size = 258;
  std::size_t dim = 128;
  std::size_t n_blocks = 8;
  std::size_t n_heads = 4;
  std::size_t ffn_hidden = 352;
  std::size_t max_seq_len = 256;
  double norm_eps = 1e-5;
  double rope_base = 10000.0;
  Activation activation = Activation::SwiGLU;

  // Throws ContractError on an unusable configuration.
  void validate() const;
  std::size_t head_dim() const { return dim / n_heads; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Row-vector convention throughout: y = x · W, so projections are stored
// [in × out]. w3 is empty for the GELU feed-forward.
template <typename T>
struct BasicBlockWeights {
  BasicTensor<T> attn_norm;  // [D]
  BasicTensor<T> wq, wk, wv, wo;  // [D×D]
  BasicTensor<T> ffn_norm;  // [D]
  BasicTensor<T> w1;  // [D×F]
  BasicTensor<T> w3;  // [D×F] (SwiGLU gate partner)
  BasicTensor<T> w2;  // [F×D]

  friend bool operator==(const BasicBlockWeights&, const BasicBlockWeights&) = default;
};

template <typename T>
struct BasicTransformerWeights {
  BasicTensor<T> embed;       // W_E [vocab×D]
  std::vector<BasicBlockWeights<T>> blocks;
  BasicTensor<T> final_norm;  // [D]
  BasicTensor<T> unembed;     // W_U [D×vocab]

  // Visits every tensor in canonical order with its stable name
  // ("embed", "blocks.3.attn.wq", ...). Empty tensors are skipped.
  template <typename Self, typename F>
  static void visit(Self& self, F&& fn) {
    fn(std::string("embed"), self.embed);
    for (std::size_t l = 0; l < self.blocks.size(); ++l) {
      auto& b = self.blocks[l];
      const std::string p = "blocks." + std::to_string(l) + ".";
      fn(p + "attn_norm", b.attn_norm);
      fn(p + "attn.wq", b.wq);
      fn(p + "attn.wk", b.wk);
      fn(p + "attn.wv", b.wv);
      fn(p + "attn.wo", b.wo);
      fn(p + "ffn_norm", b.ffn_norm);
      fn(p + "ffn.w1", b.w1);
      if (!b.w3.empty()) fn(p + "ffn.w3", b.w3);
      fn(p + "ffn.w2", b.w2);
    }
    fn(std::string("final_norm"), self.final_norm);
    fn(std::string("unembed"), self.unembed);
  }

  template <typename U>
  BasicTransformerWeights<U> cast() const {
    BasicTransformerWeights<U> out;
    out.embed = embed.template cast<U>();
    out.final_norm = final_norm.template cast<U>();
    out.unembed = unembed.template cast<U>();
    for (const auto& b : blocks) {
      out.blocks.push_back({b.attn_norm.template cast<U>(), b.wq.template cast<U>(), b.wk.template cast<U>(),
                            b.wv.template cast<U>(), b.wo.template cast<U>(), b.ffn_norm.template cast<U>(),
                            b.w1.template cast<U>(), b.w3.template cast<U>(), b.w2.template cast<U>()});
    }
    return out;
  }

  friend bool operator==(const BasicTransformerWeights&, const BasicTransformerWeights&) = default;
};

using BlockWeights = BasicBlockWeights<float>;
using TransformerWeights = BasicTransformerWeights<float>;

struct Model {
  ModelConfig config;
  TransformerWeights weights;
};

// normal(0, 0.02) for projections and embeddings, with the two residual
// output projections (wo, w2) further scaled by 1/sqrt(2L); norm gains one.
TransformerWeights init_weights(const ModelConfig& config, std::uint64_t seed);
Model make_model(const ModelConfig& config, std::uint64_t seed);

// Shape check of every tensor against the config; throws DimensionError.
void validate_weights(const ModelConfig& config, const TransformerWeights& weights);

std::size_t parameter_count(const TransformerWeights& weights);

// B×T token ids, row-major. Each row is an independent sequence whose
// positions restart at zero.
struct TokenMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> ids;

  TokenMatrix() = default;
  TokenMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), ids(r * c, 0) {}
  TokenMatrix(std::size_t r, std::size_t c, std::vector<std::int32_t> values);

  std::span<const std::int32_t> row(std::size_t r) const { return std::span(ids).subspan(r * cols, cols); }
  std::span<std::int32_t> row(std::size_t r) { return std::span(ids).subspan(r * cols, cols); }
  std::size_t size() const { return ids.size(); }

  friend bool operator==(const TokenMatrix&, const TokenMatrix&) = default;
};

// ---------------------------------------------------------------------------
// Execution plans

enum class ActionKind { Execute, Skip, EmulatedUpdate, Adapter };

std::string to_string(ActionKind kind);

struct UnitAction {
  ActionKind kind = ActionKind::Execute;
  std::shared_ptr<const EmulatedUpdateParams> update;
  std::shared_ptr<const AdapterParams> adapter;

  static UnitAction execute() { return {}; }
  static UnitAction skip() { return {ActionKind::Skip, nullptr, nullptr}; }
  static UnitAction emulated(std::shared_ptr<const EmulatedUpdateParams> p) {
    return {ActionKind::EmulatedUpdate, std::move(p), nullptr};
  }
  static UnitAction with_adapter(std::shared_ptr<const AdapterParams> p) {
    return {ActionKind::Adapter, nullptr, std::move(p)};
  }

  friend bool operator==(const UnitAction&, const UnitAction&) = default;
};

// Per-sublayer actions realizing a subset model. Setting a Block unit writes
// the same action to both of its sublayers. A block-scoped replacement
// (params whose unit kind is Block) is applied once, in the attention slot,
// to the block input; the feed-forward slot then contributes nothing.
class ExecutionPlan {
 public:
  ExecutionPlan() = default;
  explicit ExecutionPlan(std::size_t n_blocks);

  static ExecutionPlan all_execute(std::size_t n_blocks) { return ExecutionPlan(n_blocks); }
  // Skip every listed unit, execute everything else.
  static ExecutionPlan skipping(std::size_t n_blocks, std::span<const UnitId> units);

  std::size_t n_blocks() const noexcept { return attention_.size(); }

  void set(const UnitId& unit, UnitAction action);
  const UnitAction& action(std::size_t block, UnitKind sublayer) const;

  bool all_executed() const;
  bool executes(const UnitId& unit) const;

  friend bool operator==(const ExecutionPlan&, const ExecutionPlan&) = default;

 private:
  std::vector<UnitAction> attention_;
  std::vector<UnitAction> feed_forward_;
};

// ---------------------------------------------------------------------------
// Hidden-state capture

// Residual-stream states of one forward call, each [B·T × D]:
// states[2l] = H^l (block input), states[2l+1] = H'^l (after attention),
// states[2l+2] = H^{l+1} (block output).
struct Trace {
  std::size_t n_blocks = 0;
  std::vector<Tensor> states;

  const Tensor& input(const UnitId& unit) const;
  const Tensor& output(const UnitId& unit) const;
};

// ---------------------------------------------------------------------------
// Forward pass

struct ForwardOptions {
  bool capture = false;
  // Stop after this block: no logits are produced and the trace holds only
  // the states up to H^{stop+1}.
  std::optional<std::size_t> stop_after_block;
};

struct ForwardResult {
  Tensor logits;  // [B×T×vocab]; empty when stopped early
  std::optional<Trace> trace;
};

ForwardResult forward(const Model& model, const TokenMatrix& tokens, const ExecutionPlan& plan,
                      const ForwardOptions& options = {});

// Residual update of one attention sublayer applied to a single sequence
// h [T×D] (positions 0..T−1).
Tensor attention_sublayer(const Tensor& h, const BlockWeights& block, const ModelConfig& config);
// Residual update of one feed-forward sublayer; rows are independent.
Tensor ffn_sublayer(const Tensor& h, const BlockWeights& block, const ModelConfig& config);

// Mean next-token NLL over positions with mask != 0, accumulated in double.
// logits: [B×T×V] (or [N×V]); targets/mask: one entry per position.
double lm_loss(const Tensor& logits, std::span<const std::int32_t> targets, std::span<const std::uint8_t> mask);

// ---------------------------------------------------------------------------
// Differentiable graph construction, shared by inference and training.

template <typename T>
struct BlockVars {
  ad::Var<T> attn_norm, wq, wk, wv, wo, ffn_norm, w1, w3, w2;
};

template <typename T>
struct WeightVars {
  ad::Var<T> embed;
  std::vector<BlockVars<T>> blocks;
  ad::Var<T> final_norm;
  ad::Var<T> unembed;
};

// Every weight as a borrowed constant (no gradients).
template <typename T>
WeightVars<T> bind_constants(ad::Tape<T>& tape, const BasicTransformerWeights<T>& weights);

// Every weight watched; ParamId is the canonical visit() index.
template <typename T>
WeightVars<T> bind_watched(ad::Tape<T>& tape, const BasicTransformerWeights<T>& weights);

// Adapter whose tensors are supplied as graph variables (e.g. watched
// parameters during training). Replaces the plan's action for `unit`.
template <typename T>
struct AdapterVars {
  UnitId unit;
  ad::Var<T> wa, wb, norm_gain;
};

template <typename T>
struct GraphOptions {
  bool capture = false;
  std::optional<std::size_t> stop_after_block;
  const AdapterVars<T>* adapter = nullptr;
};

template <typename T>
struct GraphOutput {
  ad::Var<T> logits;  // [B·T × vocab]
  std::vector<ad::Var<T>> states;
};

template <typename T>
GraphOutput<T> build_graph(ad::Tape<T>& tape, const ModelConfig& config, const WeightVars<T>& weights,
                           const TokenMatrix& tokens, const ExecutionPlan& plan,
                           const GraphOptions<T>& options = {});

// ---------------------------------------------------------------------------
// Checkpoints ("PRLB" container)

struct CheckpointInfo {
  std::optional<std::size_t> step;
  nlohmann::json extra = nlohmann::json::object();
};

void save_checkpoint(const Model& model, const std::filesystem::path& path, const CheckpointInfo& info = {});
Model load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

}  // namespace depthlab
