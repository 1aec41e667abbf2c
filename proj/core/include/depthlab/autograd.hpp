#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "depthlab/ops.hpp"
#include "depthlab/tensor.hpp"

// Tensor-level reverse-mode differentiation.
//
// A Var holds a shared, immutable value. Only operations with at least one
// gradient-carrying input are recorded on the tape, so frozen weights and
// everything computed purely from them cost nothing beyond the forward
// kernels. A Tape constructed with record=false never records, which turns
// the same graph code into a plain inference path that frees intermediates
// as soon as they go out of scope.
namespace depthlab::ad {

using ParamId = std::size_t;

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;

  const BasicTensor<T>& value() const { return *value_; }
  const Shape& shape() const { return value_->shape(); }
  bool requires_grad() const noexcept { return node_ >= 0; }
  bool valid() const noexcept { return static_cast<bool>(value_); }
  Tape<T>& tape() const { return *tape_; }

 private:
  friend class Tape<T>;
  std::shared_ptr<const BasicTensor<T>> value_;
  Tape<T>* tape_ = nullptr;
  std::int64_t node_ = -1;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const BasicTensor<T>& out_grad)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }

  Var<T> constant(BasicTensor<T> value);
  // Borrows `value`; it must outlive every Var derived from it.
  Var<T> constant_ref(const BasicTensor<T>& value);
  // Borrowed leaf whose gradient backward() reports under `id`.
  Var<T> watch(ParamId id, const BasicTensor<T>& value);

  // Records `value` as the output of an operation. `fn` receives the output
  // gradient and must call accumulate() for inputs that require gradients.
  Var<T> record(BasicTensor<T> value, std::initializer_list<const Var<T>*> inputs, BackwardFn fn);

  void accumulate(const Var<T>& target, const BasicTensor<T>& grad);

  // dloss/dparam for every watched id. Replays recorded nodes in exact
  // reverse order; watched parameters with no path to `loss` get zeros.
  std::map<ParamId, BasicTensor<T>> backward(const Var<T>& loss);

  std::size_t node_count() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    BackwardFn backward;
    std::optional<ParamId> param;
    Shape shape;
    BasicTensor<T> grad;
    bool has_grad = false;
  };

  Var<T> make_var(std::shared_ptr<const BasicTensor<T>> value, std::int64_t node);

  bool record_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
  std::vector<std::pair<ParamId, Shape>> watched_;
};

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, ops::Transpose ta = ops::Transpose::No,
              ops::Transpose tb = ops::Transpose::No);
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> hadamard(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, double factor);
template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& v);
template <typename T>
Var<T> rmsnorm(const Var<T>& x, const Var<T>& gain, double eps);
template <typename T>
Var<T> swiglu(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> gelu(const Var<T>& a);
template <typename T>
Var<T> rope(const Var<T>& x, std::size_t seq_len, std::size_t n_heads, double base);
template <typename T>
Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, ops::AttentionShape shape);
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids);

// Scalar sum of all elements.
template <typename T>
Var<T> sum(const Var<T>& x);
// Scalar Σ x².
template <typename T>
Var<T> sum_squares(const Var<T>& x);

// Mean negative log-likelihood of `targets` over rows with mask != 0.
// Throws ContractError when every row is masked out.
template <typename T>
Var<T> masked_nll(const Var<T>& logits, std::span<const std::int32_t> targets,
                  std::span<const std::uint8_t> mask);

// Mean over rows with mask != 0 of Σ_c (a − b)². An empty mask selects all rows.
template <typename T>
Var<T> mean_row_sq_dist(const Var<T>& a, const Var<T>& b, std::span<const std::uint8_t> mask = {});

}  // namespace depthlab::ad
