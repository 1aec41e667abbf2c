#include "depthlab/autograd.hpp"

#include <cmath>
#include <string>

namespace depthlab::ad {

using ops::Transpose;

template <typename T>
Var<T> Tape<T>::make_var(std::shared_ptr<const BasicTensor<T>> value, std::int64_t node) {
  Var<T> v;
  v.value_ = std::move(value);
  v.tape_ = this;
  v.node_ = node;
  return v;
}

template <typename T>
Var<T> Tape<T>::constant(BasicTensor<T> value) {
  return make_var(std::make_shared<const BasicTensor<T>>(std::move(value)), -1);
}

template <typename T>
Var<T> Tape<T>::constant_ref(const BasicTensor<T>& value) {
  // Aliasing constructor with an empty owner: a non-owning shared_ptr.
  return make_var(std::shared_ptr<const BasicTensor<T>>(std::shared_ptr<void>(), &value), -1);
}

template <typename T>
Var<T> Tape<T>::watch(ParamId id, const BasicTensor<T>& value) {
  watched_.emplace_back(id, value.shape());
  std::shared_ptr<const BasicTensor<T>> ref(std::shared_ptr<void>(), &value);
  if (!record_) return make_var(std::move(ref), -1);
  Node node;
  node.param = id;
  node.shape = value.shape();
  nodes_.push_back(std::move(node));
  return make_var(std::move(ref), static_cast<std::int64_t>(nodes_.size() - 1));
}

template <typename T>
Var<T> Tape<T>::record(BasicTensor<T> value, std::initializer_list<const Var<T>*> inputs, BackwardFn fn) {
  auto ptr = std::make_shared<const BasicTensor<T>>(std::move(value));
  bool needs_grad = false;
  for (const Var<T>* in : inputs) needs_grad = needs_grad || in->requires_grad();
  if (!record_ || !needs_grad) return make_var(std::move(ptr), -1);
  Node node;
  node.backward = std::move(fn);
  node.shape = ptr->shape();
  nodes_.push_back(std::move(node));
  return make_var(std::move(ptr), static_cast<std::int64_t>(nodes_.size() - 1));
}

template <typename T>
void Tape<T>::accumulate(const Var<T>& target, const BasicTensor<T>& grad) {
  if (!target.requires_grad()) return;
  Node& node = nodes_.at(static_cast<std::size_t>(target.node_));
  if (grad.shape() != node.shape) {
    throw DimensionError("gradient shape " + shape_to_string(grad.shape()) + " does not match value " +
                         shape_to_string(node.shape));
  }
  if (!node.has_grad) {
    node.grad = grad;
    node.has_grad = true;
    return;
  }
  auto dst = node.grad.mutable_data();
  auto src = grad.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
std::map<ParamId, BasicTensor<T>> Tape<T>::backward(const Var<T>& loss) {
  if (consumed_) throw ContractError("backward called twice on the same tape");
  if (watched_.empty()) throw ContractError("backward requires at least one watched parameter");
  if (loss.value().numel() != 1) {
    throw ContractError("backward requires a scalar loss, got " + shape_to_string(loss.shape()));
  }
  consumed_ = true;

  std::map<ParamId, BasicTensor<T>> grads;
  for (const auto& [id, shape] : watched_) grads.try_emplace(id, BasicTensor<T>(shape));
  if (!loss.requires_grad()) return grads;

  accumulate(loss, BasicTensor<T>::full(loss.shape(), T{1}));
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.has_grad) continue;
    if (node.param) {
      auto dst = grads.at(*node.param).mutable_data();
      auto src = node.grad.data();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    } else if (node.backward) {
      node.backward(node.grad);
    }
    node.grad = BasicTensor<T>();
    node.backward = nullptr;
  }
  return grads;
}

// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, Transpose ta, Transpose tb) {
  Tape<T>& tape = a.tape();
  return tape.record(ops::matmul(a.value(), b.value(), ta, tb), {&a, &b},
                     [&tape, a, b, ta, tb](const BasicTensor<T>& g) {
                       const bool at = ta == Transpose::Yes;
                       const bool bt = tb == Transpose::Yes;
                       if (a.requires_grad()) {
                         BasicTensor<T> da = at ? ops::matmul(b.value(), g, bt ? Transpose::Yes : Transpose::No, Transpose::Yes)
                                                : ops::matmul(g, b.value(), Transpose::No, bt ? Transpose::No : Transpose::Yes);
                         tape.accumulate(a, da);
                       }
                       if (b.requires_grad()) {
                         BasicTensor<T> db = bt ? ops::matmul(g, a.value(), Transpose::Yes, at ? Transpose::Yes : Transpose::No)
                                                : ops::matmul(a.value(), g, at ? Transpose::No : Transpose::Yes, Transpose::No);
                         tape.accumulate(b, db);
                       }
                     });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = a.tape();
  return tape.record(ops::add(a.value(), b.value()), {&a, &b}, [&tape, a, b](const BasicTensor<T>& g) {
    tape.accumulate(a, g);
    tape.accumulate(b, g);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = a.tape();
  return tape.record(ops::sub(a.value(), b.value()), {&a, &b}, [&tape, a, b](const BasicTensor<T>& g) {
    tape.accumulate(a, g);
    if (b.requires_grad()) tape.accumulate(b, ops::scale(g, -1.0));
  });
}

template <typename T>
Var<T> hadamard(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = a.tape();
  return tape.record(ops::hadamard(a.value(), b.value()), {&a, &b}, [&tape, a, b](const BasicTensor<T>& g) {
    if (a.requires_grad()) tape.accumulate(a, ops::hadamard(g, b.value()));
    if (b.requires_grad()) tape.accumulate(b, ops::hadamard(g, a.value()));
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, double factor) {
  Tape<T>& tape = a.tape();
  return tape.record(ops::scale(a.value(), factor), {&a},
                     [&tape, a, factor](const BasicTensor<T>& g) { tape.accumulate(a, ops::scale(g, factor)); });
}

template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& v) {
  Tape<T>& tape = x.tape();
  return tape.record(ops::add_row(x.value(), v.value()), {&x, &v}, [&tape, x, v](const BasicTensor<T>& g) {
    tape.accumulate(x, g);
    if (v.requires_grad()) tape.accumulate(v, ops::sum_rows(g).reshaped(v.shape()));
  });
}

template <typename T>
Var<T> rmsnorm(const Var<T>& x, const Var<T>& gain, double eps) {
  Tape<T>& tape = x.tape();
  return tape.record(ops::rmsnorm(x.value(), gain.value(), eps), {&x, &gain},
                     [&tape, x, gain, eps](const BasicTensor<T>& g) {
                       BasicTensor<T> dx;
                       BasicTensor<T> dg;
                       ops::rmsnorm_backward(x.value(), gain.value(), eps, g, x.requires_grad() ? &dx : nullptr,
                                             gain.requires_grad() ? &dg : nullptr);
                       if (x.requires_grad()) tape.accumulate(x, dx);
                       if (gain.requires_grad()) tape.accumulate(gain, dg.reshaped(gain.shape()));
                     });
}

template <typename T>
Var<T> swiglu(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = a.tape();
  return tape.record(ops::swiglu(a.value(), b.value()), {&a, &b}, [&tape, a, b](const BasicTensor<T>& g) {
    const auto av = a.value().data();
    const auto bv = b.value().data();
    const auto gv = g.data();
    if (a.requires_grad()) {
      BasicTensor<T> da(a.shape());
      auto d = da.mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = static_cast<T>(static_cast<double>(gv[i]) * bv[i] * ops::silu_grad(av[i]));
      }
      tape.accumulate(a, da);
    }
    if (b.requires_grad()) {
      BasicTensor<T> db(b.shape());
      auto d = db.mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(static_cast<double>(gv[i]) * ops::silu(av[i]));
      tape.accumulate(b, db);
    }
  });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  Tape<T>& tape = a.tape();
  return tape.record(ops::gelu(a.value()), {&a}, [&tape, a](const BasicTensor<T>& g) {
    BasicTensor<T> da(a.shape());
    auto d = da.mutable_data();
    const auto av = a.value().data();
    const auto gv = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(static_cast<double>(gv[i]) * ops::gelu_grad(av[i]));
    tape.accumulate(a, da);
  });
}

template <typename T>
Var<T> rope(const Var<T>& x, std::size_t seq_len, std::size_t n_heads, double base) {
  Tape<T>& tape = x.tape();
  return tape.record(ops::rope(x.value(), seq_len, n_heads, base, false), {&x},
                     [&tape, x, seq_len, n_heads, base](const BasicTensor<T>& g) {
                       tape.accumulate(x, ops::rope(g, seq_len, n_heads, base, true));
                     });
}

template <typename T>
Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, ops::AttentionShape shape) {
  Tape<T>& tape = q.tape();
  const bool needs = tape.recording() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
  auto cache = needs ? std::make_shared<ops::AttentionCache>() : nullptr;
  auto out = ops::causal_attention(q.value(), k.value(), v.value(), shape, cache.get());
  return tape.record(std::move(out), {&q, &k, &v}, [&tape, q, k, v, shape, cache](const BasicTensor<T>& g) {
    BasicTensor<T> dq;
    BasicTensor<T> dk;
    BasicTensor<T> dv;
    ops::causal_attention_backward(q.value(), k.value(), v.value(), shape, *cache, g,
                                   q.requires_grad() ? &dq : nullptr, k.requires_grad() ? &dk : nullptr,
                                   v.requires_grad() ? &dv : nullptr);
    if (q.requires_grad()) tape.accumulate(q, dq);
    if (k.requires_grad()) tape.accumulate(k, dk);
    if (v.requires_grad()) tape.accumulate(v, dv);
  });
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids) {
  Tape<T>& tape = table.tape();
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return tape.record(ops::embedding(table.value(), ids), {&table},
                     [&tape, table, saved = std::move(saved)](const BasicTensor<T>& g) {
                       std::vector<double> acc(table.value().numel(), 0.0);
                       const std::size_t d = table.value().cols();
                       for (std::size_t i = 0; i < saved.size(); ++i) {
                         auto src = g.row(i);
                         double* dst = acc.data() + static_cast<std::size_t>(saved[i]) * d;
                         for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                       }
                       std::vector<T> out(acc.begin(), acc.end());
                       tape.accumulate(table, BasicTensor<T>(table.shape(), std::move(out)));
                     });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  Tape<T>& tape = x.tape();
  double s = 0.0;
  for (T v : x.value().data()) s += v;
  return tape.record(BasicTensor<T>({1}, {static_cast<T>(s)}), {&x}, [&tape, x](const BasicTensor<T>& g) {
    tape.accumulate(x, BasicTensor<T>::full(x.shape(), g[0]));
  });
}

template <typename T>
Var<T> sum_squares(const Var<T>& x) {
  Tape<T>& tape = x.tape();
  double s = 0.0;
  for (T v : x.value().data()) s += static_cast<double>(v) * v;
  return tape.record(BasicTensor<T>({1}, {static_cast<T>(s)}), {&x},
                     [&tape, x](const BasicTensor<T>& g) { tape.accumulate(x, ops::scale(x.value(), 2.0 * g[0])); });
}

template <typename T>
Var<T> masked_nll(const Var<T>& logits, std::span<const std::int32_t> targets, std::span<const std::uint8_t> mask) {
  Tape<T>& tape = logits.tape();
  const BasicTensor<T>& z = logits.value();
  if (targets.size() != z.rows() || mask.size() != z.rows()) {
    throw DimensionError("masked_nll: targets/mask must have one entry per logit row");
  }
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  std::size_t count = 0;
  for (std::size_t r = 0; r < msk.size(); ++r) {
    if (!msk[r]) continue;
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= z.cols()) {
      throw InputError("masked_nll: target id " + std::to_string(tgt[r]) + " outside vocabulary");
    }
    ++count;
  }
  if (count == 0) throw ContractError("masked_nll: every position is masked");
  const auto logp = ops::target_log_probs(z, tgt);
  double total = 0.0;
  for (std::size_t r = 0; r < msk.size(); ++r) {
    if (msk[r]) total -= logp[r];
  }
  const double mean = total / static_cast<double>(count);
  return tape.record(BasicTensor<T>({1}, {static_cast<T>(mean)}), {&logits},
                     [&tape, logits, tgt = std::move(tgt), msk = std::move(msk), count](const BasicTensor<T>& g) {
                       const BasicTensor<T>& zz = logits.value();
                       BasicTensor<T> dz(zz.shape());
                       const double w = static_cast<double>(g[0]) / static_cast<double>(count);
                       const std::size_t v = zz.cols();
                       for (std::size_t r = 0; r < zz.rows(); ++r) {
                         if (!msk[r]) continue;
                         auto row = zz.row(r);
                         const double mx = *std::max_element(row.begin(), row.end());
                         double s = 0.0;
                         for (std::size_t c = 0; c < v; ++c) s += std::exp(static_cast<double>(row[c]) - mx);
                         auto out = dz.row(r);
                         for (std::size_t c = 0; c < v; ++c) {
                           double p = std::exp(static_cast<double>(row[c]) - mx) / s;
                           if (static_cast<std::int32_t>(c) == tgt[r]) p -= 1.0;
                           out[c] = static_cast<T>(p * w);
                         }
                       }
                       tape.accumulate(logits, dz);
                     });
}

template <typename T>
Var<T> mean_row_sq_dist(const Var<T>& a, const Var<T>& b, std::span<const std::uint8_t> mask) {
  Tape<T>& tape = a.tape();
  if (a.shape() != b.shape()) throw DimensionError("mean_row_sq_dist: operand shapes differ");
  const std::size_t rows = a.value().rows();
  const std::size_t cols = a.value().cols();
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  if (msk.empty()) msk.assign(rows, 1);
  if (msk.size() != rows) throw DimensionError("mean_row_sq_dist: mask length differs from row count");
  std::size_t count = 0;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!msk[r]) continue;
    ++count;
    auto x = a.value().row(r);
    auto y = b.value().row(r);
    for (std::size_t c = 0; c < cols; ++c) {
      const double diff = static_cast<double>(x[c]) - y[c];
      total += diff * diff;
    }
  }
  if (count == 0) throw ContractError("mean_row_sq_dist: every row is masked");
  const double mean = total / static_cast<double>(count);
  return tape.record(BasicTensor<T>({1}, {static_cast<T>(mean)}), {&a, &b},
                     [&tape, a, b, msk = std::move(msk), count](const BasicTensor<T>& g) {
                       BasicTensor<T> da(a.shape());
                       const double w = 2.0 * static_cast<double>(g[0]) / static_cast<double>(count);
                       const std::size_t cc = a.value().cols();
                       for (std::size_t r = 0; r < msk.size(); ++r) {
                         if (!msk[r]) continue;
                         auto x = a.value().row(r);
                         auto y = b.value().row(r);
                         auto o = da.row(r);
                         for (std::size_t c = 0; c < cc; ++c) o[c] = static_cast<T>((static_cast<double>(x[c]) - y[c]) * w);
                       }
                       tape.accumulate(a, da);
                       if (b.requires_grad()) tape.accumulate(b, ops::scale(da, -1.0));
                     });
}

#define DEPTHLAB_INSTANTIATE_AD(T)                                                                   \
  template class Tape<T>;                                                                            \
  template Var<T> matmul(const Var<T>&, const Var<T>&, Transpose, Transpose);                        \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> hadamard(const Var<T>&, const Var<T>&);                                            \
  template Var<T> scale(const Var<T>&, double);                                                      \
  template Var<T> add_row(const Var<T>&, const Var<T>&);                                             \
  template Var<T> rmsnorm(const Var<T>&, const Var<T>&, double);                                     \
  template Var<T> swiglu(const Var<T>&, const Var<T>&);                                              \
  template Var<T> gelu(const Var<T>&);                                                               \
  template Var<T> rope(const Var<T>&, std::size_t, std::size_t, double);                             \
  template Var<T> causal_attention(const Var<T>&, const Var<T>&, const Var<T>&, ops::AttentionShape); \
  template Var<T> embedding(const Var<T>&, std::span<const std::int32_t>);                           \
  template Var<T> sum(const Var<T>&);                                                                \
  template Var<T> sum_squares(const Var<T>&);                                                        \
  template Var<T> masked_nll(const Var<T>&, std::span<const std::int32_t>, std::span<const std::uint8_t>); \
  template Var<T> mean_row_sq_dist(const Var<T>&, const Var<T>&, std::span<const std::uint8_t>);

DEPTHLAB_INSTANTIATE_AD(float)
DEPTHLAB_INSTANTIATE_AD(double)

#undef DEPTHLAB_INSTANTIATE_AD

}  // namespace depthlab::ad
