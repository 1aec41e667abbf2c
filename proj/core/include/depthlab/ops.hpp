#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "depthlab/tensor.hpp"

// Dense kernels shared by the inference path and the gradient tape. All
// reductions accumulate in double; float results are rounded once at the end.
namespace depthlab::ops {

enum class Transpose : bool { No = false, Yes = true };

// op(a)[m×k] · op(b)[k×n] for rank-2 operands.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b,
                      Transpose ta = Transpose::No, Transpose tb = Transpose::No);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> hadamard(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, double factor);

// x[r, :] + v for every row r.
template <typename T>
BasicTensor<T> add_row(const BasicTensor<T>& x, const BasicTensor<T>& v);

// Column sums of a matrix, i.e. the adjoint of add_row's broadcast.
template <typename T>
BasicTensor<T> sum_rows(const BasicTensor<T>& x);

// y = gain ⊙ x / sqrt(mean(x²) + eps), applied to every row.
template <typename T>
BasicTensor<T> rmsnorm(const BasicTensor<T>& x, const BasicTensor<T>& gain, double eps);

template <typename T>
void rmsnorm_backward(const BasicTensor<T>& x, const BasicTensor<T>& gain, double eps,
                      const BasicTensor<T>& dy, BasicTensor<T>* dx, BasicTensor<T>* dgain);

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x);

double silu(double x);
double silu_grad(double x);
double gelu(double x);
double gelu_grad(double x);

// silu(a) ⊙ b
template <typename T>
BasicTensor<T> swiglu(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& a);

// Rotary position encoding on a [rows × n_heads·head_dim] matrix whose rows
// are grouped into sequences of `seq_len`; row r sits at position r % seq_len.
// Pairs (2i, 2i+1) of each head rotate by pos · base^(-2i/head_dim).
// `inverse` applies the transpose rotation (the vector-Jacobian product).
template <typename T>
BasicTensor<T> rope(const BasicTensor<T>& x, std::size_t seq_len, std::size_t n_heads, double base,
                    bool inverse = false);

struct AttentionShape {
  std::size_t seq_len = 0;
  std::size_t n_heads = 0;
};

// Saved softmax probabilities, one T×T block per (sequence, head).
struct AttentionCache {
  std::vector<double> probs;
};

// Causal multi-head scaled dot-product attention over already-projected
// (and rotated) q, k, v. Scale is 1/sqrt(head_dim). Returns the concatenated
// head outputs before the output projection.
template <typename T>
BasicTensor<T> causal_attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                const BasicTensor<T>& v, AttentionShape shape,
                                AttentionCache* cache = nullptr);

template <typename T>
void causal_attention_backward(const BasicTensor<T>& q, const BasicTensor<T>& k,
                               const BasicTensor<T>& v, AttentionShape shape,
                               const AttentionCache& cache, const BasicTensor<T>& dout,
                               BasicTensor<T>* dq, BasicTensor<T>* dk, BasicTensor<T>* dv);

// Gathers table rows; ids must be < table.dim(0).
template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const std::int32_t> ids);

// Per-row log-softmax evaluated at `targets`, in double.
template <typename T>
std::vector<double> target_log_probs(const BasicTensor<T>& logits, std::span<const std::int32_t> targets);

}  // namespace depthlab::ops
