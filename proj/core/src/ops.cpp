#include "depthlab/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace depthlab::ops {
namespace {

// OpenBLAS parallelism is disabled; concurrency lives in the callers.
[[maybe_unused]] const bool g_blas_single_threaded = [] {
  openblas_set_num_threads(1);
  return true;
}();

void require_rank2(const Shape& s, const char* what) {
  if (s.size() != 2) throw DimensionError(std::string(what) + " expects a matrix, got " + shape_to_string(s));
}

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_to_string(a) + " vs " +
                         shape_to_string(b));
  }
}

// Double-precision view of a tensor: borrows storage for double tensors,
// converts float tensors once.
template <typename T>
class DoubleView {
 public:
  explicit DoubleView(const BasicTensor<T>& t) {
    if constexpr (std::is_same_v<T, double>) {
      ptr_ = t.data().data();
    } else {
      buffer_.assign(t.data().begin(), t.data().end());
      ptr_ = buffer_.data();
    }
  }
  const double* data() const { return ptr_; }

 private:
  std::vector<double> buffer_;
  const double* ptr_ = nullptr;
};

template <typename T>
BasicTensor<T> from_double(Shape shape, const std::vector<double>& values) {
  std::vector<T> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<T>(values[i]);
  return BasicTensor<T>(std::move(shape), std::move(out));
}

void dgemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* a,
           std::size_t lda, const double* b, std::size_t ldb, double beta, double* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] *= beta;
    }
    return;
  }
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), 1.0, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

template <typename T, typename F>
BasicTensor<T> elementwise(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* what, F f) {
  require_same_shape(a.shape(), b.shape(), what);
  BasicTensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<T>(f(static_cast<double>(x[i]), static_cast<double>(y[i])));
  require_finite(out, what);
  return out;
}

}  // namespace

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b, Transpose ta, Transpose tb) {
  require_rank2(a.shape(), "matmul");
  require_rank2(b.shape(), "matmul");
  const bool at = ta == Transpose::Yes;
  const bool bt = tb == Transpose::Yes;
  const std::size_t m = at ? a.dim(1) : a.dim(0);
  const std::size_t k = at ? a.dim(0) : a.dim(1);
  const std::size_t kb = bt ? b.dim(1) : b.dim(0);
  const std::size_t n = bt ? b.dim(0) : b.dim(1);
  if (k != kb) {
    throw DimensionError("matmul inner dimensions differ: " + shape_to_string(a.shape()) + " · " +
                         shape_to_string(b.shape()));
  }
  DoubleView<T> av(a);
  DoubleView<T> bv(b);
  std::vector<double> c(m * n, 0.0);
  dgemm(at, bt, m, n, k, av.data(), a.dim(1), bv.data(), b.dim(1), 0.0, c.data(), n);
  auto out = from_double<T>({m, n}, c);
  require_finite(out, "matmul");
  return out;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(a, b, "add", [](double x, double y) { return x + y; });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(a, b, "sub", [](double x, double y) { return x - y; });
}

template <typename T>
BasicTensor<T> hadamard(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(a, b, "hadamard", [](double x, double y) { return x * y; });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, double factor) {
  BasicTensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<T>(static_cast<double>(x[i]) * factor);
  require_finite(out, "scale");
  return out;
}

template <typename T>
BasicTensor<T> add_row(const BasicTensor<T>& x, const BasicTensor<T>& v) {
  if (v.numel() != x.cols()) {
    throw DimensionError("add_row: vector " + shape_to_string(v.shape()) + " vs rows of " +
                         shape_to_string(x.shape()));
  }
  BasicTensor<T> out(x.shape());
  const std::size_t cols = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    for (std::size_t c = 0; c < cols; ++c) o[c] = static_cast<T>(static_cast<double>(in[c]) + static_cast<double>(v[c]));
  }
  require_finite(out, "add_row");
  return out;
}

template <typename T>
BasicTensor<T> sum_rows(const BasicTensor<T>& x) {
  std::vector<double> acc(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += in[c];
  }
  return from_double<T>({x.cols()}, acc);
}

template <typename T>
BasicTensor<T> rmsnorm(const BasicTensor<T>& x, const BasicTensor<T>& gain, double eps) {
  const std::size_t d = x.cols();
  if (gain.numel() != d) {
    throw DimensionError("rmsnorm gain " + shape_to_string(gain.shape()) + " vs input " + shape_to_string(x.shape()));
  }
  if (!(eps > 0.0)) throw ContractError("rmsnorm eps must be positive");
  BasicTensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    double ss = 0.0;
    for (std::size_t c = 0; c < d; ++c) ss += static_cast<double>(in[c]) * in[c];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    auto o = out.row(r);
    for (std::size_t c = 0; c < d; ++c) o[c] = static_cast<T>(static_cast<double>(gain[c]) * in[c] * inv);
  }
  require_finite(out, "rmsnorm");
  return out;
}

template <typename T>
void rmsnorm_backward(const BasicTensor<T>& x, const BasicTensor<T>& gain, double eps,
                      const BasicTensor<T>& dy, BasicTensor<T>* dx, BasicTensor<T>* dgain) {
  const std::size_t d = x.cols();
  std::vector<double> dg(d, 0.0);
  if (dx) *dx = BasicTensor<T>(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto g = dy.row(r);
    double ss = 0.0;
    for (std::size_t c = 0; c < d; ++c) ss += static_cast<double>(in[c]) * in[c];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    double dot = 0.0;  // Σ_c dy_c · gain_c · x_c
    for (std::size_t c = 0; c < d; ++c) {
      dot += static_cast<double>(g[c]) * gain[c] * in[c];
      dg[c] += static_cast<double>(g[c]) * in[c] * inv;
    }
    if (dx) {
      auto o = dx->row(r);
      const double coef = dot * inv * inv * inv / static_cast<double>(d);
      for (std::size_t c = 0; c < d; ++c) {
        o[c] = static_cast<T>(static_cast<double>(g[c]) * gain[c] * inv - static_cast<double>(in[c]) * coef);
      }
    }
  }
  if (dgain) *dgain = from_double<T>(gain.shape(), dg);
}

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  const std::size_t n = x.cols();
  std::vector<double> e(n);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      e[c] = std::exp(static_cast<double>(in[c]) - mx);
      sum += e[c];
    }
    auto o = out.row(r);
    for (std::size_t c = 0; c < n; ++c) o[c] = static_cast<T>(e[c] / sum);
  }
  require_finite(out, "softmax_rows");
  return out;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

template <typename T>
BasicTensor<T> swiglu(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(a, b, "swiglu", [](double x, double y) { return silu(x) * y; });
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& a) {
  BasicTensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<T>(gelu(static_cast<double>(x[i])));
  require_finite(out, "gelu");
  return out;
}

template <typename T>
BasicTensor<T> rope(const BasicTensor<T>& x, std::size_t seq_len, std::size_t n_heads, double base, bool inverse) {
  require_rank2(x.shape(), "rope");
  const std::size_t d = x.cols();
  if (n_heads == 0 || d % n_heads != 0) throw DimensionError("rope: width not divisible by head count");
  const std::size_t hd = d / n_heads;
  if (hd % 2 != 0) throw DimensionError("rope: head dimension must be even");
  if (seq_len == 0 || x.rows() % seq_len != 0) throw DimensionError("rope: rows not a multiple of seq_len");

  std::vector<double> inv_freq(hd / 2);
  for (std::size_t i = 0; i < hd / 2; ++i) {
    inv_freq[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
  }
  const double sign = inverse ? -1.0 : 1.0;
  BasicTensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double pos = static_cast<double>(r % seq_len);
    auto in = x.row(r);
    auto o = out.row(r);
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t i = 0; i < hd / 2; ++i) {
        const double angle = pos * inv_freq[i];
        const double c = std::cos(angle);
        const double s = sign * std::sin(angle);
        const std::size_t j = h * hd + 2 * i;
        const double x0 = in[j];
        const double x1 = in[j + 1];
        o[j] = static_cast<T>(x0 * c - x1 * s);
        o[j + 1] = static_cast<T>(x0 * s + x1 * c);
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> causal_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                                AttentionShape shape, AttentionCache* cache) {
  require_rank2(q.shape(), "causal_attention");
  require_same_shape(q.shape(), k.shape(), "causal_attention");
  require_same_shape(q.shape(), v.shape(), "causal_attention");
  const std::size_t rows = q.dim(0);
  const std::size_t d = q.dim(1);
  const std::size_t t_len = shape.seq_len;
  const std::size_t heads = shape.n_heads;
  if (t_len == 0 || rows % t_len != 0) throw DimensionError("causal_attention: rows not a multiple of seq_len");
  if (heads == 0 || d % heads != 0) throw DimensionError("causal_attention: width not divisible by heads");
  const std::size_t hd = d / heads;
  const std::size_t n_seq = rows / t_len;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  DoubleView<T> qv(q);
  DoubleView<T> kv(k);
  DoubleView<T> vv(v);
  std::vector<double> out(rows * d, 0.0);
  std::vector<double> scores(t_len * t_len);
  if (cache) cache->probs.assign(n_seq * heads * t_len * t_len, 0.0);

  for (std::size_t s = 0; s < n_seq; ++s) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = s * t_len * d + h * hd;
      dgemm(false, true, t_len, t_len, hd, qv.data() + off, d, kv.data() + off, d, 0.0, scores.data(), t_len);
      for (std::size_t i = 0; i < t_len; ++i) {
        double* row = scores.data() + i * t_len;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          row[j] *= scale;
          mx = std::max(mx, row[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          row[j] = std::exp(row[j] - mx);
          sum += row[j];
        }
        for (std::size_t j = 0; j <= i; ++j) row[j] /= sum;
        for (std::size_t j = i + 1; j < t_len; ++j) row[j] = 0.0;
      }
      dgemm(false, false, t_len, hd, t_len, scores.data(), t_len, vv.data() + off, d, 0.0, out.data() + off, d);
      if (cache) {
        std::copy(scores.begin(), scores.end(), cache->probs.begin() + (s * heads + h) * t_len * t_len);
      }
    }
  }
  auto result = from_double<T>(q.shape(), out);
  require_finite(result, "causal_attention");
  return result;
}

template <typename T>
void causal_attention_backward(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                               AttentionShape shape, const AttentionCache& cache, const BasicTensor<T>& dout,
                               BasicTensor<T>* dq, BasicTensor<T>* dk, BasicTensor<T>* dv) {
  const std::size_t rows = q.dim(0);
  const std::size_t d = q.dim(1);
  const std::size_t t_len = shape.seq_len;
  const std::size_t heads = shape.n_heads;
  const std::size_t hd = d / heads;
  const std::size_t n_seq = rows / t_len;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  if (cache.probs.size() != n_seq * heads * t_len * t_len) {
    throw ContractError("causal_attention_backward: cache does not match inputs");
  }

  DoubleView<T> qv(q);
  DoubleView<T> kv(k);
  DoubleView<T> vv(v);
  DoubleView<T> gv(dout);
  std::vector<double> gq(rows * d, 0.0);
  std::vector<double> gk(rows * d, 0.0);
  std::vector<double> gvv(rows * d, 0.0);
  std::vector<double> dp(t_len * t_len);

  for (std::size_t s = 0; s < n_seq; ++s) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = s * t_len * d + h * hd;
      const double* p = cache.probs.data() + (s * heads + h) * t_len * t_len;
      // dV = Pᵀ dO
      dgemm(true, false, t_len, hd, t_len, p, t_len, gv.data() + off, d, 0.0, gvv.data() + off, d);
      // dP = dO Vᵀ
      dgemm(false, true, t_len, t_len, hd, gv.data() + off, d, vv.data() + off, d, 0.0, dp.data(), t_len);
      // dS = P ⊙ (dP − Σ_j P dP), folded with the score scale.
      for (std::size_t i = 0; i < t_len; ++i) {
        const double* pr = p + i * t_len;
        double* dr = dp.data() + i * t_len;
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) dot += pr[j] * dr[j];
        for (std::size_t j = 0; j <= i; ++j) dr[j] = pr[j] * (dr[j] - dot) * scale;
        for (std::size_t j = i + 1; j < t_len; ++j) dr[j] = 0.0;
      }
      dgemm(false, false, t_len, hd, t_len, dp.data(), t_len, kv.data() + off, d, 0.0, gq.data() + off, d);
      dgemm(true, false, t_len, hd, t_len, dp.data(), t_len, qv.data() + off, d, 0.0, gk.data() + off, d);
    }
  }
  if (dq) *dq = from_double<T>(q.shape(), gq);
  if (dk) *dk = from_double<T>(k.shape(), gk);
  if (dv) *dv = from_double<T>(v.shape(), gvv);
}

template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const std::int32_t> ids) {
  require_rank2(table.shape(), "embedding");
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  BasicTensor<T> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw InputError("token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
    }
    auto src = table.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

template <typename T>
std::vector<double> target_log_probs(const BasicTensor<T>& logits, std::span<const std::int32_t> targets) {
  if (targets.size() != logits.rows()) throw DimensionError("target_log_probs: one target per row required");
  std::vector<double> out(targets.size());
  const std::size_t v = logits.cols();
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto z = logits.row(r);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < v; ++c) sum += std::exp(static_cast<double>(z[c]) - mx);
    const std::int32_t t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      out[r] = 0.0;
      continue;
    }
    out[r] = static_cast<double>(z[static_cast<std::size_t>(t)]) - mx - std::log(sum);
  }
  return out;
}

#define DEPTHLAB_INSTANTIATE_OPS(T)                                                                  \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&, Transpose, Transpose); \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> hadamard(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> scale(const BasicTensor<T>&, double);                                       \
  template BasicTensor<T> add_row(const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> sum_rows(const BasicTensor<T>&);                                            \
  template BasicTensor<T> rmsnorm(const BasicTensor<T>&, const BasicTensor<T>&, double);              \
  template void rmsnorm_backward(const BasicTensor<T>&, const BasicTensor<T>&, double,                \
                                 const BasicTensor<T>&, BasicTensor<T>*, BasicTensor<T>*);            \
  template BasicTensor<T> softmax_rows(const BasicTensor<T>&);                                        \
  template BasicTensor<T> swiglu(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                                \
  template BasicTensor<T> rope(const BasicTensor<T>&, std::size_t, std::size_t, double, bool);        \
  template BasicTensor<T> causal_attention(const BasicTensor<T>&, const BasicTensor<T>&,              \
                                           const BasicTensor<T>&, AttentionShape, AttentionCache*);   \
  template void causal_attention_backward(const BasicTensor<T>&, const BasicTensor<T>&,               \
                                          const BasicTensor<T>&, AttentionShape,                      \
                                          const AttentionCache&, const BasicTensor<T>&,               \
                                          BasicTensor<T>*, BasicTensor<T>*, BasicTensor<T>*);         \
  template BasicTensor<T> embedding(const BasicTensor<T>&, std::span<const std::int32_t>);            \
  template std::vector<double> target_log_probs(const BasicTensor<T>&, std::span<const std::int32_t>);

DEPTHLAB_INSTANTIATE_OPS(float)
DEPTHLAB_INSTANTIATE_OPS(double)

#undef DEPTHLAB_INSTANTIATE_OPS

}  // namespace depthlab::ops
