#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "patchstorm/error.hpp"
#include "patchstorm/tensor.hpp"

// Differentiable primitives. Each op has a forward and a vector-Jacobian
// product; encoders and transforms are hand-composed from these.
namespace patchstorm::ops {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kNormalizeFloor = 1e-12;

enum class OpKind {
  matmul,
  add,
  sub,
  elementwise_mul,
  scale,
  gelu,
  softmax_lastdim,
  layernorm_lastdim,
  reshape,
  transpose2d,
  slice,
  concat,
  mean_lastdim,
  l2_normalize_lastdim,
  embedding_gather,
};

inline std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::elementwise_mul: return "elementwise_mul";
    case OpKind::scale: return "scale";
    case OpKind::gelu: return "gelu";
    case OpKind::softmax_lastdim: return "softmax_lastdim";
    case OpKind::layernorm_lastdim: return "layernorm_lastdim";
    case OpKind::reshape: return "reshape";
    case OpKind::transpose2d: return "transpose2d";
    case OpKind::slice: return "slice";
    case OpKind::concat: return "concat";
    case OpKind::mean_lastdim: return "mean_lastdim";
    case OpKind::l2_normalize_lastdim: return "l2_normalize_lastdim";
    case OpKind::embedding_gather: return "embedding_gather";
  }
  return "unknown";
}

/// Op-specific attributes; each kind reads only the fields it needs.
struct OpAttrs {
  double scalar = 1.0;                // scale
  Shape shape;                        // reshape
  std::size_t axis = 0;               // slice, concat
  std::size_t begin = 0;              // slice
  std::size_t end = 0;                // slice
  std::vector<std::size_t> indices;   // embedding_gather
};

namespace detail {

[[noreturn]] inline void shape_error(std::string_view kind, const std::string& what) {
  throw Error(Errc::shape_mismatch, std::string(kind) + ": " + what);
}

inline void require_rank(std::string_view kind, const Tensor& t, std::size_t rank, const char* name) {
  if (t.rank() != rank) {
    shape_error(kind, std::string(name) + " must be rank " + std::to_string(rank) + ", got " +
                          shape_str(t.shape()));
  }
}

inline void require_same(std::string_view kind, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_error(kind, "operand shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline std::size_t last_dim(std::string_view kind, const Tensor& t) {
  if (t.rank() == 0 || t.shape().back() == 0) {
    shape_error(kind, "needs a nonempty last dimension, got " + shape_str(t.shape()));
  }
  return t.shape().back();
}

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(const double* __restrict a, const double* __restrict b, double* __restrict c,
                    std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* __restrict bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void gemm_tn(const double* __restrict a, const double* __restrict b, double* __restrict c,
                    std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* __restrict bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      double* __restrict cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

inline void check_axis(std::string_view kind, const Tensor& t, std::size_t axis) {
  if (axis >= t.rank()) {
    shape_error(kind, "axis " + std::to_string(axis) + " out of range for " + shape_str(t.shape()));
  }
}

inline std::size_t outer_of(const Shape& s, std::size_t axis) {
  std::size_t o = 1;
  for (std::size_t i = 0; i < axis; ++i) o *= s[i];
  return o;
}

inline std::size_t inner_of(const Shape& s, std::size_t axis) {
  std::size_t o = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) o *= s[i];
  return o;
}

}  // namespace detail

// ---------------------------------------------------------------- matmul

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank("matmul", a, 2, "lhs");
  detail::require_rank("matmul", b, 2, "rhs");
  if (a.dim(1) != b.dim(0)) {
    detail::shape_error("matmul", "inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor c({a.dim(0), b.dim(1)});
  detail::gemm_nn(a.data().data(), b.data().data(), c.data().data(), a.dim(0), a.dim(1), b.dim(1));
  return c;
}

inline Tensor transpose2d(const Tensor& a) {
  detail::require_rank("transpose2d", a, 2, "input");
  const std::size_t m = a.dim(0);
  const std::size_t n = a.dim(1);
  Tensor t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
  return t;
}

struct MatmulGrads {
  Tensor da;
  Tensor db;
};

/// Either side can be skipped when the caller only needs the other.
inline MatmulGrads matmul_vjp(const Tensor& a, const Tensor& b, const Tensor& g, bool need_a = true,
                              bool need_b = true) {
  MatmulGrads out;
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (g.shape() != Shape{m, n}) {
    detail::shape_error("matmul", "output grad " + shape_str(g.shape()) + " does not match output [" +
                                      std::to_string(m) + "x" + std::to_string(n) + "]");
  }
  if (need_a) {
    out.da = Tensor({m, k});
    const Tensor bt = transpose2d(b);
    detail::gemm_nn(g.data().data(), bt.data().data(), out.da.data().data(), m, n, k);
  }
  if (need_b) {
    out.db = Tensor({k, n});
    detail::gemm_tn(a.data().data(), g.data().data(), out.db.data().data(), m, k, n);
  }
  return out;
}

// ------------------------------------------------------- elementwise family

/// Same-shape sum, or row broadcast of a rank-1 `b` over the last dim of `a`.
inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    Tensor c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
    return c;
  }
  if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0)) {
    Tensor c = a;
    const std::size_t n = b.dim(0);
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i % n];
    return c;
  }
  detail::shape_error("add", "cannot combine " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

inline std::vector<Tensor> add_vjp(const Tensor& a, const Tensor& b, const Tensor& g) {
  if (a.shape() == b.shape()) return {g, g};
  Tensor db(b.shape());
  const std::size_t n = b.dim(0);
  for (std::size_t i = 0; i < g.size(); ++i) db[i % n] += g[i];
  (void)a;
  return {g, db};
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same("sub", a, b);
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same("elementwise_mul", a, b);
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
  return c;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor c = a;
  scale_inplace(c, s);
  return c;
}

inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2))); }

inline Tensor gelu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data()) v = gelu_scalar(v);
  return y;
}

inline Tensor gelu_vjp(const Tensor& x, const Tensor& g) {
  Tensor dx(x.shape());
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    const double cdf = 0.5 * (1.0 + std::erf(v * (1.0 / std::numbers::sqrt2)));
    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
    dx[i] = g[i] * (cdf + v * pdf);
  }
  return dx;
}

// ------------------------------------------------------------ row-wise ops

inline Tensor softmax_lastdim(const Tensor& x) {
  const std::size_t n = detail::last_dim("softmax_lastdim", x);
  Tensor y(x.shape());
  for (std::size_t r = 0; r < x.size() / n; ++r) {
    const double* xr = x.data().data() + r * n;
    double* yr = y.data().data() + r * n;
    double mx = xr[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
  }
  return y;
}

/// VJP expressed through the softmax output `y`.
inline Tensor softmax_vjp_from_output(const Tensor& y, const Tensor& g) {
  const std::size_t n = y.shape().back();
  Tensor dx(y.shape());
  for (std::size_t r = 0; r < y.size() / n; ++r) {
    const double* yr = y.data().data() + r * n;
    const double* gr = g.data().data() + r * n;
    double* dr = dx.data().data() + r * n;
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += yr[j] * gr[j];
    for (std::size_t j = 0; j < n; ++j) dr[j] = yr[j] * (gr[j] - s);
  }
  return dx;
}

inline void check_layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const std::size_t n = detail::last_dim("layernorm_lastdim", x);
  if (gain.shape() != Shape{n} || bias.shape() != Shape{n}) {
    detail::shape_error("layernorm_lastdim", "gain " + shape_str(gain.shape()) + " / bias " +
                                                  shape_str(bias.shape()) + " must be [" + std::to_string(n) +
                                                  "] for input " + shape_str(x.shape()));
  }
}

inline Tensor layernorm_lastdim(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  check_layernorm(x, gain, bias);
  const std::size_t n = x.shape().back();
  Tensor y(x.shape());
  for (std::size_t r = 0; r < x.size() / n; ++r) {
    const double* xr = x.data().data() + r * n;
    double* yr = y.data().data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < n; ++j) yr[j] = (xr[j] - mean) * inv * gain[j] + bias[j];
  }
  return y;
}

struct LayerNormGrads {
  Tensor dx;
  Tensor dgain;
  Tensor dbias;
};

inline LayerNormGrads layernorm_vjp(const Tensor& x, const Tensor& gain, const Tensor& g) {
  const std::size_t n = x.shape().back();
  LayerNormGrads out{Tensor(x.shape()), Tensor({n}), Tensor({n})};
  std::vector<double> xhat(n), gh(n);
  for (std::size_t r = 0; r < x.size() / n; ++r) {
    const double* xr = x.data().data() + r * n;
    const double* gr = g.data().data() + r * n;
    double* dr = out.dx.data().data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    double sum_gh = 0.0, sum_gh_xhat = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      xhat[j] = (xr[j] - mean) * inv;
      gh[j] = gr[j] * gain[j];
      sum_gh += gh[j];
      sum_gh_xhat += gh[j] * xhat[j];
      out.dgain[j] += gr[j] * xhat[j];
      out.dbias[j] += gr[j];
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) dr[j] = inv * (gh[j] - inv_n * sum_gh - xhat[j] * inv_n * sum_gh_xhat);
  }
  return out;
}

inline Tensor mean_lastdim(const Tensor& x) {
  const std::size_t n = detail::last_dim("mean_lastdim", x);
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  Tensor y(out_shape);
  for (std::size_t r = 0; r < y.size(); ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x[r * n + j];
    y[r] = s / static_cast<double>(n);
  }
  return y;
}

inline Tensor mean_lastdim_vjp(const Tensor& x, const Tensor& g) {
  const std::size_t n = x.shape().back();
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = g[i / n] / static_cast<double>(n);
  return dx;
}

inline Tensor l2_normalize_lastdim(const Tensor& x) {
  const std::size_t n = detail::last_dim("l2_normalize_lastdim", x);
  Tensor y(x.shape());
  for (std::size_t r = 0; r < x.size() / n; ++r) {
    const auto row = x.data().subspan(r * n, n);
    const double denom = std::max(l2_norm(row), kNormalizeFloor);
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] = row[j] / denom;
  }
  return y;
}

inline Tensor l2_normalize_vjp(const Tensor& x, const Tensor& g) {
  const std::size_t n = x.shape().back();
  Tensor dx(x.shape());
  for (std::size_t r = 0; r < x.size() / n; ++r) {
    const auto row = x.data().subspan(r * n, n);
    const auto grow = g.data().subspan(r * n, n);
    const double norm = l2_norm(row);
    if (norm <= kNormalizeFloor) {
      for (std::size_t j = 0; j < n; ++j) dx[r * n + j] = grow[j] / kNormalizeFloor;
      continue;
    }
    const double inv = 1.0 / norm;
    double yg = 0.0;
    for (std::size_t j = 0; j < n; ++j) yg += row[j] * inv * grow[j];
    for (std::size_t j = 0; j < n; ++j) dx[r * n + j] = inv * (grow[j] - row[j] * inv * yg);
  }
  return dx;
}

// --------------------------------------------------------------- layout ops

inline Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.size()) {
    detail::shape_error("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return x.reshaped(shape);
}

/// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  detail::check_axis("slice", x, axis);
  if (begin > end || end > x.dim(axis)) {
    detail::shape_error("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                     ") invalid for axis " + std::to_string(axis) + " of " +
                                     shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  Tensor y(out_shape);
  const std::size_t outer = detail::outer_of(x.shape(), axis);
  const std::size_t inner = detail::inner_of(x.shape(), axis);
  const std::size_t len = (end - begin) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = x.data().data() + (o * x.dim(axis) + begin) * inner;
    std::copy(src, src + len, y.data().data() + o * len);
  }
  return y;
}

inline Tensor slice_vjp(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end, const Tensor& g) {
  Tensor dx(x.shape());
  const std::size_t outer = detail::outer_of(x.shape(), axis);
  const std::size_t inner = detail::inner_of(x.shape(), axis);
  const std::size_t len = (end - begin) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = g.data().data() + o * len;
    std::copy(src, src + len, dx.data().data() + (o * x.dim(axis) + begin) * inner);
  }
  return dx;
}

inline Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) detail::shape_error("concat", "needs at least one input");
  detail::check_axis("concat", parts[0], axis);
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != out_shape.size()) {
      detail::shape_error("concat", "rank mismatch: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    }
    for (std::size_t d = 0; d < p.rank(); ++d) {
      if (d != axis && p.dim(d) != parts[0].dim(d)) {
        detail::shape_error("concat", "dim " + std::to_string(d) + " differs: " + shape_str(parts[0].shape()) +
                                          " vs " + shape_str(p.shape()));
      }
    }
    out_shape[axis] += p.dim(axis);
  }
  Tensor y(out_shape);
  const std::size_t outer = detail::outer_of(out_shape, axis);
  const std::size_t inner = detail::inner_of(out_shape, axis);
  const std::size_t out_row = out_shape[axis] * inner;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      const double* src = p.data().data() + o * len;
      std::copy(src, src + len, y.data().data() + o * out_row + offset);
    }
    offset += len;
  }
  return y;
}

inline std::vector<Tensor> concat_vjp(std::span<const Tensor> parts, std::size_t axis, const Tensor& g) {
  std::vector<Tensor> grads;
  std::size_t begin = 0;
  for (const auto& p : parts) {
    grads.push_back(slice(g, axis, begin, begin + p.dim(axis)));
    begin += p.dim(axis);
  }
  return grads;
}

/// Rows of `table` [V,d] selected by `indices`, giving [n,d].
inline Tensor embedding_gather(const Tensor& table, std::span<const std::size_t> indices) {
  detail::require_rank("embedding_gather", table, 2, "table");
  const std::size_t v = table.dim(0), d = table.dim(1);
  Tensor y({indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= v) {
      detail::shape_error("embedding_gather", "index " + std::to_string(indices[i]) + " out of range for table " +
                                                  shape_str(table.shape()));
    }
    std::copy_n(table.data().data() + indices[i] * d, d, y.data().data() + i * d);
  }
  return y;
}

inline Tensor embedding_gather_vjp(const Tensor& table, std::span<const std::size_t> indices, const Tensor& g) {
  const std::size_t d = table.dim(1);
  Tensor dt(table.shape());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    double* dst = dt.data().data() + indices[i] * d;
    const double* src = g.data().data() + i * d;
    for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
  }
  return dt;
}

// ----------------------------------------------------------------- dispatch

namespace detail {

inline void require_arity(OpKind kind, std::span<const Tensor> inputs, std::size_t n) {
  if (inputs.size() != n) {
    throw Error(Errc::invalid_argument, std::string(to_string(kind)) + ": expects " + std::to_string(n) +
                                            " inputs, got " + std::to_string(inputs.size()));
  }
}

inline void require_finite(OpKind kind, std::span<const Tensor> inputs) {
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].all_finite()) {
      throw Error(Errc::non_finite, std::string(to_string(kind)) + ": input " + std::to_string(i) +
                                        " contains NaN or Inf");
    }
  }
}

inline std::size_t arity(OpKind kind) {
  switch (kind) {
    case OpKind::matmul:
    case OpKind::add:
    case OpKind::sub:
    case OpKind::elementwise_mul: return 2;
    case OpKind::layernorm_lastdim: return 3;
    case OpKind::concat: return 0;  // variadic
    default: return 1;
  }
}

}  // namespace detail

/// Generic forward over the closed op set.
inline Tensor forward(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {}) {
  if (const auto n = detail::arity(kind); n != 0) detail::require_arity(kind, inputs, n);
  detail::require_finite(kind, inputs);
  switch (kind) {
    case OpKind::matmul: return matmul(inputs[0], inputs[1]);
    case OpKind::add: return add(inputs[0], inputs[1]);
    case OpKind::sub: return sub(inputs[0], inputs[1]);
    case OpKind::elementwise_mul: return mul(inputs[0], inputs[1]);
    case OpKind::scale: return scale(inputs[0], attrs.scalar);
    case OpKind::gelu: return gelu(inputs[0]);
    case OpKind::softmax_lastdim: return softmax_lastdim(inputs[0]);
    case OpKind::layernorm_lastdim: return layernorm_lastdim(inputs[0], inputs[1], inputs[2]);
    case OpKind::reshape: return reshape(inputs[0], attrs.shape);
    case OpKind::transpose2d: return transpose2d(inputs[0]);
    case OpKind::slice: return slice(inputs[0], attrs.axis, attrs.begin, attrs.end);
    case OpKind::concat: return concat(inputs, attrs.axis);
    case OpKind::mean_lastdim: return mean_lastdim(inputs[0]);
    case OpKind::l2_normalize_lastdim: return l2_normalize_lastdim(inputs[0]);
    case OpKind::embedding_gather: return embedding_gather(inputs[0], attrs.indices);
  }
  throw Error(Errc::invalid_argument, "unknown op kind");
}

/// Generic VJP: one gradient per input, each shaped like that input.
inline std::vector<Tensor> vjp(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs,
                               const Tensor& out_grad) {
  const Tensor out = forward(kind, inputs, attrs);
  if (out.shape() != out_grad.shape()) {
    detail::shape_error(to_string(kind), "output grad " + shape_str(out_grad.shape()) + " does not match output " +
                                             shape_str(out.shape()));
  }
  if (!out_grad.all_finite()) {
    throw Error(Errc::non_finite, std::string(to_string(kind)) + ": output grad contains NaN or Inf");
  }
  switch (kind) {
    case OpKind::matmul: {
      auto g = matmul_vjp(inputs[0], inputs[1], out_grad);
      return {std::move(g.da), std::move(g.db)};
    }
    case OpKind::add: return add_vjp(inputs[0], inputs[1], out_grad);
    case OpKind::sub: return {out_grad, scale(out_grad, -1.0)};
    case OpKind::elementwise_mul: return {mul(out_grad, inputs[1]), mul(out_grad, inputs[0])};
    case OpKind::scale: return {scale(out_grad, attrs.scalar)};
    case OpKind::gelu: return {gelu_vjp(inputs[0], out_grad)};
    case OpKind::softmax_lastdim: return {softmax_vjp_from_output(out, out_grad)};
    case OpKind::layernorm_lastdim: {
      auto g = layernorm_vjp(inputs[0], inputs[1], out_grad);
      return {std::move(g.dx), std::move(g.dgain), std::move(g.dbias)};
    }
    case OpKind::reshape: return {out_grad.reshaped(inputs[0].shape())};
    case OpKind::transpose2d: return {transpose2d(out_grad)};
    case OpKind::slice: return {slice_vjp(inputs[0], attrs.axis, attrs.begin, attrs.end, out_grad)};
    case OpKind::concat: return concat_vjp(inputs, attrs.axis, out_grad);
    case OpKind::mean_lastdim: return {mean_lastdim_vjp(inputs[0], out_grad)};
    case OpKind::l2_normalize_lastdim: return {l2_normalize_vjp(inputs[0], out_grad)};
    case OpKind::embedding_gather: return {embedding_gather_vjp(inputs[0], attrs.indices, out_grad)};
  }
  throw Error(Errc::invalid_argument, "unknown op kind");
}

}  // namespace patchstorm::ops
