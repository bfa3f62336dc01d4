#pragma once

// Differentiable primitives. Each op computes its forward value eagerly and,
// when an input requires grad, records the adjoint rule on the output.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "shrinklm/tensor.hpp"

namespace shrinklm {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <class T>
ConstMatMap<T> as_matrix(const std::vector<T>& v, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <class T>
MatMap<T> as_matrix(std::vector<T>& v, std::size_t rows, std::size_t cols) {
  return MatMap<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

/// Leading extents flattened; the last extent kept.
template <class T>
std::pair<std::size_t, std::size_t> rows_cols(const Tensor<T>& x) {
  const std::size_t cols = x.shape().back();
  return {x.numel() / cols, cols};
}

template <class T>
T sigmoid(T v) {
  return T(1) / (T(1) + std::exp(-v));
}

}  // namespace detail

/// [m,k] x [k,n] -> [m,n].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  detail::as_matrix(out, m, n).noalias() =
      detail::as_matrix(a.impl().data, m, k) * detail::as_matrix(b.impl().data, k, n);
  auto* pa = a.impl_ptr().get();
  auto* pb = b.impl_ptr().get();
  return make_result<T>({m, n}, std::move(out), {a, b}, [=](detail::TensorImpl<T>& o) {
    auto g = detail::as_matrix(o.grad, m, n);
    if (pa->requires_grad)
      detail::as_matrix(pa->grad_buffer(), m, k).noalias() +=
          g * detail::as_matrix(pb->data, k, n).transpose();
    if (pb->requires_grad)
      detail::as_matrix(pb->grad_buffer(), k, n).noalias() +=
          detail::as_matrix(pa->data, m, k).transpose() * g;
  });
}

/// [m,k] x [n,k]^T -> [m,n]; used for the tied output projection.
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
                  "matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()) + "^T");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<T> out(m * n);
  detail::as_matrix(out, m, n).noalias() =
      detail::as_matrix(a.impl().data, m, k) * detail::as_matrix(b.impl().data, n, k).transpose();
  auto* pa = a.impl_ptr().get();
  auto* pb = b.impl_ptr().get();
  return make_result<T>({m, n}, std::move(out), {a, b}, [=](detail::TensorImpl<T>& o) {
    auto g = detail::as_matrix(o.grad, m, n);
    if (pa->requires_grad)
      detail::as_matrix(pa->grad_buffer(), m, k).noalias() +=
          g * detail::as_matrix(pb->data, n, k);
    if (pb->requires_grad)
      detail::as_matrix(pb->grad_buffer(), n, k).noalias() +=
          g.transpose() * detail::as_matrix(pa->data, m, k);
  });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                              shape_str(b.shape()));
  std::vector<T> out(a.numel());
  const auto& da = a.impl().data;
  const auto& db = b.impl().data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  auto* pa = a.impl_ptr().get();
  auto* pb = b.impl_ptr().get();
  return make_result<T>(a.shape(), std::move(out), {a, b}, [=](detail::TensorImpl<T>& o) {
    for (auto* p : {pa, pb}) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                              shape_str(b.shape()));
  std::vector<T> out(a.numel());
  const auto& da = a.impl().data;
  const auto& db = b.impl().data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  auto* pa = a.impl_ptr().get();
  auto* pb = b.impl_ptr().get();
  return make_result<T>(a.shape(), std::move(out), {a, b}, [=](detail::TensorImpl<T>& o) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pa->data[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  const auto& dx = x.impl().data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dx[i] * factor;
  auto* px = x.impl_ptr().get();
  return make_result<T>(x.shape(), std::move(out), {x}, [=](detail::TensorImpl<T>& o) {
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
  });
}

/// Sum of all elements -> scalar.
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  auto* px = x.impl_ptr().get();
  return make_result<T>({1}, {total}, {x}, [=](detail::TensorImpl<T>& o) {
    auto& g = px->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

/// x[..., C] + bias[C].
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const auto [rows, cols] = detail::rows_cols(x);
  detail::require(bias.numel() == cols, "add_bias: bias of " + std::to_string(bias.numel()) +
                                            " values for last extent " + std::to_string(cols));
  std::vector<T> out(x.numel());
  const auto B = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.impl().data.data(),
                                                                       static_cast<Eigen::Index>(cols));
  detail::as_matrix(out, rows, cols).noalias() =
      detail::as_matrix(x.impl().data, rows, cols).rowwise() + B;
  auto* px = x.impl_ptr().get();
  auto* pb = bias.impl_ptr().get();
  return make_result<T>(x.shape(), std::move(out), {x, bias}, [=](detail::TensorImpl<T>& o) {
    const auto G = detail::as_matrix(o.grad, rows, cols);
    if (px->requires_grad) detail::as_matrix(px->grad_buffer(), rows, cols) += G;
    if (pb->requires_grad) {
      // Fixed row order: Eigen's reductions vary with buffer alignment.
      auto& gb = pb->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* src = o.grad.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) gb[c] += src[c];
      }
    }
  });
}

/// Same data, new extents (copying; no stride views).
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(numel_of(shape) == x.numel(),
                  "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto* px = x.impl_ptr().get();
  return make_result<T>(std::move(shape), x.impl().data, {x}, [=](detail::TensorImpl<T>& o) {
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

/// Columns [begin, end) of a [N, C] tensor.
template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require(x.rank() == 2 && begin < end && end <= x.dim(1),
                  "slice_cols: bad range for shape " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0), cols = x.dim(1), width = end - begin;
  std::vector<T> out(rows * width);
  const auto& dx = x.impl().data;
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(dx.begin() + static_cast<std::ptrdiff_t>(r * cols + begin), width,
                out.begin() + static_cast<std::ptrdiff_t>(r * width));
  auto* px = x.impl_ptr().get();
  return make_result<T>({rows, width}, std::move(out), {x}, [=](detail::TensorImpl<T>& o) {
    auto& g = px->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < width; ++c) g[r * cols + begin + c] += o.grad[r * width + c];
  });
}

/// [N, Ca] ++ [N, Cb] -> [N, Ca + Cb].
template <class T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0),
                  "concat_cols: " + shape_str(a.shape()) + " ++ " + shape_str(b.shape()));
  const std::size_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1), cols = ca + cb;
  std::vector<T> out(rows * cols);
  const auto& da = a.impl().data;
  const auto& db = b.impl().data;
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(da.begin() + static_cast<std::ptrdiff_t>(r * ca), ca,
                out.begin() + static_cast<std::ptrdiff_t>(r * cols));
    std::copy_n(db.begin() + static_cast<std::ptrdiff_t>(r * cb), cb,
                out.begin() + static_cast<std::ptrdiff_t>(r * cols + ca));
  }
  auto* pa = a.impl_ptr().get();
  auto* pb = b.impl_ptr().get();
  return make_result<T>({rows, cols}, std::move(out), {a, b}, [=](detail::TensorImpl<T>& o) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < ca; ++c) g[r * ca + c] += o.grad[r * cols + c];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cb; ++c) g[r * cb + c] += o.grad[r * cols + ca + c];
    }
  });
}

/// Row gather: table[V, d], ids -> [ids.size(), d].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  detail::require(table.rank() == 2, "embedding: table must be 2-D");
  const std::size_t vocab = table.dim(0), width = table.dim(1), n = ids.size();
  std::vector<T> out(n * width);
  const auto& dt = table.impl().data;
  for (std::size_t i = 0; i < n; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside [0," +
                       std::to_string(vocab) + ")");
    std::copy_n(dt.begin() + static_cast<std::ptrdiff_t>(ids[i] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  auto* pt = table.impl_ptr().get();
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return make_result<T>({n, width}, std::move(out), {table},
                        [=, saved = std::move(saved)](detail::TensorImpl<T>& o) {
                          auto& g = pt->grad_buffer();
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t c = 0; c < width; ++c)
                              g[saved[i] * width + c] += o.grad[i * width + c];
                        });
}

/// Max-subtracted softmax along `axis`.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  detail::require(axis < x.rank(), "softmax: axis " + std::to_string(axis) + " out of range for " +
                                       shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t extent = x.dim(axis);
  const auto& dx = x.impl().data;
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * extent * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < extent; ++e) mx = std::max(mx, dx[base + e * inner]);
      T total = 0;
      for (std::size_t e = 0; e < extent; ++e) {
        const T v = std::exp(dx[base + e * inner] - mx);
        out[base + e * inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < extent; ++e) out[base + e * inner] /= total;
    }
  auto* px = x.impl_ptr().get();
  return make_result<T>(x.shape(), std::move(out), {x}, [=](detail::TensorImpl<T>& o) {
    auto& g = px->grad_buffer();
    const auto& y = o.data;
    for (std::size_t ou = 0; ou < outer; ++ou)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = ou * extent * inner + in;
        T dot = 0;
        for (std::size_t e = 0; e < extent; ++e) dot += o.grad[base + e * inner] * y[base + e * inner];
        for (std::size_t e = 0; e < extent; ++e) {
          const std::size_t i = base + e * inner;
          g[i] += y[i] * (o.grad[i] - dot);
        }
      }
  });
}

/// Normalizes each row of the last axis, then applies gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  const auto [rows, cols] = detail::rows_cols(x);
  detail::require(gain.numel() == cols && bias.numel() == cols,
                  "layer_norm: affine params must match last extent " + std::to_string(cols));
  if (!(eps > T(0))) throw UsageError("layer_norm: eps must be positive");
  const auto& dx = x.impl().data;
  const auto& dg = gain.impl().data;
  const auto& db = bias.impl().data;
  std::vector<T> out(x.numel()), xhat(x.numel()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = dx.data() + r * cols;
    T mean = 0;
    for (std::size_t c = 0; c < cols; ++c) mean += row[c];
    mean /= static_cast<T>(cols);
    T var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<T>(cols);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const T h = (row[c] - mean) * rstd[r];
      xhat[r * cols + c] = h;
      out[r * cols + c] = h * dg[c] + db[c];
    }
  }
  auto* px = x.impl_ptr().get();
  auto* pg = gain.impl_ptr().get();
  auto* pb = bias.impl_ptr().get();
  return make_result<T>(
      x.shape(), std::move(out), {x, gain, bias},
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](detail::TensorImpl<T>& o) {
        const auto& gy = o.grad;
        if (pg->requires_grad) {
          auto& g = pg->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) g[c] += gy[r * cols + c] * xhat[r * cols + c];
        }
        if (pb->requires_grad) {
          auto& g = pb->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) g[c] += gy[r * cols + c];
        }
        if (px->requires_grad) {
          auto& g = px->grad_buffer();
          const auto& gain_v = pg->data;
          const T inv_n = T(1) / static_cast<T>(cols);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_d = 0, mean_dh = 0;
            for (std::size_t c = 0; c < cols; ++c) {
              const T d = gy[r * cols + c] * gain_v[c];
              mean_d += d;
              mean_dh += d * xhat[r * cols + c];
            }
            mean_d *= inv_n;
            mean_dh *= inv_n;
            for (std::size_t c = 0; c < cols; ++c) {
              const T d = gy[r * cols + c] * gain_v[c];
              g[r * cols + c] += rstd[r] * (d - mean_d - xhat[r * cols + c] * mean_dh);
            }
          }
        }
      });
}

/// x[..., 2f] split into (u, v) halves -> silu(u) * v, shape [..., f].
template <class T>
Tensor<T> swiglu(const Tensor<T>& x) {
  const auto [rows, cols] = detail::rows_cols(x);
  if (cols % 2 != 0)
    throw DimensionError("swiglu: last extent must be even, got " + std::to_string(cols));
  const std::size_t half = cols / 2;
  Shape shape = x.shape();
  shape.back() = half;
  const auto R = static_cast<Eigen::Index>(rows), H = static_cast<Eigen::Index>(half);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(cols));
  using Arr = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstStridedArr = Eigen::Map<const Arr, 0, Eigen::OuterStride<>>;
  using StridedArr = Eigen::Map<Arr, 0, Eigen::OuterStride<>>;
  // The math runs on freshly allocated (aligned) arrays: Eigen picks scalar or
  // packet code per element from the address, so working in place on the
  // input would make results depend on where the heap put it.
  std::vector<T> out(rows * half);
  {
    const Arr U = ConstStridedArr(x.impl().data.data(), R, H, stride);
    const Arr V = ConstStridedArr(x.impl().data.data() + half, R, H, stride);
    const Arr Y = U * V / (T(1) + (-U).exp());
    Eigen::Map<Arr>(out.data(), R, H) = Y;
  }
  auto* px = x.impl_ptr().get();
  return make_result<T>(std::move(shape), std::move(out), {x}, [=](detail::TensorImpl<T>& o) {
    auto& g = px->grad_buffer();
    const Arr U = ConstStridedArr(px->data.data(), R, H, stride);
    const Arr V = ConstStridedArr(px->data.data() + half, R, H, stride);
    const Arr Go = Eigen::Map<const Arr>(o.grad.data(), R, H);
    const Arr S = T(1) / (T(1) + (-U).exp());
    const Arr GoS = Go * S;
    const Arr dU = GoS * V * (T(1) + U * (T(1) - S));
    const Arr dV = GoS * U;
    StridedArr(g.data(), R, H, stride) += dU;
    StridedArr(g.data() + half, R, H, stride) += dV;
  });
}

/// Multi-head causal self-attention on packed rows.
///
/// q, k, v are [batch*seq, d_model] with heads laid out as contiguous column
/// blocks of d_model / heads. Position i attends to positions j <= i within
/// its own sequence. Returns [batch*seq, d_model].
template <class T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::size_t batch, std::size_t seq, std::size_t heads) {
  detail::require(q.rank() == 2 && q.shape() == k.shape() && q.shape() == v.shape(),
                  "causal_attention: q, k, v must share a 2-D shape");
  detail::require(q.dim(0) == batch * seq, "causal_attention: rows must equal batch*seq");
  detail::require(heads > 0 && q.dim(1) % heads == 0,
                  "causal_attention: width not divisible by heads");
  const std::size_t width = q.dim(1), hd = width / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(hd));
  const auto S = static_cast<Eigen::Index>(seq);
  const auto H = static_cast<Eigen::Index>(hd);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));

  std::vector<T> out(q.numel());
  // Attention probabilities per (batch, head), kept for the adjoint. Aligned
  // storage keeps the vectorized row reductions independent of heap layout;
  // only the lower triangle is ever written or read.
  auto probs = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>(
      static_cast<Eigen::Index>(batch * heads * seq * seq));
  detail::RowMat<T> scores(S, S);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = b * seq * width + h * hd;
      detail::ConstStridedMap<T> Q(q.impl().data.data() + off, S, H, stride);
      detail::ConstStridedMap<T> K(k.impl().data.data() + off, S, H, stride);
      detail::ConstStridedMap<T> V(v.impl().data.data() + off, S, H, stride);
      scores.noalias() = (Q * K.transpose()) * scale_factor;
      detail::MatMap<T> P(probs->data() + (b * heads + h) * seq * seq, S, S);
      for (Eigen::Index i = 0; i < S; ++i) {
        auto row = scores.row(i).head(i + 1).array();
        auto p = P.row(i).head(i + 1).array();
        p = (row - row.maxCoeff()).exp();
        p /= p.sum();
      }
      detail::StridedMap<T> O(out.data() + off, S, H, stride);
      O.noalias() = P.template triangularView<Eigen::Lower>() * V;
    }

  auto* pq = q.impl_ptr().get();
  auto* pk = k.impl_ptr().get();
  auto* pv = v.impl_ptr().get();
  return make_result<T>(q.shape(), std::move(out), {q, k, v}, [=](detail::TensorImpl<T>& o) {
    detail::RowMat<T> dP(S, S), dS(S, S);
    for (auto* p : {pq, pk, pv})
      if (p->requires_grad) p->grad_buffer();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = b * seq * width + h * hd;
        detail::ConstStridedMap<T> Q(pq->data.data() + off, S, H, stride);
        detail::ConstStridedMap<T> K(pk->data.data() + off, S, H, stride);
        detail::ConstStridedMap<T> V(pv->data.data() + off, S, H, stride);
        detail::ConstStridedMap<T> dO(o.grad.data() + off, S, H, stride);
        detail::ConstMatMap<T> P(probs->data() + (b * heads + h) * seq * seq, S, S);
        if (pv->requires_grad) {
          detail::StridedMap<T> dV(pv->grad.data() + off, S, H, stride);
          dV.noalias() += P.transpose().template triangularView<Eigen::Upper>() * dO;
        }
        if (!pq->requires_grad && !pk->requires_grad) continue;
        dP.noalias() = dO * V.transpose();
        for (Eigen::Index i = 0; i < S; ++i) {
          const auto p = P.row(i).head(i + 1).array();
          const auto dp = dP.row(i).head(i + 1).array();
          const T dot = (p * dp).sum();
          dS.row(i).head(i + 1).array() = p * (dp - dot) * scale_factor;
          dS.row(i).tail(S - i - 1).setZero();
        }
        if (pq->requires_grad) {
          detail::StridedMap<T> dQ(pq->grad.data() + off, S, H, stride);
          dQ.noalias() += dS.template triangularView<Eigen::Lower>() * K;
        }
        if (pk->requires_grad) {
          detail::StridedMap<T> dK(pk->grad.data() + off, S, H, stride);
          dK.noalias() += dS.transpose().template triangularView<Eigen::Upper>() * Q;
        }
      }
  });
}

}  // namespace shrinklm
