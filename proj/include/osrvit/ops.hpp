#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <algorithm>
#include <vector>

#include "osrvit/tensor.hpp"

namespace osrvit {

namespace detail {

// C[m×n] += A·B[k×n], where A(i, p) = a[i·row_stride + p·col_stride]. Rows of
// C are split across threads; each element is reduced over p in ascending
// order, so results do not depend on the partition.
template <class T>
void gemm_strided(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t row_stride,
                  std::size_t col_stride, const T* b, T* c) {
  constexpr std::size_t MR = 4, NR = 16;
  parallel_for((m + MR - 1) / MR, MR * n * k, [=](std::size_t lo, std::size_t hi) {
    for (std::size_t blk = lo; blk < hi; ++blk) {
      const std::size_t i0 = blk * MR;
      const std::size_t rows = std::min(MR, m - i0);
      for (std::size_t j0 = 0; j0 < n; j0 += NR) {
        const std::size_t cols = std::min(NR, n - j0);
        T acc[MR][NR] = {};
        if (rows == MR && cols == NR) {
          T acc0[NR] = {}, acc1[NR] = {}, acc2[NR] = {}, acc3[NR] = {};
          const T* a0 = a + i0 * row_stride;
          for (std::size_t p = 0; p < k; ++p) {
            const T* brow = b + p * n + j0;
            const T x0 = a0[p * col_stride];
            const T x1 = a0[row_stride + p * col_stride];
            const T x2 = a0[2 * row_stride + p * col_stride];
            const T x3 = a0[3 * row_stride + p * col_stride];
            for (std::size_t q = 0; q < NR; ++q) {
              const T bq = brow[q];
              acc0[q] += x0 * bq;
              acc1[q] += x1 * bq;
              acc2[q] += x2 * bq;
              acc3[q] += x3 * bq;
            }
          }
          for (std::size_t q = 0; q < NR; ++q) {
            acc[0][q] = acc0[q];
            acc[1][q] = acc1[q];
            acc[2][q] = acc2[q];
            acc[3][q] = acc3[q];
          }
        } else {
          for (std::size_t p = 0; p < k; ++p) {
            const T* brow = b + p * n + j0;
            for (std::size_t r = 0; r < rows; ++r) {
              const T av = a[(i0 + r) * row_stride + p * col_stride];
              for (std::size_t q = 0; q < cols; ++q) acc[r][q] += av * brow[q];
            }
          }
        }
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t q = 0; q < cols; ++q) c[(i0 + r) * n + j0 + q] += acc[r][q];
      }
    }
  });
}

// C[m×n] += A[m×k] · B[k×n]
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  gemm_strided(m, n, k, a, k, 1, b, c);
}

// C[m×n] += A[k×m]ᵀ · B[k×n]
template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  gemm_strided(m, n, k, a, 1, m, b, c);
}

// C[m×n] += A[m×k] · B[n×k]ᵀ, via an explicit transpose of B.
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  std::vector<T> bt(n * k);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, n, k, a, bt.data(), c);
}

inline std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <class T>
void accumulate(TensorNode<T>* dst, const T* src) {
  if (dst->grad.empty()) return;
  for (std::size_t i = 0; i < dst->grad.size(); ++i) dst->grad[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  detail::gemm_nn(m, n, k, a.values().data(), b.values().data(), out.values().data());
  auto* an = a.node();
  auto* bn = b.node();
  auto* on = out.node();
  attach(out, {a, b}, [=] {
    if (!an->grad.empty()) detail::gemm_nt(m, k, n, on->grad.data(), bn->value.data(), an->grad.data());
    if (!bn->grad.empty()) detail::gemm_tn(k, n, m, an->value.data(), on->grad.data(), bn->grad.data());
  });
  return out;
}

/// Batched matrix product over a leading group axis: [G×m×k]·[G×k×n], or
/// [G×m×k]·[G×n×k]ᵀ when transpose_b is set.
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  const bool ok = a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) &&
                  a.dim(2) == (transpose_b ? b.dim(2) : b.dim(1));
  if (!ok) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         (transpose_b ? " (b transposed)" : ""));
  }
  const std::size_t g = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  Tensor<T> out({g, m, n});
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* ov = out.values().data();
  for (std::size_t i = 0; i < g; ++i) {
    if (transpose_b) {
      detail::gemm_nt(m, n, k, av + i * m * k, bv + i * n * k, ov + i * m * n);
    } else {
      detail::gemm_nn(m, n, k, av + i * m * k, bv + i * k * n, ov + i * m * n);
    }
  }
  auto* an = a.node();
  auto* bn = b.node();
  auto* on = out.node();
  attach(out, {a, b}, [=] {
    for (std::size_t i = 0; i < g; ++i) {
      const T* dc = on->grad.data() + i * m * n;
      const T* ai = an->value.data() + i * m * k;
      const T* bi = bn->value.data() + i * k * n;
      if (!an->grad.empty()) {
        T* da = an->grad.data() + i * m * k;
        if (transpose_b) {
          detail::gemm_nn(m, k, n, dc, bi, da);  // dA = dC·B
        } else {
          detail::gemm_nt(m, k, n, dc, bi, da);  // dA = dC·Bᵀ
        }
      }
      if (!bn->grad.empty()) {
        T* db = bn->grad.data() + i * k * n;
        if (transpose_b) {
          detail::gemm_tn(n, k, m, dc, ai, db);  // dB = dCᵀ·A
        } else {
          detail::gemm_tn(k, n, m, ai, dc, db);  // dB = Aᵀ·dC
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  auto *an = a.node(), *bn = b.node(), *on = out.node();
  attach(out, {a, b}, [=] {
    detail::accumulate(an, on->grad.data());
    detail::accumulate(bn, on->grad.data());
  });
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] - b[i];
  auto *an = a.node(), *bn = b.node(), *on = out.node();
  attach(out, {a, b}, [=] {
    detail::accumulate(an, on->grad.data());
    if (!bn->grad.empty())
      for (std::size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] -= on->grad[i];
  });
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
  auto *an = a.node(), *bn = b.node(), *on = out.node();
  attach(out, {a, b}, [=] {
    const std::size_t n = on->grad.size();
    if (!an->grad.empty())
      for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->value[i];
    if (!bn->grad.empty())
      for (std::size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * an->value[i];
  });
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * factor;
  auto *an = a.node(), *on = out.node();
  attach(out, {a}, [=] {
    for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * factor;
  });
  return out;
}

/// x[..., D] + bias[D]. The only broadcasting the engine supports.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t d = x.shape().back();
  if (bias.rank() != 1 || bias.dim(0) != d) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match last axis of " +
                         shape_str(x.shape()));
  }
  Tensor<T> out(x.shape());
  const std::size_t rows = x.numel() / d;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] + bias[j];
  auto *xn = x.node(), *bn = bias.node(), *on = out.node();
  attach(out, {x, bias}, [=] {
    detail::accumulate(xn, on->grad.data());
    if (!bn->grad.empty())
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) bn->grad[j] += on->grad[r * d + j];
  });
  return out;
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s{0};
  for (auto v : x.values()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  auto *xn = x.node(), *on = out.node();
  attach(out, {x}, [=] {
    for (auto& g : xn->grad) g += on->grad[0];
  });
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

/// Softmax along `axis` with max subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  const auto& shp = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= shp[i];
  for (std::size_t i = ax + 1; i < shp.size(); ++i) inner *= shp[i];
  const std::size_t len = shp[ax];

  Tensor<T> out(shp);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
      T z{0};
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
      if (std::isnan(mx)) {
        for (std::size_t j = 0; j < len; ++j) out[base + j * inner] = std::numeric_limits<T>::quiet_NaN();
      }
    }
  }
  auto *xn = x.node(), *on = out.node();
  attach(out, {x}, [=] {
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot{0};
        for (std::size_t j = 0; j < len; ++j) dot += on->grad[base + j * inner] * on->value[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t idx = base + j * inner;
          xn->grad[idx] += on->value[idx] * (on->grad[idx] - dot);
        }
      }
    }
  });
  return out;
}

/// Layer normalization over the last axis; eps is added to the variance
/// inside the square root.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  const std::size_t d = x.shape().back();
  if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != d || bias.dim(0) != d) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()) +
                         " do not match last axis of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.values().data() + r * d;
    T mu{0};
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T rs = T{1} / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gain[j] + bias[j];
    }
  }
  auto *xn = x.node(), *gn = gain.node(), *bn = bias.node(), *on = out.node();
  attach(out, {x, gain, bias}, [=] {
    const T* dy = on->grad.data();
    if (!gn->grad.empty())
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gn->grad[j] += dy[r * d + j] * (*xhat)[r * d + j];
    if (!bn->grad.empty())
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) bn->grad[j] += dy[r * d + j];
    if (xn->grad.empty()) return;
    for (std::size_t r = 0; r < rows; ++r) {
      T mean_dh{0}, mean_dh_h{0};
      for (std::size_t j = 0; j < d; ++j) {
        const T dh = dy[r * d + j] * gn->value[j];
        mean_dh += dh;
        mean_dh_h += dh * (*xhat)[r * d + j];
      }
      mean_dh /= static_cast<T>(d);
      mean_dh_h /= static_cast<T>(d);
      for (std::size_t j = 0; j < d; ++j) {
        const T dh = dy[r * d + j] * gn->value[j];
        xn->grad[r * d + j] += (*rstd)[r] * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
      }
    }
  });
  return out;
}

/// Exact GELU: x·Φ(x).
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * T(0.5) * std::erfc(-x[i] * inv_sqrt2);
  auto *xn = x.node(), *on = out.node();
  attach(out, {x}, [=] {
    for (std::size_t i = 0; i < xn->grad.size(); ++i) {
      const T v = xn->value[i];
      const T cdf = T(0.5) * std::erfc(-v * inv_sqrt2);
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      xn->grad[i] += on->grad[i] * (cdf + v * pdf);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(x.values().begin(), x.values().end()));
  auto *xn = x.node(), *on = out.node();
  attach(out, {x}, [=] { detail::accumulate(xn, on->grad.data()); });
  return out;
}

/// Reorders axes: output axis i is input axis perm[i].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  std::vector<bool> seen(r, false);
  if (perm.size() != r) throw DimensionError("permute: permutation length does not match rank");
  for (auto p : perm) {
    if (p >= r || seen[p]) throw DimensionError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * x.dim(i + 1);
  // offset in the input for each output element, computed once
  auto gather = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < x.numel(); ++flat) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[perm[i]];
    (*gather)[flat] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[(*gather)[i]];
  auto *xn = x.node(), *on = out.node();
  attach(out, {x}, [=] {
    for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[(*gather)[i]] += on->grad[i];
  });
  return out;
}

/// Picks one index along `axis`, dropping that axis.
template <class T>
Tensor<T> select(const Tensor<T>& x, int axis, std::size_t index) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  if (x.rank() < 2) throw DimensionError("select: needs rank >= 2, got " + shape_str(x.shape()));
  if (index >= x.dim(ax)) throw DimensionError("select: index out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= x.dim(i);
  for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) out[o * inner + in] = x[(o * len + index) * inner + in];
  auto *xn = x.node(), *on = out.node();
  attach(out, {x}, [=] {
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) xn->grad[(o * len + index) * inner + in] += on->grad[o * inner + in];
  });
  return out;
}

}  // namespace osrvit
