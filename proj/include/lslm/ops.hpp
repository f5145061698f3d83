// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations.  Broadcasting is limited to one case: the
// second operand of an elementwise op may match the trailing dimensions of
// the first (the leading batch dimensions are repeated).
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lslm/tensor.hpp"

namespace lslm {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class V>
MatMap<typename V::value_type> mat(V& v, std::int64_t rows, std::int64_t cols) {
  return MatMap<typename V::value_type>(v.data(), rows, cols);
}
template <class V>
ConstMatMap<typename V::value_type> cmat(const V& v, std::int64_t rows, std::int64_t cols) {
  return ConstMatMap<typename V::value_type>(v.data(), rows, cols);
}

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b,
                                    const std::string& what = "") {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b) +
                   (what.empty() ? "" : " (" + what + ")"));
}

/// Number of times b repeats inside a under the trailing-dimension rule.
inline std::int64_t broadcast_outer(const char* op, const Shape& a, const Shape& b) {
  if (b.size() > a.size() || !std::equal(b.rbegin(), b.rend(), a.rbegin())) shape_fail(op, a, b);
  return shape_numel(a) / std::max<std::int64_t>(shape_numel(b), 1);
}

template <class T>
Buffer<T>* grad_if(const std::shared_ptr<Node<T>>& n) {
  return n->requires_grad ? &n->ensure_grad() : nullptr;
}

inline std::int64_t rows_of(const Shape& s) {
  return s.empty() ? 1 : shape_numel(s) / s.back();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto outer = detail::broadcast_outer("add", a.shape(), b.shape());
  const auto inner = b.numel();
  Buffer<T> out(a.values());
  const auto& bv = b.values();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) out[o * inner + i] += bv[i];
  return detail::make_result<T>("add", a.shape(), std::move(out), {a.node(), b.node()},
                                [outer, inner](Node<T>& self) {
                                  if (auto* ga = detail::grad_if(self.parents[0]))
                                    for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += self.grad[i];
                                  if (auto* gb = detail::grad_if(self.parents[1]))
                                    for (std::int64_t o = 0; o < outer; ++o)
                                      for (std::int64_t i = 0; i < inner; ++i)
                                        (*gb)[i] += self.grad[o * inner + i];
                                });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const auto outer = detail::broadcast_outer("sub", a.shape(), b.shape());
  const auto inner = b.numel();
  Buffer<T> out(a.values());
  const auto& bv = b.values();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) out[o * inner + i] -= bv[i];
  return detail::make_result<T>("sub", a.shape(), std::move(out), {a.node(), b.node()},
                                [outer, inner](Node<T>& self) {
                                  if (auto* ga = detail::grad_if(self.parents[0]))
                                    for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += self.grad[i];
                                  if (auto* gb = detail::grad_if(self.parents[1]))
                                    for (std::int64_t o = 0; o < outer; ++o)
                                      for (std::int64_t i = 0; i < inner; ++i)
                                        (*gb)[i] -= self.grad[o * inner + i];
                                });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto outer = detail::broadcast_outer("mul", a.shape(), b.shape());
  const auto inner = b.numel();
  Buffer<T> out(a.values());
  const auto& bv = b.values();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) out[o * inner + i] *= bv[i];
  return detail::make_result<T>(
      "mul", a.shape(), std::move(out), {a.node(), b.node()}, [outer, inner](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (auto* ga = detail::grad_if(self.parents[0]))
          for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < inner; ++i) (*ga)[o * inner + i] += self.grad[o * inner + i] * bv[i];
        if (auto* gb = detail::grad_if(self.parents[1]))
          for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < inner; ++i) (*gb)[i] += self.grad[o * inner + i] * av[o * inner + i];
      });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Buffer<T> out(a.values());
  for (auto& v : out) v *= s;
  return detail::make_result<T>("scale", a.shape(), std::move(out), {a.node()}, [s](Node<T>& self) {
    auto& ga = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * self.grad[i];
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Buffer<T> out(x.values());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return detail::make_result<T>("relu", x.shape(), std::move(out), {x.node()}, [](Node<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (xv[i] > T(0)) gx[i] += self.grad[i];
  });
}

/// Exact (erf-based) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  Buffer<T> out(x.values());
  for (auto& v : out) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  return detail::make_result<T>("gelu", x.shape(), std::move(out), {x.node()}, [](Node<T>& self) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    constexpr T inv_sqrt2pi = T(0.39894228040143267794);
    auto& gx = self.parents[0]->ensure_grad();
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const T v = xv[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      gx[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and distances

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.values()) s += v;
  return detail::make_result<T>("sum", {}, {s}, {x.node()}, [](Node<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (auto& g : gx) g += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  T s = 0;
  for (T v : x.values()) s += v;
  const T inv = T(1) / static_cast<T>(x.numel());
  return detail::make_result<T>("mean", {}, {s * inv}, {x.node()}, [inv](Node<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (auto& g : gx) g += self.grad[0] * inv;
  });
}

/// Mean absolute difference over the elements of the unmasked rows.  A row
/// is everything but the last dimension; an empty mask selects all rows.
template <class T>
Tensor<T> l1_distance(const Tensor<T>& a, const Tensor<T>& b, std::span<const std::uint8_t> row_mask = {}) {
  if (a.shape() != b.shape()) detail::shape_fail("l1_distance", a.shape(), b.shape());
  const auto rows = detail::rows_of(a.shape());
  const auto cols = rows ? a.numel() / rows : 0;
  if (!row_mask.empty() && static_cast<std::int64_t>(row_mask.size()) != rows)
    detail::shape_fail("l1_distance", a.shape(), {static_cast<std::int64_t>(row_mask.size())}, "mask rows");
  std::vector<std::uint8_t> mask(row_mask.begin(), row_mask.end());
  if (mask.empty()) mask.assign(static_cast<std::size_t>(rows), 1);
  std::int64_t active = 0;
  for (auto m : mask) active += m ? 1 : 0;
  const T denom = static_cast<T>(std::max<std::int64_t>(active * cols, 1));
  const auto& av = a.values();
  const auto& bv = b.values();
  T s = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    for (std::int64_t c = 0; c < cols; ++c) s += std::abs(av[r * cols + c] - bv[r * cols + c]);
  }
  return detail::make_result<T>(
      "l1_distance", {}, {s / denom}, {a.node(), b.node()},
      [mask = std::move(mask), rows, cols, denom](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        auto* ga = detail::grad_if(self.parents[0]);
        auto* gb = detail::grad_if(self.parents[1]);
        const T g = self.grad[0] / denom;
        for (std::int64_t r = 0; r < rows; ++r) {
          if (!mask[r]) continue;
          for (std::int64_t c = 0; c < cols; ++c) {
            const auto i = r * cols + c;
            const T d = av[i] - bv[i];
            const T sgn = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
            if (ga) (*ga)[i] += g * sgn;
            if (gb) (*gb)[i] -= g * sgn;
          }
        }
      });
}

/// Mean over unmasked rows of the squared Euclidean norm of the row
/// difference (sum over the last dimension, mean over rows).
template <class T>
Tensor<T> squared_l2_distance(const Tensor<T>& a, const Tensor<T>& b,
                              std::span<const std::uint8_t> row_mask = {}) {
  if (a.shape() != b.shape()) detail::shape_fail("squared_l2_distance", a.shape(), b.shape());
  const auto rows = detail::rows_of(a.shape());
  const auto cols = rows ? a.numel() / rows : 0;
  if (!row_mask.empty() && static_cast<std::int64_t>(row_mask.size()) != rows)
    detail::shape_fail("squared_l2_distance", a.shape(), {static_cast<std::int64_t>(row_mask.size())},
                       "mask rows");
  std::vector<std::uint8_t> mask(row_mask.begin(), row_mask.end());
  if (mask.empty()) mask.assign(static_cast<std::size_t>(rows), 1);
  std::int64_t active = 0;
  for (auto m : mask) active += m ? 1 : 0;
  const T denom = static_cast<T>(std::max<std::int64_t>(active, 1));
  const auto& av = a.values();
  const auto& bv = b.values();
  T s = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    for (std::int64_t c = 0; c < cols; ++c) {
      const T d = av[r * cols + c] - bv[r * cols + c];
      s += d * d;
    }
  }
  return detail::make_result<T>(
      "squared_l2_distance", {}, {s / denom}, {a.node(), b.node()},
      [mask = std::move(mask), rows, cols, denom](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        auto* ga = detail::grad_if(self.parents[0]);
        auto* gb = detail::grad_if(self.parents[1]);
        const T g = T(2) * self.grad[0] / denom;
        for (std::int64_t r = 0; r < rows; ++r) {
          if (!mask[r]) continue;
          for (std::int64_t c = 0; c < cols; ++c) {
            const auto i = r * cols + c;
            const T d = av[i] - bv[i];
            if (ga) (*ga)[i] += g * d;
            if (gb) (*gb)[i] -= g * d;
          }
        }
      });
}

/// Mean token cross-entropy over the unmasked rows of [N, V] logits.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int64_t> targets,
                        std::span<const std::uint8_t> row_mask = {}) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [N, V], got " + shape_str(logits.shape()));
  const auto n = logits.dim(0);
  const auto v = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != n)
    detail::shape_fail("cross_entropy", logits.shape(), {static_cast<std::int64_t>(targets.size())}, "targets");
  if (!row_mask.empty() && static_cast<std::int64_t>(row_mask.size()) != n)
    detail::shape_fail("cross_entropy", logits.shape(), {static_cast<std::int64_t>(row_mask.size())}, "mask");
  std::vector<std::uint8_t> mask(row_mask.begin(), row_mask.end());
  if (mask.empty()) mask.assign(static_cast<std::size_t>(n), 1);
  std::int64_t active = 0;
  for (auto m : mask) active += m ? 1 : 0;
  if (active == 0) throw Error("cross_entropy: mask selects no positions");
  std::vector<std::int64_t> tgt(targets.begin(), targets.end());
  const auto& lv = logits.values();
  Buffer<T> probs(static_cast<std::size_t>(n * v), T(0));
  T total = 0;
  for (std::int64_t r = 0; r < n; ++r) {
    if (!mask[r]) continue;
    if (tgt[r] < 0 || tgt[r] >= v) throw ShapeError("cross_entropy: target id out of range");
    const T* row = lv.data() + r * v;
    T mx = row[0];
    for (std::int64_t c = 1; c < v; ++c) mx = std::max(mx, row[c]);
    T z = 0;
    for (std::int64_t c = 0; c < v; ++c) {
      probs[r * v + c] = std::exp(row[c] - mx);
      z += probs[r * v + c];
    }
    for (std::int64_t c = 0; c < v; ++c) probs[r * v + c] /= z;
    total += mx + std::log(z) - row[tgt[r]];
  }
  const T denom = static_cast<T>(active);
  return detail::make_result<T>(
      "cross_entropy", {}, {total / denom}, {logits.node()},
      [probs = std::move(probs), tgt = std::move(tgt), mask = std::move(mask), n, v, denom](Node<T>& self) {
        auto& gl = self.parents[0]->ensure_grad();
        const T g = self.grad[0] / denom;
        for (std::int64_t r = 0; r < n; ++r) {
          if (!mask[r]) continue;
          for (std::int64_t c = 0; c < v; ++c) gl[r * v + c] += g * probs[r * v + c];
          gl[r * v + tgt[r]] -= g;
        }
      });
}

/// Zeroes the masked-out rows (all dims but the last) of x.
template <class T>
Tensor<T> mask_rows(const Tensor<T>& x, std::span<const std::uint8_t> row_mask) {
  const auto rows = detail::rows_of(x.shape());
  if (static_cast<std::int64_t>(row_mask.size()) != rows)
    detail::shape_fail("mask_rows", x.shape(), {static_cast<std::int64_t>(row_mask.size())}, "mask rows");
  const auto cols = rows ? x.numel() / rows : 0;
  Buffer<T> out = x.values();
  std::vector<std::uint8_t> mask(row_mask.begin(), row_mask.end());
  for (std::int64_t r = 0; r < rows; ++r)
    if (!mask[r]) std::fill_n(out.begin() + r * cols, cols, T(0));
  return detail::make_result<T>("mask_rows", x.shape(), std::move(out), {x.node()},
                                [mask = std::move(mask), rows, cols](Node<T>& self) {
                                  auto& gx = self.parents[0]->ensure_grad();
                                  for (std::int64_t r = 0; r < rows; ++r)
                                    if (mask[r])
                                      for (std::int64_t c = 0; c < cols; ++c) gx[r * cols + c] += self.grad[r * cols + c];
                                });
}

// ---------------------------------------------------------------------------
// Gradient routing

/// Identity forward, zero gradient backward.
template <class T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  return Tensor<T>::from_buffer(x.shape(), x.values(), false);
}

/// encoder_out + sg(quantized - encoder_out), evaluated without rounding:
/// the forward value is `quantized` bit for bit and the upstream gradient
/// reaches `encoder_out` unchanged.  `quantized` receives nothing.
template <class T>
Tensor<T> straight_through(const Tensor<T>& quantized, const Tensor<T>& encoder_out) {
  if (quantized.shape() != encoder_out.shape())
    detail::shape_fail("straight_through", quantized.shape(), encoder_out.shape());
  return detail::make_result<T>("straight_through", quantized.shape(), quantized.values(), {encoder_out.node()},
                                [](Node<T>& self) {
                                  auto& ge = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < ge.size(); ++i) ge[i] += self.grad[i];
                                });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) detail::shape_fail("reshape", x.shape(), shape);
  return detail::make_result<T>("reshape", std::move(shape), x.values(), {x.node()}, [](Node<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

/// [A, B, C, D] -> [A, C, B, D]
template <class T>
Tensor<T> permute0213(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("permute0213: expected rank 4, got " + shape_str(x.shape()));
  const auto A = x.dim(0), B = x.dim(1), C = x.dim(2), D = x.dim(3);
  const auto& xv = x.values();
  Buffer<T> out(xv.size());
  for (std::int64_t a = 0; a < A; ++a)
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < C; ++c)
        std::copy_n(xv.data() + ((a * B + b) * C + c) * D, D, out.data() + ((a * C + c) * B + b) * D);
  return detail::make_result<T>("permute0213", {A, C, B, D}, std::move(out), {x.node()},
                                [A, B, C, D](Node<T>& self) {
                                  auto& gx = self.parents[0]->ensure_grad();
                                  for (std::int64_t a = 0; a < A; ++a)
                                    for (std::int64_t b = 0; b < B; ++b)
                                      for (std::int64_t c = 0; c < C; ++c) {
                                        const T* src = self.grad.data() + ((a * C + c) * B + b) * D;
                                        T* dst = gx.data() + ((a * B + b) * C + c) * D;
                                        for (std::int64_t d = 0; d < D; ++d) dst[d] += src[d];
                                      }
                                });
}

/// Concatenates along dimension 0; all parts share their trailing shape.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::int64_t rows = 0;
  std::vector<std::int64_t> offsets;
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& p : parts) {
    if (p.rank() == 0 || Shape(p.shape().begin() + 1, p.shape().end()) != tail)
      detail::shape_fail("concat", parts[0].shape(), p.shape());
    offsets.push_back(rows);
    rows += p.dim(0);
    nodes.push_back(p.node());
  }
  const auto inner = shape_numel(tail);
  Buffer<T> out;
  out.reserve(static_cast<std::size_t>(rows * inner));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return detail::make_result<T>("concat", std::move(shape), std::move(out), std::move(nodes),
                                [offsets = std::move(offsets), inner](Node<T>& self) {
                                  for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                    auto* g = detail::grad_if(self.parents[k]);
                                    if (!g) continue;
                                    const T* src = self.grad.data() + offsets[k] * inner;
                                    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += src[i];
                                  }
                                });
}

/// Slice [start, start + length) along dimension `dim`.
template <class T>
Tensor<T> narrow(const Tensor<T>& x, int dim, std::int64_t start, std::int64_t length) {
  if (dim < 0 || dim >= static_cast<int>(x.rank()) || start < 0 || length < 0 || start + length > x.dim(dim))
    throw ShapeError("narrow: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                     ") on dim " + std::to_string(dim) + " of " + shape_str(x.shape()));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < dim; ++i) outer *= x.dim(i);
  for (int i = dim + 1; i < static_cast<int>(x.rank()); ++i) inner *= x.dim(i);
  const auto full = x.dim(dim);
  Shape shape = x.shape();
  shape[static_cast<std::size_t>(dim)] = length;
  const auto& xv = x.values();
  Buffer<T> out(static_cast<std::size_t>(outer * length * inner));
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(xv.data() + (o * full + start) * inner, length * inner, out.data() + o * length * inner);
  return detail::make_result<T>("narrow", std::move(shape), std::move(out), {x.node()},
                                [outer, inner, full, start, length](Node<T>& self) {
                                  auto& gx = self.parents[0]->ensure_grad();
                                  for (std::int64_t o = 0; o < outer; ++o) {
                                    const T* src = self.grad.data() + o * length * inner;
                                    T* dst = gx.data() + (o * full + start) * inner;
                                    for (std::int64_t i = 0; i < length * inner; ++i) dst[i] += src[i];
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [..., K] x [K, M] -> [..., M]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 1 || b.rank() != 2 || a.dim(-1) != b.dim(0)) detail::shape_fail("matmul", a.shape(), b.shape());
  const auto K = b.dim(0), M = b.dim(1), N = a.numel() / K;
  Buffer<T> out(static_cast<std::size_t>(N * M));
  detail::mat(out, N, M).noalias() = detail::cmat(a.values(), N, K) * detail::cmat(b.values(), K, M);
  Shape shape = a.shape();
  shape.back() = M;
  return detail::make_result<T>("matmul", std::move(shape), std::move(out), {a.node(), b.node()},
                                [N, K, M](Node<T>& self) {
                                  const auto g = detail::cmat(self.grad, N, M);
                                  if (auto* ga = detail::grad_if(self.parents[0]))
                                    detail::mat(*ga, N, K).noalias() +=
                                        g * detail::cmat(self.parents[1]->value, K, M).transpose();
                                  if (auto* gb = detail::grad_if(self.parents[1]))
                                    detail::mat(*gb, K, M).noalias() +=
                                        detail::cmat(self.parents[0]->value, N, K).transpose() * g;
                                });
}

/// Batched product: [B, N, K] x [B, K, M] -> [B, N, M], or with
/// `transpose_b` [B, N, K] x [B, M, K]^T -> [B, N, M].
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) detail::shape_fail("bmm", a.shape(), b.shape());
  const auto B = a.dim(0), N = a.dim(1), K = a.dim(2);
  const auto M = transpose_b ? b.dim(1) : b.dim(2);
  if ((transpose_b ? b.dim(2) : b.dim(1)) != K) detail::shape_fail("bmm", a.shape(), b.shape());
  Buffer<T> out(static_cast<std::size_t>(B * N * M));
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::int64_t i = 0; i < B; ++i) {
    detail::ConstMatMap<T> am(av.data() + i * N * K, N, K);
    detail::MatMap<T> om(out.data() + i * N * M, N, M);
    if (transpose_b)
      om.noalias() = am * detail::ConstMatMap<T>(bv.data() + i * M * K, M, K).transpose();
    else
      om.noalias() = am * detail::ConstMatMap<T>(bv.data() + i * K * M, K, M);
  }
  return detail::make_result<T>(
      "bmm", {B, N, M}, std::move(out), {a.node(), b.node()}, [B, N, K, M, transpose_b](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        auto* ga = detail::grad_if(self.parents[0]);
        auto* gb = detail::grad_if(self.parents[1]);
        for (std::int64_t i = 0; i < B; ++i) {
          detail::ConstMatMap<T> g(self.grad.data() + i * N * M, N, M);
          detail::ConstMatMap<T> am(av.data() + i * N * K, N, K);
          if (transpose_b) {
            detail::ConstMatMap<T> bm(bv.data() + i * M * K, M, K);
            if (ga) detail::MatMap<T>(ga->data() + i * N * K, N, K).noalias() += g * bm;
            if (gb) detail::MatMap<T>(gb->data() + i * M * K, M, K).noalias() += g.transpose() * am;
          } else {
            detail::ConstMatMap<T> bm(bv.data() + i * K * M, K, M);
            if (ga) detail::MatMap<T>(ga->data() + i * N * K, N, K).noalias() += g * bm.transpose();
            if (gb) detail::MatMap<T>(gb->data() + i * K * M, K, M).noalias() += am.transpose() * g;
          }
        }
      });
}

/// x [..., in] * W [in, out] + bias [out]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() < 1 || weight.rank() != 2 || x.dim(-1) != weight.dim(0))
    detail::shape_fail("linear", x.shape(), weight.shape());
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(1)) detail::shape_fail("linear", weight.shape(), bias.shape());
  const auto K = weight.dim(0), M = weight.dim(1), N = x.numel() / K;
  Buffer<T> out(static_cast<std::size_t>(N * M));
  auto om = detail::mat(out, N, M);
  om.noalias() = detail::cmat(x.values(), N, K) * detail::cmat(weight.values(), K, M);
  om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.values().data(), M);
  Shape shape = x.shape();
  shape.back() = M;
  return detail::make_result<T>(
      "linear", std::move(shape), std::move(out), {x.node(), weight.node(), bias.node()}, [N, K, M](Node<T>& self) {
        const auto g = detail::cmat(self.grad, N, M);
        if (auto* gx = detail::grad_if(self.parents[0]))
          detail::mat(*gx, N, K).noalias() += g * detail::cmat(self.parents[1]->value, K, M).transpose();
        if (auto* gw = detail::grad_if(self.parents[1]))
          detail::mat(*gw, K, M).noalias() += detail::cmat(self.parents[0]->value, N, K).transpose() * g;
        if (auto* gb = detail::grad_if(self.parents[2]))
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb->data(), M) += g.colwise().sum();
      });
}

/// Temporal convolution over channels-last input.
/// x [B, T, Cin], weight [k, Cin, Cout], bias [Cout] -> [B, T', Cout] with
/// T' = (T + 2*pad - k) / stride + 1 and zero padding.
template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int pad) {
  if (x.rank() != 3 || weight.rank() != 3 || weight.dim(1) != x.dim(2))
    detail::shape_fail("conv1d", x.shape(), weight.shape());
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(2)) detail::shape_fail("conv1d", weight.shape(), bias.shape());
  const auto B = x.dim(0), T_in = x.dim(1), Cin = x.dim(2);
  const auto k = weight.dim(0), Cout = weight.dim(2);
  const auto span_len = T_in + 2 * pad - k;
  if (span_len < 0 || stride < 1) detail::shape_fail("conv1d", x.shape(), weight.shape(), "input shorter than kernel");
  const auto T_out = span_len / stride + 1;
  const auto rows = B * T_out, width = k * Cin;
  Buffer<T> cols(static_cast<std::size_t>(rows * width), T(0));
  const auto& xv = x.values();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < T_out; ++t)
      for (std::int64_t kk = 0; kk < k; ++kk) {
        const auto src = t * stride - pad + kk;
        if (src < 0 || src >= T_in) continue;
        std::copy_n(xv.data() + (b * T_in + src) * Cin, Cin, cols.data() + (b * T_out + t) * width + kk * Cin);
      }
  Buffer<T> out(static_cast<std::size_t>(rows * Cout));
  auto om = detail::mat(out, rows, Cout);
  om.noalias() = detail::cmat(cols, rows, width) * detail::cmat(weight.values(), width, Cout);
  om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.values().data(), Cout);
  return detail::make_result<T>(
      "conv1d", {B, T_out, Cout}, std::move(out), {x.node(), weight.node(), bias.node()},
      [cols = std::move(cols), B, T_in, Cin, k, Cout, T_out, rows, width, stride, pad](Node<T>& self) {
        const auto g = detail::cmat(self.grad, rows, Cout);
        if (auto* gw = detail::grad_if(self.parents[1]))
          detail::mat(*gw, width, Cout).noalias() += detail::cmat(cols, rows, width).transpose() * g;
        if (auto* gb = detail::grad_if(self.parents[2]))
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb->data(), Cout) += g.colwise().sum();
        if (auto* gx = detail::grad_if(self.parents[0])) {
          detail::RowMat<T> dcols = g * detail::cmat(self.parents[1]->value, width, Cout).transpose();
          for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t t = 0; t < T_out; ++t)
              for (std::int64_t kk = 0; kk < k; ++kk) {
                const auto src = t * stride - pad + kk;
                if (src < 0 || src >= T_in) continue;
                const T* d = dcols.data() + (b * T_out + t) * width + kk * Cin;
                T* dst = gx->data() + (b * T_in + src) * Cin;
                for (std::int64_t c = 0; c < Cin; ++c) dst[c] += d[c];
              }
        }
      });
}

/// Transposed temporal convolution (learned upsampling).
/// x [B, T, Cin], weight [Cin, k, Cout], bias [Cout] -> [B, T', Cout] with
/// T' = (T - 1) * stride - 2 * pad + k.
template <class T>
Tensor<T> conv_transpose1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                           int pad) {
  if (x.rank() != 3 || weight.rank() != 3 || weight.dim(0) != x.dim(2))
    detail::shape_fail("conv_transpose1d", x.shape(), weight.shape());
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(2))
    detail::shape_fail("conv_transpose1d", weight.shape(), bias.shape());
  const auto B = x.dim(0), T_in = x.dim(1), Cin = x.dim(2);
  const auto k = weight.dim(1), Cout = weight.dim(2);
  const auto T_out = (T_in - 1) * stride - 2 * pad + k;
  if (T_out <= 0) detail::shape_fail("conv_transpose1d", x.shape(), weight.shape(), "empty output");
  const auto rows = B * T_in, width = k * Cout;
  detail::RowMat<T> ycols = detail::cmat(x.values(), rows, Cin) * detail::cmat(weight.values(), Cin, width);
  Buffer<T> out(static_cast<std::size_t>(B * T_out * Cout), T(0));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < T_in; ++t)
      for (std::int64_t kk = 0; kk < k; ++kk) {
        const auto dst = t * stride - pad + kk;
        if (dst < 0 || dst >= T_out) continue;
        const T* src = ycols.data() + (b * T_in + t) * width + kk * Cout;
        T* o = out.data() + (b * T_out + dst) * Cout;
        for (std::int64_t c = 0; c < Cout; ++c) o[c] += src[c];
      }
  const auto& bv = bias.values();
  for (std::int64_t r = 0; r < B * T_out; ++r)
    for (std::int64_t c = 0; c < Cout; ++c) out[r * Cout + c] += bv[c];
  return detail::make_result<T>(
      "conv_transpose1d", {B, T_out, Cout}, std::move(out), {x.node(), weight.node(), bias.node()},
      [B, T_in, Cin, k, Cout, T_out, rows, width, stride, pad](Node<T>& self) {
        detail::RowMat<T> dcols = detail::RowMat<T>::Zero(rows, width);
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t t = 0; t < T_in; ++t)
            for (std::int64_t kk = 0; kk < k; ++kk) {
              const auto dst = t * stride - pad + kk;
              if (dst < 0 || dst >= T_out) continue;
              std::copy_n(self.grad.data() + (b * T_out + dst) * Cout, Cout,
                          dcols.data() + (b * T_in + t) * width + kk * Cout);
            }
        if (auto* gx = detail::grad_if(self.parents[0]))
          detail::mat(*gx, rows, Cin).noalias() += dcols * detail::cmat(self.parents[1]->value, Cin, width).transpose();
        if (auto* gw = detail::grad_if(self.parents[1]))
          detail::mat(*gw, Cin, width).noalias() += detail::cmat(self.parents[0]->value, rows, Cin).transpose() * dcols;
        if (auto* gb = detail::grad_if(self.parents[2]))
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb->data(), Cout) +=
              detail::cmat(self.grad, B * T_out, Cout).colwise().sum();
      });
}

// ---------------------------------------------------------------------------
// Normalization and attention building blocks

/// Layer normalization over the last dimension.  A zero-variance row
/// normalizes to zero because the variance is floored by eps.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const auto D = x.dim(-1);
  if (gamma.numel() != D || beta.numel() != D) detail::shape_fail("layer_norm", x.shape(), gamma.shape());
  const auto rows = x.numel() / D;
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  Buffer<T> xhat(xv.size()), inv_std(static_cast<std::size_t>(rows)), out(xv.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * D;
    T mu = 0;
    for (std::int64_t c = 0; c < D; ++c) mu += row[c];
    mu /= static_cast<T>(D);
    T var = 0;
    for (std::int64_t c = 0; c < D; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(D);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::int64_t c = 0; c < D; ++c) {
      const T h = (row[c] - mu) * is;
      xhat[r * D + c] = h;
      out[r * D + c] = h * gv[c] + bv[c];
    }
  }
  return detail::make_result<T>(
      "layer_norm", x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), rows, D](Node<T>& self) {
        const auto& gv = self.parents[1]->value;
        auto* gx = detail::grad_if(self.parents[0]);
        auto* gg = detail::grad_if(self.parents[1]);
        auto* gbeta = detail::grad_if(self.parents[2]);
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* g = self.grad.data() + r * D;
          const T* h = xhat.data() + r * D;
          if (gg)
            for (std::int64_t c = 0; c < D; ++c) (*gg)[c] += g[c] * h[c];
          if (gbeta)
            for (std::int64_t c = 0; c < D; ++c) (*gbeta)[c] += g[c];
          if (gx) {
            T s1 = 0, s2 = 0;
            for (std::int64_t c = 0; c < D; ++c) {
              const T gh = g[c] * gv[c];
              s1 += gh;
              s2 += gh * h[c];
            }
            s1 /= static_cast<T>(D);
            s2 /= static_cast<T>(D);
            for (std::int64_t c = 0; c < D; ++c)
              (*gx)[r * D + c] += inv_std[r] * (g[c] * gv[c] - s1 - h[c] * s2);
          }
        }
      });
}

/// Softmax over the last dimension.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  const auto D = x.dim(-1);
  const auto rows = x.numel() / D;
  const auto& xv = x.values();
  Buffer<T> out(xv.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * D;
    T mx = row[0];
    for (std::int64_t c = 1; c < D; ++c) mx = std::max(mx, row[c]);
    T z = 0;
    for (std::int64_t c = 0; c < D; ++c) z += (out[r * D + c] = std::exp(row[c] - mx));
    for (std::int64_t c = 0; c < D; ++c) out[r * D + c] /= z;
  }
  return detail::make_result<T>("softmax", x.shape(), std::move(out), {x.node()}, [rows, D](Node<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    // The node's own value holds the softmax output.
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * D;
      const T* g = self.grad.data() + r * D;
      T dot = 0;
      for (std::int64_t c = 0; c < D; ++c) dot += g[c] * y[c];
      for (std::int64_t c = 0; c < D; ++c) gx[r * D + c] += y[c] * (g[c] - dot);
    }
  });
}

/// Row lookup: table [V, D] indexed by ids -> [n, D].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int64_t> ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be [V, D], got " + shape_str(table.shape()));
  const auto V = table.dim(0), D = table.dim(1);
  const auto n = static_cast<std::int64_t>(ids.size());
  Buffer<T> out(static_cast<std::size_t>(n * D));
  const auto& tv = table.values();
  for (std::int64_t i = 0; i < n; ++i) {
    if (ids[i] < 0 || ids[i] >= V)
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " out of range for table " +
                       shape_str(table.shape()));
    std::copy_n(tv.data() + ids[i] * D, D, out.data() + i * D);
  }
  return detail::make_result<T>("embedding", {n, D}, std::move(out), {table.node()},
                                [idx = std::vector<std::int64_t>(ids.begin(), ids.end()), D](Node<T>& self) {
                                  auto& gt = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < idx.size(); ++i) {
                                    const T* g = self.grad.data() + static_cast<std::int64_t>(i) * D;
                                    T* dst = gt.data() + idx[i] * D;
                                    for (std::int64_t c = 0; c < D; ++c) dst[c] += g[c];
                                  }
                                });
}

/// Inverted dropout; identity when p == 0.  The mask comes from `draw`,
/// a callable returning uniform values in [0, 1).
template <class T, class Draw>
Tensor<T> dropout(const Tensor<T>& x, double p, Draw&& draw) {
  if (p <= 0.0) return x;
  const T keep = static_cast<T>(1.0 - p);
  Buffer<T> m(static_cast<std::size_t>(x.numel()));
  for (auto& v : m) v = draw() < p ? T(0) : T(1) / keep;
  return mul(x, Tensor<T>::from_buffer(x.shape(), std::move(m)));
}

}  // namespace lslm
