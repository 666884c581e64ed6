#pragma once

#include <Eigen/Core>
#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gbt/tensor.hpp"

namespace gbt {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

/// Numpy-style broadcast of two shapes (aligned from the back).
inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

/// Strides of `in` viewed with the rank of `out`, zero on broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  const auto own = contiguous_strides(in);
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    strides[i + offset] = in[i] == 1 ? 0 : own[i];
  }
  return strides;
}

/// Calls f(out_index, a_index, b_index) for every element of the broadcast result.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
  const std::size_t n = shape_numel(out);
  if (sa == out && sb == out) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t na = shape_numel(sa), nb = shape_numel(sb);
  // Trailing-suffix broadcasts (bias rows etc.) reduce to a modulo.
  auto is_suffix = [&](const Shape& s) {
    if (s.size() > out.size()) return false;
    return std::equal(s.begin(), s.end(), out.end() - static_cast<std::ptrdiff_t>(s.size()));
  };
  if (sa == out && is_suffix(sb)) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i % nb);
    return;
  }
  if (sb == out && is_suffix(sa)) {
    for (std::size_t i = 0; i < n; ++i) f(i, i % na, i);
    return;
  }
  const auto st_a = broadcast_strides(sa, out);
  const auto st_b = broadcast_strides(sb, out);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = out.size(); d-- > 0;) {
      if (++idx[d] < out[d]) {
        ia += st_a[d];
        ib += st_b[d];
        break;
      }
      ia -= st_a[d] * (out[d] - 1);
      ib -= st_b[d] * (out[d] - 1);
      idx[d] = 0;
    }
  }
}

template <typename Fwd, typename DA, typename DB>
Tensor binary_elementwise(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  Shape out = broadcast_shapes(a.shape(), b.shape(), op);
  std::vector<double> values(shape_numel(out));
  const auto av = a.values();
  const auto bv = b.values();
  for_each_broadcast(out, a.shape(), b.shape(),
                     [&](std::size_t o, std::size_t i, std::size_t j) { values[o] = fwd(av[i], bv[j]); });
  auto an = a.node();
  auto bn = b.node();
  return make_result(op, out, std::move(values), {&a, &b}, [an, bn, da, db](Node& self) {
    const auto& g = self.grad;
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for_each_broadcast(self.shape, an->shape, bn->shape, [&](std::size_t o, std::size_t i, std::size_t j) {
      const double x = an->value[i], y = bn->value[j];
      if (an->requires_grad) an->grad[i] += g[o] * da(x, y);
      if (bn->requires_grad) bn->grad[j] += g[o] * db(x, y);
    });
  });
}

template <typename Fwd, typename Deriv>
Tensor unary_elementwise(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto xv = x.values();
  std::vector<double> values(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) values[i] = fwd(xv[i]);
  auto xn = x.node();
  return make_result(op, x.shape(), std::move(values), {&x}, [xn, deriv](Node& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      xn->grad[i] += self.grad[i] * deriv(xn->value[i], self.value[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& x, double factor) {
  return detail::unary_elementwise(
      "scale", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary_elementwise(
      "add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary_elementwise(
      "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary_elementwise(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

/// base^x elementwise.
inline Tensor pow_base(double base, const Tensor& x) {
  const double ln_base = std::log(base);
  return detail::unary_elementwise(
      "pow_base", x, [base](double v) { return std::pow(base, v); },
      [ln_base](double, double y) { return y * ln_base; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_elementwise(
      "sigmoid", x,
      [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

/// Exact (erf) Gelu.
inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return detail::unary_elementwise(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

/// Inverted dropout. Identity (same tensor) in eval mode or when p == 0.
inline Tensor dropout(const Tensor& x, double p, bool training, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw UsageError("dropout rate must lie in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const double inv = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = keep(rng) ? inv : 0.0;
  const auto xv = x.values();
  std::vector<double> values(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) values[i] = xv[i] * mask[i];
  auto xn = x.node();
  return detail::make_result("dropout", x.shape(), std::move(values), {&x},
                             [xn, mask = std::move(mask)](detail::Node& self) {
                               xn->ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * mask[i];
                             });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  const auto xv = x.values();
  const double s = std::accumulate(xv.begin(), xv.end(), 0.0);
  auto xn = x.node();
  return detail::make_result("sum", {}, {s}, {&x}, [xn](detail::Node& self) {
    xn->ensure_grad();
    for (double& g : xn->grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

/// mean((pred - target)^2), fused.
inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
  }
  const auto p = pred.values();
  const auto t = target.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += (p[i] - t[i]) * (p[i] - t[i]);
  const double n = static_cast<double>(p.size());
  auto pn = pred.node();
  auto tn = target.node();
  return detail::make_result("mse_loss", {}, {acc / n}, {&pred, &target}, [pn, tn, n](detail::Node& self) {
    const double g = self.grad[0] * 2.0 / n;
    if (pn->requires_grad) pn->ensure_grad();
    if (tn->requires_grad) tn->ensure_grad();
    for (std::size_t i = 0; i < pn->value.size(); ++i) {
      const double d = pn->value[i] - tn->value[i];
      if (pn->requires_grad) pn->grad[i] += g * d;
      if (tn->requires_grad) tn->grad[i] -= g * d;
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> values(x.values().begin(), x.values().end());
  auto xn = x.node();
  return detail::make_result("reshape", std::move(shape), std::move(values), {&x}, [xn](detail::Node& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
  });
}

/// Axis permutation: out.shape[i] = x.shape[perm[i]].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  if (perm.size() != in.size()) throw DimensionError("permute: rank mismatch for " + shape_str(in));
  Shape out(in.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= in.size()) throw DimensionError("permute: bad axis");
    out[i] = in[perm[i]];
  }
  const auto in_strides = detail::contiguous_strides(in);
  std::vector<std::size_t> src_strides(out.size());
  for (std::size_t i = 0; i < perm.size(); ++i) src_strides[i] = in_strides[perm[i]];
  const std::size_t n = x.numel();
  // map[o] = source flat index for output element o.
  std::vector<std::size_t> map(n);
  {
    std::vector<std::size_t> idx(out.size(), 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < n; ++o) {
      map[o] = src;
      for (std::size_t d = out.size(); d-- > 0;) {
        if (++idx[d] < out[d]) {
          src += src_strides[d];
          break;
        }
        src -= src_strides[d] * (out[d] - 1);
        idx[d] = 0;
      }
    }
  }
  const auto xv = x.values();
  std::vector<double> values(n);
  for (std::size_t o = 0; o < n; ++o) values[o] = xv[map[o]];
  auto xn = x.node();
  return detail::make_result("permute", std::move(out), std::move(values), {&x},
                             [xn, map = std::move(map)](detail::Node& self) {
                               xn->ensure_grad();
                               for (std::size_t o = 0; o < map.size(); ++o) xn->grad[map[o]] += self.grad[o];
                             });
}

/// Swaps the last two axes.
inline Tensor transpose_last(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose_last needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(x, perm);
}

/// Elements start, start+step, ... < stop along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t stop, std::size_t step = 1) {
  const Shape& in = x.shape();
  if (axis >= in.size() || stop > in[axis] || start >= stop || step == 0) {
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(stop) + ") step " +
                         std::to_string(step) + " on axis " + std::to_string(axis) + " of " + shape_str(in));
  }
  const std::size_t count = (stop - start + step - 1) / step;
  Shape out = in;
  out[axis] = count;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= in[i];
  for (std::size_t i = axis + 1; i < in.size(); ++i) inner *= in[i];
  const std::size_t len = in[axis];
  const auto xv = x.values();
  std::vector<double> values(outer * count * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < count; ++c) {
      const double* src = xv.data() + (o * len + start + c * step) * inner;
      std::copy(src, src + inner, values.begin() + static_cast<std::ptrdiff_t>((o * count + c) * inner));
    }
  auto xn = x.node();
  return detail::make_result("slice", std::move(out), std::move(values), {&x},
                             [xn, outer, count, inner, len, start, step](detail::Node& self) {
                               xn->ensure_grad();
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t c = 0; c < count; ++c) {
                                   double* dst = xn->grad.data() + (o * len + start + c * step) * inner;
                                   const double* g = self.grad.data() + (o * count + c) * inner;
                                   for (std::size_t i = 0; i < inner; ++i) dst[i] += g[i];
                                 }
                             });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat axis out of range for " + shape_str(first));
  Shape out = first;
  out[axis] = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(first));
    out[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<double> values(shape_numel(out));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t block = p.shape()[axis] * inner;
    const auto pv = p.values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(pv.begin() + static_cast<std::ptrdiff_t>(o * block), pv.begin() + static_cast<std::ptrdiff_t>((o + 1) * block),
                values.begin() + static_cast<std::ptrdiff_t>(o * out[axis] * inner + offset));
    }
    offset += block;
  }
  std::vector<std::shared_ptr<detail::Node>> nodes;
  for (const Tensor& p : parts) nodes.push_back(p.node());
  const std::size_t row = out[axis] * inner;
  return detail::make_result_n("concat", std::move(out), std::move(values), parts,
                             [nodes, offsets, outer, inner, axis, row](detail::Node& self) {
                               for (std::size_t k = 0; k < nodes.size(); ++k) {
                                 auto& n = *nodes[k];
                                 if (!n.requires_grad) continue;
                                 n.ensure_grad();
                                 const std::size_t block = n.shape[axis] * inner;
                                 for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t i = 0; i < block; ++i)
                                     n.grad[o * block + i] += self.grad[o * row + offsets[k] + i];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Matrix product

/// Batched matrix product (..., n, k) x (..., k, m) -> (..., n, m); leading
/// batch axes broadcast numpy-style.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.size(-1) != b.size(-2)) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t n = a.size(-2), k = a.size(-1), m = b.size(-1);
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = detail::broadcast_shapes(a_batch, b_batch, "matmul");
  } catch (const DimensionError&) {
    throw DimensionError("matmul: batch dims of " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " do not broadcast");
  }
  Shape out = batch;
  out.push_back(n);
  out.push_back(m);
  std::vector<double> values(shape_numel(out));
  auto an = a.node();
  auto bn = b.node();

  // A rank-2 right operand is one GEMM over the flattened left batch.
  if (b_batch.empty() || shape_numel(b_batch) == 1) {
    if (shape_numel(batch) == shape_numel(a_batch)) {
      const std::size_t rows = shape_numel(a_batch) * n;
      detail::MatMap(values.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(m)).noalias() =
          detail::ConstMatMap(a.values().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k)) *
          detail::ConstMatMap(b.values().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m));
      return detail::make_result("matmul", std::move(out), std::move(values), {&a, &b}, [an, bn, rows, k, m](detail::Node& self) {
        detail::ConstMatMap g(self.grad.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(m));
        if (an->requires_grad) {
          an->ensure_grad();
          detail::MatMap(an->grad.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k)).noalias() +=
              g * detail::ConstMatMap(bn->value.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m)).transpose();
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          detail::MatMap(bn->grad.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m)).noalias() +=
              detail::ConstMatMap(an->value.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k)).transpose() * g;
        }
      });
    }
  }

  // General broadcast: per output batch entry, locate operand matrices.
  const std::size_t nb = shape_numel(batch);
  std::vector<std::size_t> a_off(nb), b_off(nb);
  detail::for_each_broadcast(batch, a_batch, b_batch, [&](std::size_t o, std::size_t i, std::size_t j) {
    a_off[o] = i * n * k;
    b_off[o] = j * k * m;
  });
  for (std::size_t t = 0; t < nb; ++t) {
    detail::MatMap(values.data() + t * n * m, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m)).noalias() =
        detail::ConstMatMap(a.values().data() + a_off[t], static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k)) *
        detail::ConstMatMap(b.values().data() + b_off[t], static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m));
  }
  return detail::make_result("matmul", std::move(out), std::move(values), {&a, &b},
                             [an, bn, a_off, b_off, n, k, m](detail::Node& self) {
                               const auto N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k),
                                          M = static_cast<Eigen::Index>(m);
                               if (an->requires_grad) an->ensure_grad();
                               if (bn->requires_grad) bn->ensure_grad();
                               for (std::size_t t = 0; t < a_off.size(); ++t) {
                                 detail::ConstMatMap g(self.grad.data() + t * n * m, N, M);
                                 if (an->requires_grad) {
                                   detail::MatMap(an->grad.data() + a_off[t], N, K).noalias() +=
                                       g * detail::ConstMatMap(bn->value.data() + b_off[t], K, M).transpose();
                                 }
                                 if (bn->requires_grad) {
                                   detail::MatMap(bn->grad.data() + b_off[t], K, M).noalias() +=
                                       detail::ConstMatMap(an->value.data() + a_off[t], N, K).transpose() * g;
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Attention primitives

/// Row softmax over the last axis of (..., Lq, Lk) scores. With `causal`,
/// key j is visible to query i only when j <= i; masked weights are exactly 0.
inline Tensor masked_softmax(const Tensor& scores, bool causal) {
  if (scores.rank() < 2) throw DimensionError("masked_softmax needs (..., L, L), got " + shape_str(scores.shape()));
  const std::size_t lq = scores.size(-2), lk = scores.size(-1);
  const std::size_t rows = scores.numel() / lk;
  const auto sv = scores.values();
  std::vector<double> values(sv.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t qi = r % lq;
    // A fully masked row (only possible when lk < lq is misused) falls back to uniform over all keys.
    std::size_t allowed = causal ? std::min(qi + 1, lk) : lk;
    if (allowed == 0) allowed = lk;
    const double* s = sv.data() + r * lk;
    double* p = values.data() + r * lk;
    double mx = s[0];
    for (std::size_t j = 1; j < allowed; ++j) mx = std::max(mx, s[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < allowed; ++j) z += (p[j] = std::exp(s[j] - mx));
    for (std::size_t j = 0; j < allowed; ++j) p[j] /= z;
  }
  auto sn = scores.node();
  return detail::make_result("masked_softmax", scores.shape(), std::move(values), {&scores},
                             [sn, rows, lk](detail::Node& self) {
                               sn->ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double* p = self.value.data() + r * lk;
                                 const double* g = self.grad.data() + r * lk;
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < lk; ++j) dot += p[j] * g[j];
                                 double* out = sn->grad.data() + r * lk;
                                 for (std::size_t j = 0; j < lk; ++j) out[j] += p[j] * (g[j] - dot);
                               }
                             });
}

// ---------------------------------------------------------------------------
// Normalization

/// Layer normalization over the last axis with affine gain/bias (shape (d)).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  const std::size_t d = x.size(-1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm: feature dim " + std::to_string(d) + " vs gain " + shape_str(gain.shape()) +
                         " bias " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  std::vector<double> values(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * inv_std[r];
      values[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
    }
  }
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  return detail::make_result(
      "layer_norm", x.shape(), std::move(values), {&x, &gain, &bias},
      [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](detail::Node& self) {
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        const double dd = static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = self.grad.data() + r * d;
          const double* h = xhat.data() + r * d;
          double sum_gx = 0.0, sum_gxh = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double gxh = g[j] * gn->value[j];
            sum_gx += gxh;
            sum_gxh += gxh * h[j];
            if (gn->requires_grad) gn->grad[j] += g[j] * h[j];
            if (bn->requires_grad) bn->grad[j] += g[j];
          }
          if (xn->requires_grad) {
            for (std::size_t j = 0; j < d; ++j) {
              const double gxh = g[j] * gn->value[j];
              xn->grad[r * d + j] += inv_std[r] / dd * (dd * gxh - sum_gx - h[j] * sum_gxh);
            }
          }
        }
      });
}

/// Weight normalization: w[c] = gain[c] * raw[c] / ||raw[c]||_2, per output
/// channel c (first axis of raw).
inline Tensor weight_norm_apply(const Tensor& raw, const Tensor& gain) {
  if (raw.rank() < 1) throw DimensionError("weight_norm_apply: raw weight must have an output-channel axis");
  const std::size_t channels = raw.size(0);
  if (gain.numel() != channels) {
    throw DimensionError("weight_norm_apply: " + std::to_string(channels) + " channels but gain " +
                         shape_str(gain.shape()));
  }
  const std::size_t per = raw.numel() / channels;
  const auto rv = raw.values();
  const auto gv = gain.values();
  std::vector<double> norms(channels);
  std::vector<double> values(rv.size());
  for (std::size_t c = 0; c < channels; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < per; ++i) s += rv[c * per + i] * rv[c * per + i];
    norms[c] = std::sqrt(s);
    if (!std::isfinite(norms[c])) {
      throw NumericError("weight_norm_apply: non-finite weight in output channel " + std::to_string(c));
    }
    if (!(norms[c] > 0.0)) throw NumericError("weight_norm_apply: zero-norm weight in output channel " + std::to_string(c));
    for (std::size_t i = 0; i < per; ++i) values[c * per + i] = gv[c] * rv[c * per + i] / norms[c];
  }
  auto rn = raw.node();
  auto gn = gain.node();
  return detail::make_result("weight_norm", raw.shape(), std::move(values), {&raw, &gain},
                             [rn, gn, norms = std::move(norms), channels, per](detail::Node& self) {
                               if (rn->requires_grad) rn->ensure_grad();
                               if (gn->requires_grad) gn->ensure_grad();
                               for (std::size_t c = 0; c < channels; ++c) {
                                 const double* v = rn->value.data() + c * per;
                                 const double* g = self.grad.data() + c * per;
                                 double dot = 0.0;
                                 for (std::size_t i = 0; i < per; ++i) dot += g[i] * v[i];
                                 const double nrm = norms[c];
                                 if (gn->requires_grad) gn->grad[c] += dot / nrm;
                                 if (rn->requires_grad) {
                                   const double gc = gn->value[c];
                                   for (std::size_t i = 0; i < per; ++i) {
                                     rn->grad[c * per + i] += gc / nrm * (g[i] - dot * v[i] / (nrm * nrm));
                                   }
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Convolution

/// 1-D cross-correlation. x: (batch, c_in, L); kernel: (c_out, c_in, k);
/// symmetric zero padding. Output length floor((L + 2p - k) / stride) + 1.
inline Tensor conv1d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  if (x.rank() != 3 || kernel.rank() != 3 || x.size(1) != kernel.size(1)) {
    throw DimensionError("conv1d: input " + shape_str(x.shape()) + " kernel " + shape_str(kernel.shape()));
  }
  if (stride == 0) throw DimensionError("conv1d: stride must be positive");
  const std::size_t batch = x.size(0), cin = x.size(1), len = x.size(2);
  const std::size_t cout = kernel.size(0), k = kernel.size(2);
  if (len + 2 * padding < k) {
    throw DimensionError("conv1d: output length < 1 for L=" + std::to_string(len) + " k=" + std::to_string(k) +
                         " padding=" + std::to_string(padding));
  }
  const std::size_t lout = (len + 2 * padding - k) / stride + 1;
  const std::size_t ck = cin * k;
  // im2col: cols[b][t][c*k + j] = x[b][c][t*stride + j - padding]
  std::vector<double> cols(batch * lout * ck, 0.0);
  const auto xv = x.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < lout; ++t)
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t j = 0; j < k; ++j) {
          const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * stride + j) - static_cast<std::ptrdiff_t>(padding);
          if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) {
            cols[(b * lout + t) * ck + c * k + j] = xv[(b * cin + c) * len + static_cast<std::size_t>(pos)];
          }
        }
  const auto BL = static_cast<Eigen::Index>(batch * lout), CK = static_cast<Eigen::Index>(ck),
             CO = static_cast<Eigen::Index>(cout);
  detail::RowMat prod = detail::ConstMatMap(cols.data(), BL, CK) *
                        detail::ConstMatMap(kernel.values().data(), CO, CK).transpose();  // (B*Lout, Cout)
  std::vector<double> values(batch * cout * lout);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < lout; ++t)
      for (std::size_t o = 0; o < cout; ++o)
        values[(b * cout + o) * lout + t] = prod(static_cast<Eigen::Index>(b * lout + t), static_cast<Eigen::Index>(o));
  auto xn = x.node();
  auto kn = kernel.node();
  return detail::make_result(
      "conv1d", {batch, cout, lout}, std::move(values), {&x, &kernel},
      [xn, kn, cols = std::move(cols), batch, cin, len, cout, k, lout, ck, stride, padding](detail::Node& self) {
        const auto BL = static_cast<Eigen::Index>(batch * lout), CK = static_cast<Eigen::Index>(ck),
                   CO = static_cast<Eigen::Index>(cout);
        detail::RowMat g(BL, CO);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t t = 0; t < lout; ++t)
            for (std::size_t o = 0; o < cout; ++o)
              g(static_cast<Eigen::Index>(b * lout + t), static_cast<Eigen::Index>(o)) = self.grad[(b * cout + o) * lout + t];
        if (kn->requires_grad) {
          kn->ensure_grad();
          detail::MatMap(kn->grad.data(), CO, CK).noalias() += g.transpose() * detail::ConstMatMap(cols.data(), BL, CK);
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          detail::RowMat dcols = g * detail::ConstMatMap(kn->value.data(), CO, CK);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < lout; ++t)
              for (std::size_t c = 0; c < cin; ++c)
                for (std::size_t j = 0; j < k; ++j) {
                  const std::ptrdiff_t pos =
                      static_cast<std::ptrdiff_t>(t * stride + j) - static_cast<std::ptrdiff_t>(padding);
                  if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) {
                    xn->grad[(b * cin + c) * len + static_cast<std::size_t>(pos)] +=
                        dcols(static_cast<Eigen::Index>(b * lout + t), static_cast<Eigen::Index>(c * k + j));
                  }
                }
        }
      });
}

}  // namespace gbt
