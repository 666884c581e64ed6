#pragma once

// Every differentiable operation with a generator of small random instances,
// shared by the unit tests and the acceptance binary.

#include <string>
#include <vector>

#include "test_util.hpp"

namespace gbt::testing {

struct GradCase {
  std::function<Tensor(const std::vector<Tensor>&)> f;
  std::vector<Tensor> inputs;
};

struct DifferentiableOp {
  std::string name;
  std::function<GradCase(std::mt19937_64&)> make;
};

inline std::size_t extent(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline std::vector<DifferentiableOp> differentiable_ops() {
  using V = const std::vector<Tensor>&;
  std::vector<DifferentiableOp> ops;
  auto binary = [&](std::string name, Tensor (*op)(const Tensor&, const Tensor&)) {
    ops.push_back({name, [op](std::mt19937_64& r) {
                     const std::size_t a = extent(r, 1, 3), b = extent(r, 1, 4);
                     // Alternate between equal shapes and a broadcast trailing operand.
                     Shape rhs = extent(r, 0, 1) ? Shape{a, b} : Shape{b};
                     return GradCase{[op](V in) { return op(in[0], in[1]); },
                                     {random_tensor({a, b}, r), random_tensor(rhs, r)}};
                   }});
  };
  binary("add", add);
  binary("sub", sub);
  binary("mul", mul);
  auto unary = [&](std::string name, std::function<Tensor(const Tensor&)> op, double lo = -1.0, double hi = 1.0) {
    ops.push_back({name, [op, lo, hi](std::mt19937_64& r) {
                     return GradCase{[op](V in) { return op(in[0]); },
                                     {random_tensor({extent(r, 1, 3), extent(r, 1, 4)}, r, lo, hi)}};
                   }});
  };
  unary("scale", [](const Tensor& x) { return scale(x, -1.7); });
  unary("add_scalar", [](const Tensor& x) { return add_scalar(x, 0.3); });
  unary("square", [](const Tensor& x) { return square(x); });
  unary("exp", [](const Tensor& x) { return exp(x); });
  unary("pow_base", [](const Tensor& x) { return pow_base(3.0, x); });
  unary("sigmoid", [](const Tensor& x) { return sigmoid(scale(x, 4.0)); });
  unary("gelu", [](const Tensor& x) { return gelu(scale(x, 2.0)); });
  unary("sum", [](const Tensor& x) { return sum(x); });
  unary("mean", [](const Tensor& x) { return mean(x); });
  unary("esm_sigma_transform", [](const Tensor& x) { return esm_sigma_transform(x); });
  ops.push_back({"dropout", [](std::mt19937_64& r) {
                   const std::uint64_t seed = r();
                   return GradCase{[seed](V in) {
                                     std::mt19937_64 g(seed);
                                     return dropout(in[0], 0.3, true, g);
                                   },
                                   {random_tensor({extent(r, 2, 4), extent(r, 2, 5)}, r)}};
                 }});
  ops.push_back({"mse_loss", [](std::mt19937_64& r) {
                   const Shape s{extent(r, 1, 3), extent(r, 1, 4)};
                   return GradCase{[](V in) { return mse_loss(in[0], in[1]); }, {random_tensor(s, r), random_tensor(s, r)}};
                 }});
  ops.push_back({"reshape", [](std::mt19937_64& r) {
                   const std::size_t a = extent(r, 1, 3), b = extent(r, 1, 3);
                   return GradCase{[a, b](V in) { return reshape(in[0], {b, a * 2}); }, {random_tensor({2, a, b}, r)}};
                 }});
  ops.push_back({"permute", [](std::mt19937_64& r) {
                   return GradCase{[](V in) { return permute(in[0], {2, 0, 1}); },
                                   {random_tensor({extent(r, 1, 3), extent(r, 1, 3), extent(r, 1, 3)}, r)}};
                 }});
  ops.push_back({"transpose_last", [](std::mt19937_64& r) {
                   return GradCase{[](V in) { return transpose_last(in[0]); },
                                   {random_tensor({extent(r, 1, 2), extent(r, 1, 3), extent(r, 1, 4)}, r)}};
                 }});
  ops.push_back({"slice", [](std::mt19937_64& r) {
                   const std::size_t n = extent(r, 3, 7), start = extent(r, 0, 1), step = extent(r, 1, 2);
                   return GradCase{[n, start, step](V in) { return slice(in[0], 1, start, n, step); },
                                   {random_tensor({2, n, 3}, r)}};
                 }});
  ops.push_back({"concat", [](std::mt19937_64& r) {
                   const std::size_t axis = extent(r, 0, 2);
                   Shape a{2, 3, 2}, b{2, 3, 2};
                   b[axis] = extent(r, 1, 3);
                   return GradCase{[axis](V in) { return concat({in[0], in[1]}, axis); },
                                   {random_tensor(a, r), random_tensor(b, r)}};
                 }});
  ops.push_back({"matmul", [](std::mt19937_64& r) {
                   const std::size_t m = extent(r, 1, 4), k = extent(r, 1, 4), n = extent(r, 1, 4);
                   const bool batched_b = extent(r, 0, 1);
                   Shape bs = batched_b ? Shape{2, k, n} : Shape{k, n};
                   return GradCase{[](V in) { return matmul(in[0], in[1]); },
                                   {random_tensor({2, m, k}, r), random_tensor(bs, r)}};
                 }});
  ops.push_back({"masked_softmax", [](std::mt19937_64& r) {
                   const std::size_t l = extent(r, 1, 5);
                   const bool causal = extent(r, 0, 1);
                   return GradCase{[causal](V in) { return masked_softmax(in[0], causal); },
                                   {random_tensor({2, l, l}, r, -2.0, 2.0)}};
                 }});
  ops.push_back({"layer_norm", [](std::mt19937_64& r) {
                   const std::size_t d = extent(r, 2, 6);
                   return GradCase{[](V in) { return layer_norm(in[0], in[1], in[2]); },
                                   {random_tensor({extent(r, 1, 3), d}, r, -2.0, 2.0), random_tensor({d}, r),
                                    random_tensor({d}, r)}};
                 }});
  ops.push_back({"weight_norm_apply", [](std::mt19937_64& r) {
                   const std::size_t co = extent(r, 1, 3);
                   return GradCase{[](V in) { return weight_norm_apply(in[0], in[1]); },
                                   {random_tensor({co, extent(r, 1, 3), extent(r, 1, 3)}, r, 0.2, 1.0),
                                    random_tensor({co}, r)}};
                 }});
  ops.push_back({"conv1d", [](std::mt19937_64& r) {
                   const std::size_t ci = extent(r, 1, 3), co = extent(r, 1, 3), k = 2 * extent(r, 0, 1) + 1;
                   const std::size_t stride = extent(r, 1, 2), pad = k / 2, len = extent(r, 3, 6);
                   return GradCase{[stride, pad](V in) { return conv1d(in[0], in[1], stride, pad); },
                                   {random_tensor({2, ci, len}, r), random_tensor({co, ci, k}, r)}};
                 }});
  for (EsmKernel kernel : {EsmKernel::Pdf, EsmKernel::LogPdf, EsmKernel::Unnormalized}) {
    const std::string name = kernel == EsmKernel::Pdf ? "esm_bias(pdf)"
                             : kernel == EsmKernel::LogPdf ? "esm_bias(log_pdf)"
                                                           : "esm_bias(unnormalized)";
    ops.push_back({name, [kernel](std::mt19937_64& r) {
                     const std::size_t l = extent(r, 1, 4), lk = extent(r, 1, 5);
                     return GradCase{[kernel, lk](V in) { return esm_bias(in[0], lk, kernel); },
                                     {random_tensor({2, l, 1}, r, 0.3, 2.0)}};
                   }});
  }
  return ops;
}

}  // namespace gbt::testing
