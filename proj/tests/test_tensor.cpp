#include <gtest/gtest.h>

#include "op_registry.hpp"

using namespace gbt;
using gbt::testing::random_tensor;

namespace {

Tensor mat(Shape s, std::vector<double> v, bool grad = false) { return Tensor::from_vector(std::move(s), std::move(v), grad); }

std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t t = 0; t < k; ++t) out[i * n + j] += a.at(i * k + t) * b.at(t * n + j);
  return out;
}

std::vector<double> naive_conv1d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  const std::size_t b = x.size(0), ci = x.size(1), len = x.size(2), co = w.size(0), k = w.size(2);
  const std::size_t out_len = (len + 2 * pad - k) / stride + 1;
  std::vector<double> out(b * co * out_len, 0.0);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t t = 0; t < out_len; ++t)
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t j = 0; j < k; ++j) {
            const long pos = static_cast<long>(t * stride + j) - static_cast<long>(pad);
            if (pos < 0 || pos >= static_cast<long>(len)) continue;
            out[(n * co + o) * out_len + t] +=
                x.at((n * ci + c) * len + static_cast<std::size_t>(pos)) * w.at((o * ci + c) * k + j);
          }
  return out;
}

}  // namespace

TEST(Tensor, ShapeMustMatchValueCount) {
  EXPECT_THROW(Tensor::from_vector({2, 3}, std::vector<double>(5)), DimensionError);
  Tensor t = Tensor::zeros({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.size(-1), 4u);
  EXPECT_THROW(t.size(3), DimensionError);
}

TEST(Matmul, IdentityAndZeroRowCases) {
  Tensor id = mat({2, 2}, {1, 0, 0, 1});
  Tensor a = mat({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(matmul(id, a).values()[3], 4.0);
  Tensor z = matmul(mat({2, 2}, {1, 0, 0, 0}), mat({2, 1}, {5, 7}));
  EXPECT_EQ(z.values()[0], 5.0);
  EXPECT_EQ(z.values()[1], 0.0);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t m = 1 + rng() % 8, k = 1 + rng() % 8, n = 1 + rng() % 8;
    Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    EXPECT_LT(gbt::testing::max_abs_diff(matmul(a, b).values(), naive_matmul(a, b)), 1e-12);
  }
}

TEST(Matmul, BroadcastsBatchDimsAndRejectsMismatch) {
  std::mt19937_64 rng(2);
  Tensor a = random_tensor({3, 2, 4}, rng), b = random_tensor({1, 4, 5}, rng);
  Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 2, 5}));
  for (std::size_t i = 0; i < 3; ++i) {
    Tensor ai = reshape(slice(a, 0, i, i + 1), {2, 4});
    Tensor ci = reshape(slice(c, 0, i, i + 1), {2, 5});
    EXPECT_LT(gbt::testing::max_abs_diff(ci.values(), naive_matmul(ai, reshape(b, {4, 5}))), 1e-12);
  }
  EXPECT_THROW(matmul(random_tensor({2, 3}, rng), random_tensor({4, 2}, rng)), DimensionError);
}

TEST(Matmul, ZeroBlockGivesBitZeros) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({6, 4}, rng);
  auto v = x.mutable_values();
  for (std::size_t i = 3 * 4; i < v.size(); ++i) v[i] = 0.0;
  Tensor w = random_tensor({4, 4}, rng);
  Tensor q = matmul(x, w);
  Tensor s = matmul(q, transpose_last(q));
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j)
      if (i >= 3 || j >= 3) {
        EXPECT_EQ(s.values()[i * 6 + j], 0.0);
      }
}

TEST(MaskedSoftmax, HandCases) {
  Tensor u = masked_softmax(mat({1, 2}, {0, 0}), false);
  EXPECT_DOUBLE_EQ(u.values()[0], 0.5);
  Tensor c = masked_softmax(mat({2, 2}, {3.5, -8.0, 1.0, 2.0}), true);
  EXPECT_EQ(c.values()[0], 1.0);
  EXPECT_EQ(c.values()[1], 0.0);
  Tensor r = masked_softmax(mat({1, 3}, {1, 2, 3}), false);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(r.values()[j], std::exp(j + 1.0) / z, 1e-12);
}

TEST(MaskedSoftmax, RowsSumToOneAndMaskedEntriesAreZero) {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t l = 1 + rng() % 8;
    Tensor p = masked_softmax(random_tensor({2, l, l}, rng, -30, 30), true);
    for (std::size_t r = 0; r < 2 * l; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < l; ++j) {
        s += p.values()[r * l + j];
        if (j > r % l) {
          EXPECT_EQ(p.values()[r * l + j], 0.0);
        }
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Conv1d, HandCasesAndOracle) {
  Tensor y = conv1d(mat({1, 1, 3}, {1, 2, 3}), mat({1, 1, 3}, {1, 1, 1}), 1, 1);
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{3, 6, 5}));
  Tensor d = conv1d(mat({1, 1, 4}, {1, 2, 3, 4}), mat({1, 1, 1}, {1}), 2, 0);
  EXPECT_EQ(std::vector<double>(d.values().begin(), d.values().end()), (std::vector<double>{1, 3}));
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t ci = 1 + rng() % 4, co = 1 + rng() % 4, k = 1 + 2 * (rng() % 2), s = 1 + rng() % 2;
    const std::size_t len = k + rng() % 6;
    Tensor x = random_tensor({2, ci, len}, rng), w = random_tensor({co, ci, k}, rng);
    EXPECT_LT(gbt::testing::max_abs_diff(conv1d(x, w, s, k / 2).values(), naive_conv1d(x, w, s, k / 2)), 1e-12);
  }
  EXPECT_THROW(conv1d(mat({1, 1, 1}, {1}), mat({1, 1, 3}, {1, 1, 1}), 1, 0), DimensionError);
}

TEST(Elementwise, FixedPoints) {
  EXPECT_EQ(gelu(Tensor::scalar(0.0)).item(), 0.0);
  EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({3, 3}, rng);
  std::mt19937_64 g(1);
  Tensor y = dropout(x, 0.0, true, g);
  EXPECT_EQ(gbt::testing::max_abs_diff(x.values(), y.values()), 0.0);
  EXPECT_THROW(dropout(x, 1.0, true, g), UsageError);
}

TEST(Dropout, ZeroesOrRescalesAndIsIdentityInEval) {
  Tensor x = Tensor::full({1000}, 2.0);
  std::mt19937_64 g(7);
  Tensor y = dropout(x, 0.25, true, g);
  std::size_t zeros = 0;
  for (double v : y.values()) {
    if (v == 0.0) {
      ++zeros;
    } else {
      EXPECT_DOUBLE_EQ(v, 2.0 / 0.75);
    }
  }
  EXPECT_GT(zeros, 180u);
  EXPECT_LT(zeros, 320u);
  EXPECT_EQ(dropout(x, 0.25, false, g).node(), x.node());
}

TEST(WeightNorm, HandCasesAndZeroChannel) {
  Tensor w = weight_norm_apply(mat({1, 2}, {3, 4}), mat({1}, {1}));
  EXPECT_NEAR(w.values()[0], 0.6, 1e-15);
  EXPECT_NEAR(w.values()[1], 0.8, 1e-15);
  Tensor same = weight_norm_apply(mat({1, 2}, {3, 4}), mat({1}, {5}));
  EXPECT_NEAR(same.values()[0], 3.0, 1e-14);
  try {
    weight_norm_apply(mat({2, 2}, {1, 1, 0, 0}), mat({2}, {1, 1}));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("channel 1"), std::string::npos) << e.what();
  }
}

TEST(Backward, PolynomialAndNonParticipation) {
  Tensor x = Tensor::scalar(3.0, true);
  backward(square(x));
  EXPECT_EQ(x.grad()[0], 6.0);
  backward(square(x));
  EXPECT_EQ(x.grad()[0], 12.0) << "leaf gradients accumulate";
  Tensor frozen = Tensor::scalar(2.0, false);
  Tensor w = Tensor::scalar(1.5, true);
  backward(mul(frozen, w));
  EXPECT_FALSE(frozen.has_grad());
  EXPECT_EQ(w.grad()[0], 2.0);
}

TEST(Backward, RejectsNonScalarOrDisconnectedLoss) {
  std::mt19937_64 rng(8);
  EXPECT_THROW(backward(random_tensor({2}, rng)), UsageError);
  EXPECT_THROW(backward(Tensor::scalar(1.0)), UsageError);
}

TEST(Backward, NoGradGuardKeepsResultsOffTheTape) {
  Tensor x = Tensor::scalar(1.0, true);
  NoGradGuard ng;
  EXPECT_FALSE(square(x).requires_grad());
}

TEST(FiniteChecks, SurfaceNonFiniteResults) {
  FiniteCheckGuard on;
  EXPECT_THROW(exp(Tensor::scalar(1000.0)), NumericError);
}

TEST(GradientCheck, EveryDifferentiableOpOnRandomInstances) {
  for (const auto& op : gbt::testing::differentiable_ops()) {
    std::mt19937_64 rng(std::hash<std::string>{}(op.name));
    for (int rep = 0; rep < 20; ++rep) {
      auto c = op.make(rng);
      EXPECT_LT(gbt::testing::gradient_check(c.f, c.inputs, rng()), 1e-4) << op.name << " instance " << rep;
    }
  }
}

TEST(GradientCheck, SumOfMatmulOnThreeByThree) {
  std::mt19937_64 rng(9);
  Tensor a = random_tensor({3, 3}, rng), b = random_tensor({3, 3}, rng);
  EXPECT_LT(gbt::testing::gradient_check([](const std::vector<Tensor>& in) { return sum(matmul(in[0], in[1])); },
                                         {a, b}),
            1e-4);
}

TEST(Adam, ScalarHandEvaluation) {
  Tensor w = Tensor::scalar(0.0, true);
  w.mutable_grad()[0] = 1.0;
  Adam opt({w});
  opt.step(1e-4);
  EXPECT_NEAR(w.item(), -1e-4 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(opt.state().step, 1);
}

TEST(Adam, ZeroGradientIsANoOp) {
  std::mt19937_64 rng(10);
  Tensor w = random_tensor({4}, rng);
  const std::vector<double> before(w.values().begin(), w.values().end());
  for (double& g : w.mutable_grad()) g = 0.0;
  Adam opt({w});
  opt.step(1e-2);
  opt.step(1e-2);
  EXPECT_EQ(gbt::testing::max_abs_diff(w.values(), before), 0.0);
}

TEST(Adam, TwoStepsMatchScalarReference) {
  Tensor w = Tensor::from_vector({2}, {0.5, -0.25}, true);
  Adam opt({w});
  const double g[2] = {0.3, -1.2};
  double ref[2] = {0.5, -0.25}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int step = 1; step <= 2; ++step) {
    opt.zero_grad();
    w.mutable_grad()[0] = g[0];
    w.mutable_grad()[1] = g[1];
    opt.step(1e-3);
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, step)), vh = v[i] / (1 - std::pow(0.999, step));
      ref[i] -= 1e-3 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  EXPECT_NEAR(w.values()[0], ref[0], 1e-12);
  EXPECT_NEAR(w.values()[1], ref[1], 1e-12);
}

TEST(Adam, SkipsParametersWithoutGradients) {
  Tensor a = Tensor::scalar(1.0, true), b = Tensor::scalar(2.0, true);
  a.mutable_grad()[0] = 1.0;
  Adam opt({a, b});
  opt.step(0.1);
  EXPECT_EQ(b.item(), 2.0);
  EXPECT_LT(a.item(), 1.0);
}
