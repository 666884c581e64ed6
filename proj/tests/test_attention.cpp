#include <gtest/gtest.h>

#include <numbers>

#include "test_util.hpp"

using namespace gbt;
using gbt::testing::max_abs_diff;
using gbt::testing::random_tensor;

namespace {

Tensor mat(Shape s, std::vector<double> v) { return Tensor::from_vector(std::move(s), std::move(v)); }

double sigma_of(double raw) { return std::pow(3.0, 1.0 / (1.0 + std::exp(-5.0 * raw)) + 1e-5) - 1.0; }

/// Line-by-line scalar composition of masked self-attention with ESM for
/// one head: Q, K, V projections, scores / sqrt(d), + G, causal mask,
/// softmax, weighted sum, output projection.
std::vector<double> scalar_esm_attention(const MultiHeadAttention& m, const Tensor& x) {
  const std::size_t l = x.size(1), d = x.size(2);
  auto project = [&](const Linear& lin, std::size_t t, std::size_t o, const std::vector<double>& in) {
    double acc = lin.bias.at(o);
    for (std::size_t i = 0; i < lin.in_features; ++i) acc += in[t * lin.in_features + i] * lin.weight.at(i * lin.out_features + o);
    return acc;
  };
  const std::vector<double> xs(x.values().begin(), x.values().end());
  std::vector<double> q(l * d), k(l * d), v(l * d), sig(l);
  for (std::size_t t = 0; t < l; ++t) {
    for (std::size_t o = 0; o < d; ++o) {
      q[t * d + o] = project(m.query, t, o, xs);
      k[t * d + o] = project(m.key, t, o, xs);
      v[t * d + o] = project(m.value, t, o, xs);
    }
    sig[t] = sigma_of(project(m.sigma, t, 0, xs));
  }
  std::vector<double> attended(l * d, 0.0);
  for (std::size_t i = 0; i < l; ++i) {
    std::vector<double> a(l);
    double mx = -INFINITY;
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += q[i * d + c] * k[j * d + c];
      s /= std::sqrt(static_cast<double>(d));
      const double jj = static_cast<double>(j);
      s += std::exp(-jj * jj / (2.0 * sig[i] * sig[i])) / (std::sqrt(2.0 * std::numbers::pi) * sig[i]);
      a[j] = s;
      mx = std::max(mx, s);
    }
    double z = 0.0;
    for (std::size_t j = 0; j <= i; ++j) z += std::exp(a[j] - mx);
    for (std::size_t j = 0; j <= i; ++j)
      for (std::size_t c = 0; c < d; ++c) attended[i * d + c] += std::exp(a[j] - mx) / z * v[j * d + c];
  }
  std::vector<double> out(l * d);
  for (std::size_t t = 0; t < l; ++t)
    for (std::size_t o = 0; o < d; ++o) out[t * d + o] = project(m.output, t, o, attended);
  return out;
}

MultiHeadAttention make_attention(std::size_t d, std::size_t heads, bool causal, bool esm, std::uint64_t seed,
                                  bool per_head = false) {
  std::mt19937_64 rng(seed);
  return MultiHeadAttention({d, heads, 0.0, causal, esm, EsmKernel::Pdf, per_head}, rng);
}

}  // namespace

TEST(ScaledAttention, UniformScoresAverageValueRows) {
  Context ctx(1);
  Tensor q = Tensor::zeros({1, 1, 3, 2}), k = Tensor::zeros({1, 1, 3, 2});
  Tensor v = mat({1, 1, 3, 2}, {1, 0, 0, 1, 2, 5});
  Tensor out = scaled_attention(q, k, v, false, nullptr, 0.0, ctx);
  EXPECT_NEAR(out.at(0), 1.0, 1e-15);
  EXPECT_NEAR(out.at(1), 2.0, 1e-15);
}

TEST(ScaledAttention, SingleKeyReturnsItsValue) {
  Context ctx(1);
  std::mt19937_64 rng(2);
  Tensor q = random_tensor({1, 1, 4, 3}, rng, -50, 50), k = random_tensor({1, 1, 1, 3}, rng);
  Tensor v = mat({1, 1, 1, 3}, {0.25, -7.0, 1.5});
  Tensor out = scaled_attention(q, k, v, false, nullptr, 0.0, ctx);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(out.at(3 * i), 0.25);
    EXPECT_EQ(out.at(3 * i + 1), -7.0);
    EXPECT_EQ(out.at(3 * i + 2), 1.5);
  }
}

TEST(ScaledAttention, TwoByTwoScalarOracle) {
  Context ctx(1);
  const std::vector<double> qv{0.3, -1.2, 0.8, 0.5}, kv{1.1, 0.4, -0.6, 0.9}, vv{2.0, -1.0, 0.5, 3.0};
  Tensor out = scaled_attention(mat({1, 1, 2, 2}, qv), mat({1, 1, 2, 2}, kv), mat({1, 1, 2, 2}, vv), false, nullptr,
                                0.0, ctx);
  for (std::size_t i = 0; i < 2; ++i) {
    double s[2];
    for (std::size_t j = 0; j < 2; ++j) s[j] = (qv[2 * i] * kv[2 * j] + qv[2 * i + 1] * kv[2 * j + 1]) / std::sqrt(2.0);
    const double w0 = 1.0 / (1.0 + std::exp(s[1] - s[0])), w1 = 1.0 - w0;
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(out.at(2 * i + c), w0 * vv[c] + w1 * vv[2 + c], 1e-12);
  }
}

TEST(ScaledAttention, RejectsMismatchedShapes) {
  Context ctx(1);
  EXPECT_THROW(scaled_attention(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 2, 3}), Tensor::zeros({1, 1, 2, 3}),
                                false, nullptr, 0.0, ctx),
               DimensionError);
  EXPECT_THROW(scaled_attention(Tensor::zeros({2, 2}), Tensor::zeros({2, 2}), Tensor::zeros({2, 2}), false, nullptr,
                                0.0, ctx),
               DimensionError);
  std::mt19937_64 rng(3);
  EXPECT_THROW(MultiHeadAttention({30, 4}, rng), ConfigError);
}

TEST(EsmSigma, ZeroProjectionValue) {
  EXPECT_NEAR(esm_sigma_transform(Tensor::scalar(0.0)).item(), std::pow(3.0, 0.50001) - 1.0, 1e-15);
  EXPECT_NEAR(esm_sigma_transform(Tensor::scalar(0.0)).item(), 0.73206, 1e-5);
}

TEST(EsmSigma, LimitsApproachTheBounds) {
  EXPECT_NEAR(esm_sigma_transform(Tensor::scalar(-1e3)).item(), std::pow(3.0, 1e-5) - 1.0, 1e-15);
  EXPECT_NEAR(esm_sigma_transform(Tensor::scalar(-1e3)).item(), 1.0986e-5, 1e-9);
  EXPECT_NEAR(esm_sigma_transform(Tensor::scalar(1e3)).item(), std::pow(3.0, 1.00001) - 1.0, 1e-12);
}

TEST(EsmSigma, RandomInputsStayInsideBounds) {
  std::mt19937_64 rng(4);
  Tensor s = esm_sigma_transform(random_tensor({10000}, rng, -40, 40));
  for (double v : s.values()) {
    EXPECT_GT(v, 1.0e-5);
    EXPECT_LT(v, 2.0001);
  }
}

TEST(EsmBias, UnitSigmaAtOrigin) {
  Tensor g = esm_bias(mat({1, 1}, {1.0}), 3);
  EXPECT_NEAR(g.at(0), 1.0 / std::sqrt(2.0 * std::numbers::pi), 1e-15);
  EXPECT_NEAR(g.at(0), 0.39894, 1e-5);
  EXPECT_NEAR(esm_bias(mat({1, 1}, {1.0}), 1, EsmKernel::Unnormalized).at(0), 1.0, 0.0);
  EXPECT_NEAR(esm_bias(mat({1, 1}, {2.0}), 2, EsmKernel::LogPdf).at(1),
              std::log(1.0 / (std::sqrt(2.0 * std::numbers::pi) * 2.0)) - 1.0 / 8.0, 1e-14);
}

TEST(EsmBias, RowsStrictlyDecrease) {
  std::mt19937_64 rng(5);
  Tensor sig = esm_sigma_transform(random_tensor({64, 1}, rng, 0.0, 3.0));
  for (EsmKernel kernel : {EsmKernel::Pdf, EsmKernel::LogPdf, EsmKernel::Unnormalized}) {
    Tensor g = esm_bias(sig, 8, kernel);
    for (std::size_t r = 0; r < 64; ++r)
      for (std::size_t j = 1; j < 8; ++j) EXPECT_LT(g.at(r * 8 + j), g.at(r * 8 + j - 1)) << "row " << r << " j " << j;
  }
}

TEST(EsmBias, SmallSigmaRowsDecreaseUntilUnderflow) {
  std::mt19937_64 rng(6);
  Tensor g = esm_bias(esm_sigma_transform(random_tensor({256, 1}, rng, -8.0, 8.0)), 16);
  for (std::size_t r = 0; r < 256; ++r)
    for (std::size_t j = 1; j < 16; ++j) {
      const double prev = g.at(r * 16 + j - 1), cur = g.at(r * 16 + j);
      if (prev > 0.0) {
        EXPECT_LT(cur, prev);
      } else {
        EXPECT_EQ(cur, 0.0);
      }
    }
}

TEST(EsmBias, LowerBoundConcentratesMassAtOrigin) {
  Tensor g = esm_bias(esm_sigma_transform(Tensor::from_vector({1, 1}, {-1e3})), 2);
  EXPECT_LT(g.at(1) / g.at(0), 1e-10);
}

TEST(EsmBias, RejectsNonPositiveSigmaAndBadShapes) {
  EXPECT_THROW(esm_bias(mat({2, 1}, {1.0, 0.0}), 3), NumericError);
  EXPECT_THROW(esm_bias(mat({2, 2}, {1, 1, 1, 1}), 3), DimensionError);
}

TEST(EsmAttention, ThreeTokenScalarOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const MultiHeadAttention m = make_attention(4, 1, true, true, seed);
    std::mt19937_64 rng(seed + 100);
    Tensor x = random_tensor({1, 3, 4}, rng, -2, 2, false);
    Context ctx(1);
    EXPECT_LT(max_abs_diff(m.self_attention(x, ctx).values(), scalar_esm_attention(m, x)), 1e-12);
  }
}

TEST(EsmAttention, DisabledEqualsPlainCausalAttention) {
  const MultiHeadAttention off = make_attention(8, 2, true, false, 7);
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({2, 5, 8}, rng, -1, 1, false);
  Context ctx(1);
  Tensor q = off.split_heads(off.query.forward(x)), k = off.split_heads(off.key.forward(x));
  Tensor v = off.split_heads(off.value.forward(x));
  Tensor ref = off.output.forward(off.merge_heads(scaled_attention(q, k, v, true, nullptr, 0.0, ctx)));
  EXPECT_EQ(max_abs_diff(off.self_attention(x, ctx).values(), ref.values()), 0.0);
}

TEST(EsmAttention, CausalByPerturbation) {
  for (bool per_head : {false, true}) {
    const MultiHeadAttention m = make_attention(8, 2, true, true, 9, per_head);
    std::mt19937_64 rng(10);
    Tensor x = random_tensor({1, 6, 8}, rng, -1, 1, false);
    Context ctx(1);
    Tensor base = m.self_attention(x, ctx);
    for (std::size_t t = 0; t < 6; ++t) {
      Tensor y = Tensor::from_vector(x.shape(), std::vector<double>(x.values().begin(), x.values().end()));
      auto yv = y.mutable_values();
      for (std::size_t i = (t + 1) * 8; i < yv.size(); ++i) yv[i] += 3.0;
      Tensor out = m.self_attention(y, ctx);
      EXPECT_EQ(max_abs_diff(out.values().subspan(0, (t + 1) * 8), base.values().subspan(0, (t + 1) * 8)), 0.0);
    }
  }
}

TEST(EsmAttention, CausalByGradientInspection) {
  const MultiHeadAttention m = make_attention(4, 2, true, true, 11);
  std::mt19937_64 rng(12);
  for (std::size_t t = 0; t < 4; ++t) {
    Tensor x = random_tensor({1, 5, 4}, rng);
    Context ctx(1);
    backward(sum(slice(m.self_attention(x, ctx), 1, t, t + 1)));
    for (std::size_t i = (t + 1) * 4; i < x.numel(); ++i) EXPECT_LT(std::abs(x.grad()[i]), 1e-12);
  }
}

TEST(EsmAttention, MaskedWeightsStayExactlyZero) {
  std::mt19937_64 rng(13);
  Tensor q = random_tensor({1, 1, 5, 2}, rng), k = random_tensor({1, 1, 5, 2}, rng);
  Tensor sigma = esm_sigma_transform(random_tensor({1, 1, 5, 1}, rng, -3, 3));
  Tensor g = esm_bias(sigma, 5);
  Tensor w = attention_weights(q, k, true, &g);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = i + 1; j < 5; ++j) EXPECT_EQ(w.at(i * 5 + j), 0.0);
}

TEST(EsmAttention, EqualScoresShiftWeightTowardOrigin) {
  Tensor q = Tensor::zeros({1, 1, 1, 2}), k = Tensor::zeros({1, 1, 2, 2});
  const Tensor plain = attention_weights(q, k, false);
  for (double raw : {-2.0, 0.0, 2.0}) {
    Tensor g = esm_bias(esm_sigma_transform(Tensor::from_vector({1, 1, 1, 1}, {raw})), 2);
    EXPECT_GT(attention_weights(q, k, false, &g).at(0), plain.at(0));
  }
}

TEST(EsmAttention, PerHeadBiasHasOneRowPerHead) {
  const MultiHeadAttention m = make_attention(8, 4, true, true, 14, true);
  std::mt19937_64 rng(15);
  EXPECT_EQ(m.esm_bias_for(random_tensor({2, 3, 8}, rng), 3).shape(), (Shape{2, 4, 3, 3}));
  const MultiHeadAttention shared = make_attention(8, 4, true, true, 14);
  EXPECT_EQ(shared.esm_bias_for(random_tensor({2, 3, 8}, rng), 3).shape(), (Shape{2, 1, 3, 3}));
}

TEST(EsmAttention, SigmaParametersOnlyCollectedWhenEnabled) {
  ParameterSet on, off;
  make_attention(8, 2, true, true, 16).collect(on, "a.");
  make_attention(8, 2, true, false, 16).collect(off, "a.");
  EXPECT_NE(on.find("a.esm_sigma.weight"), nullptr);
  EXPECT_EQ(off.find("a.esm_sigma.weight"), nullptr);
  EXPECT_EQ(on.size(), off.size() + 2);
  // Shared draws: every non-ESM weight is identical across the two.
  EXPECT_EQ(max_abs_diff(on.find("a.output.weight")->values(), off.find("a.output.weight")->values()), 0.0);
}

TEST(EsmAttention, GradientCheckThroughFullLayer) {
  const MultiHeadAttention m = make_attention(4, 2, true, true, 17, true);
  std::mt19937_64 rng(18);
  ParameterSet ps;
  m.collect(ps, "");
  std::vector<Tensor> inputs{random_tensor({1, 4, 4}, rng)};
  for (const Tensor& t : ps.tensors()) inputs.push_back(t);
  const double err = gbt::testing::gradient_check(
      [&](const std::vector<Tensor>& in) {
        Context ctx(1);
        return m.self_attention(in[0], ctx);
      },
      inputs);
  EXPECT_LT(err, 1e-4);
}
