#pragma once

// Scaled dot-product attention with optional causal masking and the Error
// Score Modification (ESM) bias: a zero-centred Gaussian over key positions,
// one learnable scale per query, added to the scores before masking so that
// earlier (more trusted) prediction elements draw more attention.

#include <cmath>
#include <numbers>
#include <string>

#include "gbt/nn.hpp"

namespace gbt {

/// Shape of the ESM bias row as a function of key index j.
enum class EsmKernel {
  Pdf,           // N(j; 0, sigma^2)
  LogPdf,        // log N(j; 0, sigma^2)
  Unnormalized,  // exp(-j^2 / (2 sigma^2))
};

struct AttentionConfig {
  std::size_t model_dim = 512;
  std::size_t heads = 8;
  double dropout = 0.1;
  bool causal = false;
  bool esm = false;
  EsmKernel esm_kernel = EsmKernel::Pdf;
  bool esm_per_head = false;

  std::size_t head_dim() const { return model_dim / heads; }
  void validate() const {
    if (heads == 0 || model_dim % heads != 0) {
      throw ConfigError("attention: model_dim " + std::to_string(model_dim) + " not divisible by " +
                        std::to_string(heads) + " heads");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("attention: dropout must lie in [0, 1)");
  }
};

/// Softmax(Q K^T / sqrt(d_head) + bias) with optional causal mask.
/// q: (..., Lq, dh), k: (..., Lk, dh); bias broadcastable to (..., Lq, Lk).
inline Tensor attention_weights(const Tensor& q, const Tensor& k, bool causal, const Tensor* bias = nullptr) {
  if (q.size(-1) != k.size(-1)) {
    throw DimensionError("attention: query " + shape_str(q.shape()) + " vs key " + shape_str(k.shape()));
  }
  Tensor scores = scale(matmul(q, transpose_last(k)), 1.0 / std::sqrt(static_cast<double>(q.size(-1))));
  if (bias != nullptr && bias->defined()) scores = add(scores, *bias);
  return masked_softmax(scores, causal);
}

/// Attention output for (batch, heads, L, d_head) operands.
inline Tensor scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v, bool causal, const Tensor* bias,
                               double dropout_p, Context& ctx) {
  if (q.rank() != 4 || k.rank() != 4 || v.rank() != 4 || k.shape() != v.shape() || q.size(0) != k.size(0) ||
      q.size(1) != k.size(1)) {
    throw DimensionError("scaled_attention expects (batch, heads, L, d_head); got Q " + shape_str(q.shape()) +
                         " K " + shape_str(k.shape()) + " V " + shape_str(v.shape()));
  }
  Tensor w = attention_weights(q, k, causal, bias);
  return matmul(dropout(w, dropout_p, ctx.training, ctx.rng), v);
}

/// sigma = 3^(sigmoid(5 raw) + 1e-5) - 1, which keeps every scale inside
/// (3^1e-5 - 1, 3^(1 + 1e-5) - 1).
inline Tensor esm_sigma_transform(const Tensor& raw) {
  return add_scalar(pow_base(3.0, add_scalar(sigmoid(scale(raw, 5.0)), 1e-5)), -1.0);
}

/// Gaussian bias G[..., i, j] evaluated at key index j for scale sigma[..., i].
/// sigma: (..., L, 1) -> G: (..., L, key_len).
inline Tensor esm_bias(const Tensor& sigma, std::size_t key_len, EsmKernel kernel = EsmKernel::Pdf) {
  if (sigma.rank() < 1 || sigma.size(-1) != 1) {
    throw DimensionError("esm_bias expects sigma shaped (..., L, 1), got " + shape_str(sigma.shape()));
  }
  const auto sv = sigma.values();
  for (std::size_t i = 0; i < sv.size(); ++i) {
    if (!(sv[i] > 0.0)) throw NumericError("esm_bias: non-positive sigma at row " + std::to_string(i));
  }
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  const std::size_t rows = sv.size();
  Shape out = sigma.shape();
  out.back() = key_len;
  std::vector<double> values(rows * key_len);
  for (std::size_t r = 0; r < rows; ++r) {
    const double s = sv[r];
    for (std::size_t j = 0; j < key_len; ++j) {
      const double jj = static_cast<double>(j);
      const double expo = -jj * jj / (2.0 * s * s);
      switch (kernel) {
        case EsmKernel::Pdf: values[r * key_len + j] = inv_sqrt_2pi / s * std::exp(expo); break;
        case EsmKernel::LogPdf: values[r * key_len + j] = std::log(inv_sqrt_2pi / s) + expo; break;
        case EsmKernel::Unnormalized: values[r * key_len + j] = std::exp(expo); break;
      }
    }
  }
  auto sn = sigma.node();
  return detail::make_result("esm_bias", std::move(out), std::move(values), {&sigma},
                             [sn, rows, key_len, kernel](detail::Node& self) {
                               sn->ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double s = sn->value[r];
                                 double acc = 0.0;
                                 for (std::size_t j = 0; j < key_len; ++j) {
                                   const double j2 = static_cast<double>(j * j);
                                   const double g = self.value[r * key_len + j];
                                   double d = 0.0;
                                   switch (kernel) {
                                     case EsmKernel::Pdf: d = g * (-1.0 / s + j2 / (s * s * s)); break;
                                     case EsmKernel::LogPdf: d = -1.0 / s + j2 / (s * s * s); break;
                                     case EsmKernel::Unnormalized: d = g * j2 / (s * s * s); break;
                                   }
                                   acc += self.grad[r * key_len + j] * d;
                                 }
                                 sn->grad[r] += acc;
                               }
                             });
}

/// Multi-head attention with separate Q/K/V/output projections and an
/// optional ESM scale projection (d -> 1, or d -> heads when per-head).
struct MultiHeadAttention {
  MultiHeadAttention() = default;
  MultiHeadAttention(const AttentionConfig& config, std::mt19937_64& rng) : cfg(config) {
    cfg.validate();
    const std::size_t d = cfg.model_dim;
    query = Linear(d, d, true, rng);
    key = Linear(d, d, true, rng);
    value = Linear(d, d, true, rng);
    output = Linear(d, d, true, rng);
    // Drawn unconditionally so ESM on/off variants share every other initial weight.
    sigma = Linear(d, cfg.esm_per_head ? cfg.heads : 1, true, rng);
  }

  /// (batch, L, d) -> (batch, heads, L, d_head)
  Tensor split_heads(const Tensor& x) const {
    const std::size_t b = x.size(0), l = x.size(1);
    return permute(reshape(x, {b, l, cfg.heads, cfg.head_dim()}), {0, 2, 1, 3});
  }
  Tensor merge_heads(const Tensor& x) const {
    const std::size_t b = x.size(0), l = x.size(2);
    return reshape(permute(x, {0, 2, 1, 3}), {b, l, cfg.model_dim});
  }

  /// ESM bias for queries x: (batch, 1 or heads, L, key_len).
  Tensor esm_bias_for(const Tensor& x, std::size_t key_len) const {
    const std::size_t b = x.size(0), l = x.size(1);
    Tensor s = esm_sigma_transform(sigma.forward(x));  // (b, l, 1 | heads)
    Tensor rows = cfg.esm_per_head ? reshape(permute(s, {0, 2, 1}), {b, cfg.heads, l, 1}) : reshape(s, {b, 1, l, 1});
    return esm_bias(rows, key_len, cfg.esm_kernel);
  }

  /// Queries from xq (batch, Lq, d); keys/values from xkv (batch, Lk, d).
  Tensor forward(const Tensor& xq, const Tensor& xkv, Context& ctx) const {
    if (xq.rank() != 3 || xkv.rank() != 3 || xq.size(2) != cfg.model_dim || xkv.size(2) != cfg.model_dim ||
        xq.size(0) != xkv.size(0)) {
      throw DimensionError("attention expects (batch, L, " + std::to_string(cfg.model_dim) + "); got " +
                           shape_str(xq.shape()) + " and " + shape_str(xkv.shape()));
    }
    Tensor q = split_heads(query.forward(xq));
    Tensor k = split_heads(key.forward(xkv));
    Tensor v = split_heads(value.forward(xkv));
    Tensor bias;
    if (cfg.esm) bias = esm_bias_for(xq, xkv.size(1));
    Tensor attended = scaled_attention(q, k, v, cfg.causal, cfg.esm ? &bias : nullptr, cfg.dropout, ctx);
    return output.forward(merge_heads(attended));
  }
  Tensor self_attention(const Tensor& x, Context& ctx) const { return forward(x, x, ctx); }

  void collect(ParameterSet& ps, const std::string& prefix) const {
    query.collect(ps, prefix + "query.");
    key.collect(ps, prefix + "key.");
    value.collect(ps, prefix + "value.");
    output.collect(ps, prefix + "output.");
    if (cfg.esm) sigma.collect(ps, prefix + "esm_sigma.");
  }

  AttentionConfig cfg;
  Linear query, key, value, output;
  Linear sigma;
};

}  // namespace gbt
