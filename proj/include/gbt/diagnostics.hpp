#pragma once

// Zero-initialization degeneracy probe: a canonical decoder first layer fed
// [start token | zeros] and its raw query-key score matrix.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>

#include "gbt/nn.hpp"

namespace gbt {

enum class DiagnosticRegime { Zero, StartToken, StartTokenPosEmb };

inline const char* regime_name(DiagnosticRegime r) {
  switch (r) {
    case DiagnosticRegime::Zero: return "zero";
    case DiagnosticRegime::StartToken: return "start_token";
    case DiagnosticRegime::StartTokenPosEmb: return "start_token_posemb";
  }
  return "zero";
}

inline DiagnosticRegime parse_regime(const std::string& s) {
  if (s == "zero") return DiagnosticRegime::Zero;
  if (s == "start_token") return DiagnosticRegime::StartToken;
  if (s == "start_token_posemb" || s == "start_token_with_posemb" || s == "posemb") {
    return DiagnosticRegime::StartTokenPosEmb;
  }
  throw ConfigError("unknown regime \"" + s + "\"; expected zero, start_token or start_token_posemb");
}

struct DegeneracyReport {
  DiagnosticRegime regime = DiagnosticRegime::Zero;
  std::size_t embed_dim = 0, token_len = 0, pred_len = 0;
  bool projection_bias = false;
  bool position_embedding = false;
  /// max |score| over the token-prediction, prediction-token and
  /// prediction-prediction blocks.
  double max_abs_prediction_blocks = 0.0;
  /// max |score| over the token-token block, for scale.
  double max_abs_token_block = 0.0;
  /// max difference between any two prediction rows.
  double prediction_row_spread = 0.0;
  /// max |prediction-row score - pos-emb-only recomputation|.
  double posemb_recompute_diff = 0.0;
  std::string verdict;
};

/// Raw scores S = (X Wq + bq)(X Wk + bk)^T for X = [token | zeros] (+ PE).
/// Bias defaults: off for zero and posemb regimes, on for start_token.
inline DegeneracyReport zero_init_diagnostic(std::size_t embed_dim, std::size_t s, std::size_t l_out,
                                             DiagnosticRegime regime, std::uint64_t seed,
                                             std::optional<bool> with_bias = std::nullopt) {
  if (embed_dim == 0 || l_out == 0) throw ConfigError("diagnostic needs positive embed_dim and l_out");
  DegeneracyReport rep;
  rep.regime = regime;
  rep.embed_dim = embed_dim;
  rep.token_len = s;
  rep.pred_len = l_out;
  rep.projection_bias = with_bias.value_or(regime == DiagnosticRegime::StartToken);
  rep.position_embedding = regime == DiagnosticRegime::StartTokenPosEmb;

  std::mt19937_64 rng(seed);
  const std::size_t n = s + l_out, d = embed_dim;
  Linear wq(d, d, rep.projection_bias, rng), wk(d, d, rep.projection_bias, rng);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> x(n * d, 0.0);
  for (std::size_t i = 0; i < s * d; ++i) x[i] = gauss(rng);
  Tensor pe = sinusoidal_positions(n, d);
  if (rep.position_embedding)
    for (std::size_t i = 0; i < n * d; ++i) x[i] += pe.values()[i];
  Tensor input = Tensor::from_vector({n, d}, x);
  Tensor scores = matmul(wq.forward(input), transpose_last(wk.forward(input)));
  const auto sv = scores.values();

  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double v = std::abs(sv[i * n + j]);
      if (i < s && j < s) {
        rep.max_abs_token_block = std::max(rep.max_abs_token_block, v);
      } else {
        rep.max_abs_prediction_blocks = std::max(rep.max_abs_prediction_blocks, v);
      }
    }
  for (std::size_t i = s + 1; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      rep.prediction_row_spread = std::max(rep.prediction_row_spread, std::abs(sv[i * n + j] - sv[s * n + j]));

  // Prediction rows recomputed from queries built on position encodings
  // alone (scalar loops, independent of the tensor route above).
  if (rep.position_embedding) {
    const auto wqv = wq.weight.values(), wkv = wk.weight.values();
    std::vector<double> keys(n * d, 0.0);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t c = 0; c < d; ++c) {
        double acc = rep.projection_bias ? wk.bias.values()[c] : 0.0;
        for (std::size_t k = 0; k < d; ++k) acc += x[j * d + k] * wkv[k * d + c];
        keys[j * d + c] = acc;
      }
    for (std::size_t i = s; i < n; ++i) {
      std::vector<double> q(d, 0.0);
      for (std::size_t c = 0; c < d; ++c) {
        double acc = rep.projection_bias ? wq.bias.values()[c] : 0.0;
        for (std::size_t k = 0; k < d; ++k) acc += pe.values()[i * d + k] * wqv[k * d + c];
        q[c] = acc;
      }
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) dot += q[c] * keys[j * d + c];
        rep.posemb_recompute_diff = std::max(rep.posemb_recompute_diff, std::abs(dot - sv[i * n + j]));
      }
    }
  }

  if (rep.max_abs_prediction_blocks == 0.0) {
    rep.verdict = "degenerate (exact zeros)";
  } else if (rep.prediction_row_spread == 0.0) {
    rep.verdict = "degenerate (identical prediction rows)";
  } else if (rep.position_embedding && rep.posemb_recompute_diff < 1e-12) {
    rep.verdict = "degenerate (prediction scores depend on position encoding only)";
  } else {
    rep.verdict = "not degenerate";
  }
  return rep;
}

}  // namespace gbt
