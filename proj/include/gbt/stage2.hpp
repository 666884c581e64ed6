#pragma once

// Self-Regression stage: embeds the Good Beginning and refines it through
// masked self-attention decoder layers (with ESM) and a linear head.
// Ablation paths: start-token prefix and cross-attention to an auxiliary
// stage-1-shaped encoder.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gbt/stage1.hpp"

namespace gbt {

struct StageTwoConfig {
  std::size_t input_len = 96;
  std::size_t horizon = 96;
  std::size_t channels = 1;
  std::size_t model_dim = 512;
  std::size_t heads = 8;
  std::size_t layers = 2;
  std::size_t ff_mult = 4;
  double dropout = 0.1;
  bool esm = true;
  EsmKernel esm_kernel = EsmKernel::Pdf;
  bool esm_per_head = false;
  bool time_features = true;
  /// Output = Good Beginning + head(decoder); the head starts at zero so the
  /// untrained stage reproduces its input.
  bool residual = true;
  bool zero_init_head = true;
  /// Embed values relative to the first decoder position (level-free input).
  bool anchor = false;
  bool start_token = false;
  std::size_t start_token_len = 0;  // 0 picks input_len / 2
  bool cross_attention = false;
  StageOneConfig aux;  // auxiliary encoder for cross-attention

  std::size_t token_len() const { return start_token ? (start_token_len ? start_token_len : input_len / 2) : 0; }

  AttentionConfig self_attention() const {
    return {model_dim, heads, dropout, true, esm, esm_kernel, esm_per_head};
  }

  void validate() const {
    if (horizon == 0 || channels == 0) throw ConfigError("stage 2 needs positive horizon and channels");
    self_attention().validate();
    if (start_token && token_len() >= input_len) {
      throw ConfigError("start token length " + std::to_string(token_len()) + " must be < input length " +
                        std::to_string(input_len));
    }
    if (cross_attention) aux.validate();
  }
};

/// Masked self-attention + post-norm, optional pre-norm cross-attention
/// residual, Gelu feed-forward + post-norm. Preserves (L, d).
struct DecoderLayer {
  DecoderLayer() = default;
  DecoderLayer(const StageTwoConfig& cfg, std::mt19937_64& rng)
      : self_attn(cfg.self_attention(), rng),
        norm1(cfg.model_dim),
        ff(cfg.model_dim, cfg.ff_mult * cfg.model_dim, rng),
        norm2(cfg.model_dim),
        dropout_p(cfg.dropout),
        with_cross(cfg.cross_attention) {
    if (with_cross) {
      cross_attn = MultiHeadAttention(AttentionConfig{cfg.model_dim, cfg.heads, cfg.dropout, false, false}, rng);
      cross_attn.output.zero_init();
      cross_norm = LayerNorm(cfg.model_dim);
    }
  }

  Tensor forward(const Tensor& x, const Tensor* memory, Context& ctx) const {
    Tensor h = norm1.forward(add(x, dropout(self_attn.self_attention(x, ctx), dropout_p, ctx.training, ctx.rng)));
    if (with_cross) {
      if (memory == nullptr || !memory->defined()) throw UsageError("cross-attention layer needs encoder memory");
      h = add(h, dropout(cross_attn.forward(cross_norm.forward(h), *memory, ctx), dropout_p, ctx.training, ctx.rng));
    }
    return norm2.forward(add(h, dropout(ff.forward(h, dropout_p, ctx), dropout_p, ctx.training, ctx.rng)));
  }

  void collect(ParameterSet& ps, const std::string& prefix) const {
    self_attn.collect(ps, prefix + "self_attention.");
    norm1.collect(ps, prefix + "norm1.");
    if (with_cross) {
      cross_attn.collect(ps, prefix + "cross_attention.");
      cross_norm.collect(ps, prefix + "cross_norm.");
    }
    ff.collect(ps, prefix + "ff.");
    norm2.collect(ps, prefix + "norm2.");
  }

  MultiHeadAttention self_attn;
  LayerNorm norm1;
  FeedForward ff;
  LayerNorm norm2;
  double dropout_p = 0.0;
  bool with_cross = false;
  MultiHeadAttention cross_attn;
  LayerNorm cross_norm;
};

class StageTwoModel {
 public:
  StageTwoModel() = default;
  StageTwoModel(const StageTwoConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    embedding_ = DataEmbedding(cfg_.channels, cfg_.model_dim, cfg_.time_features, rng);
    for (std::size_t i = 0; i < cfg_.layers; ++i) layers_.emplace_back(cfg_, rng);
    head_ = Linear(cfg_.model_dim, cfg_.channels, true, rng);
    if (cfg_.zero_init_head) head_.zero_init();
    if (cfg_.cross_attention) {
      aux_ = StageOneModel(cfg_.aux, rng());
      std::size_t len = 0, width = 0;
      for (std::size_t p = 0; p < cfg_.aux.branch_count(); ++p) {
        const auto [l, d] = cfg_.aux.terminal_shape(p);
        if (p > 0 && l != len) {
          throw ConfigError("cross-attention memory needs equal pyramid terminal lengths (ConvBlocks enabled)");
        }
        len = l;
        width += d;
      }
      memory_proj_ = Linear(width, cfg_.model_dim, true, rng);
    }
  }

  const StageTwoConfig& config() const { return cfg_; }

  /// Good Beginning (B, horizon, C) -> refined prediction (B, horizon, C).
  Tensor forward(const Tensor& good_beginning, const Tensor& future_time, Context& ctx) const {
    check_beginning(good_beginning);
    return refine(good_beginning, future_time, good_beginning, 0, nullptr, ctx);
  }

  /// Prefixes the last s input values; emits only the final horizon positions.
  Tensor forward_with_start_token(const Tensor& input_tail, const Tensor& tail_time, const Tensor& good_beginning,
                                  const Tensor& future_time, Context& ctx) const {
    check_beginning(good_beginning);
    const std::size_t s = input_tail.rank() == 3 ? input_tail.size(1) : 0;
    if (input_tail.rank() != 3 || input_tail.size(0) != good_beginning.size(0) || input_tail.size(2) != cfg_.channels) {
      throw DimensionError("start token must be (batch, s, " + std::to_string(cfg_.channels) + "), got " +
                           shape_str(input_tail.shape()));
    }
    if (s >= cfg_.input_len) throw DimensionError("start token length must be < input length");
    if (s == 0) return forward(good_beginning, future_time, ctx);
    Tensor seq = concat({input_tail, good_beginning}, 1);
    Tensor times = future_time.defined() && tail_time.defined() ? concat({tail_time, future_time}, 1) : Tensor{};
    return refine(seq, times, good_beginning, s, nullptr, ctx);
  }

  /// Decoder layers also attend to memory (B, Lm, d2).
  Tensor forward_with_cross(const Tensor& memory, const Tensor& good_beginning, const Tensor& future_time,
                            Context& ctx) const {
    if (!cfg_.cross_attention) throw UsageError("model was built without cross-attention");
    if (memory.rank() != 3 || memory.size(2) != cfg_.model_dim || memory.size(0) != good_beginning.size(0)) {
      throw DimensionError("encoder memory must be (batch, Lm, " + std::to_string(cfg_.model_dim) + "), got " +
                           shape_str(memory.shape()));
    }
    check_beginning(good_beginning);
    return refine(good_beginning, future_time, good_beginning, 0, &memory, ctx);
  }

  /// Memory from the raw input window via the auxiliary stage-1-shaped encoder.
  Tensor encode_memory(const Tensor& x, const Tensor& x_time, Context& ctx) const {
    if (!cfg_.cross_attention) throw UsageError("model was built without cross-attention");
    const auto maps = aux_.terminal_maps(aux_.embed(x, x_time, ctx), ctx);
    return memory_proj_.forward(maps.size() == 1 ? maps.front() : concat(maps, 2));
  }

  /// Full decoder output over every internal position, before slicing and
  /// residual addition; (B, L, C).
  Tensor decode(const Tensor& seq, const Tensor& times, const Tensor* memory, Context& ctx) const {
    const Tensor values = cfg_.anchor ? sub(seq, slice(seq, 1, 0, 1)) : seq;
    Tensor h = embedding_.forward(values, times, cfg_.dropout, ctx);
    for (const DecoderLayer& layer : layers_) h = layer.forward(h, memory, ctx);
    return head_.forward(h);
  }

  ParameterSet parameters() const {
    ParameterSet ps;
    embedding_.collect(ps, "embedding.");
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(ps, "layer" + std::to_string(i) + ".");
    head_.collect(ps, "head.");
    if (cfg_.cross_attention) {
      ps.append(aux_.parameters(), "cross_aux.");
      memory_proj_.collect(ps, "cross_memory.");
    }
    return ps;
  }

  Linear& head() { return head_; }
  const std::vector<DecoderLayer>& layers() const { return layers_; }

 private:
  void check_beginning(const Tensor& gb) const {
    if (gb.rank() != 3 || gb.size(1) != cfg_.horizon || gb.size(2) != cfg_.channels) {
      throw DimensionError("Good Beginning must be (batch, " + std::to_string(cfg_.horizon) + ", " +
                           std::to_string(cfg_.channels) + "), got " + shape_str(gb.shape()));
    }
  }

  Tensor refine(const Tensor& seq, const Tensor& times, const Tensor& gb, std::size_t offset, const Tensor* memory,
                Context& ctx) const {
    Tensor out = decode(seq, cfg_.time_features ? times : Tensor{}, memory, ctx);
    if (offset > 0) out = slice(out, 1, offset, offset + cfg_.horizon);
    return cfg_.residual ? add(gb, out) : out;
  }

  StageTwoConfig cfg_;
  DataEmbedding embedding_;
  std::vector<DecoderLayer> layers_;
  Linear head_;
  StageOneModel aux_;
  Linear memory_proj_;
};

}  // namespace gbt
