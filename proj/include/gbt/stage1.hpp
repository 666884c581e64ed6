#pragma once

// Auto-Regression stage: embedding, pyramid of AR Blocks (feed-forward-free
// encoder layer + ConvBlock), flatten-and-concatenate fusion and an FC head
// that emits the whole horizon at once.

#include <cstdint>
#include <string>
#include <vector>

#include "gbt/attention.hpp"
#include "gbt/data.hpp"

namespace gbt {

struct StageOneConfig {
  enum class Downsample { Subsample, AvgPool };

  std::size_t input_len = 96;
  std::size_t horizon = 96;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t model_dim = 32;
  std::size_t heads = 4;
  std::size_t ar_blocks = 3;
  std::size_t pyramids = 3;
  std::size_t kernel_size = 3;
  double dropout = 0.1;
  bool convblock = true;
  bool pyramid = true;
  bool time_features = true;
  Downsample downsample = Downsample::Subsample;

  std::size_t branch_count() const { return pyramid ? pyramids : 1; }
  /// (length, dim) of branch p's terminal feature map.
  std::pair<std::size_t, std::size_t> terminal_shape(std::size_t p) const {
    std::size_t len = (input_len + (std::size_t{1} << p) - 1) >> p;
    std::size_t dim = model_dim;
    if (convblock) {
      for (std::size_t b = 0; b < ar_blocks - p; ++b) {
        len = (len + 1) / 2;
        dim *= 2;
      }
    }
    return {len, dim};
  }
  std::size_t feature_size() const {
    std::size_t n = 0;
    for (std::size_t p = 0; p < branch_count(); ++p) {
      const auto [l, d] = terminal_shape(p);
      n += l * d;
    }
    return n;
  }

  void validate() const {
    if (ar_blocks == 0) throw ConfigError("stage 1 needs at least one AR Block");
    if (pyramid && (pyramids == 0 || pyramids > ar_blocks)) {
      throw ConfigError("pyramid count must lie in [1, ar_blocks]");
    }
    if (kernel_size % 2 == 0) throw ConfigError("ConvBlock kernel size must be odd");
    if (in_channels == 0 || out_channels == 0 || horizon == 0) throw ConfigError("channels and horizon must be positive");
    const std::size_t need = convblock ? (std::size_t{1} << ar_blocks) : (std::size_t{1} << (branch_count() - 1));
    if (input_len % need != 0) {
      throw ConfigError("input length " + std::to_string(input_len) + " must be divisible by " + std::to_string(need) +
                        " for this pyramid; set model.pad_input_to or reduce ar_blocks");
    }
    AttentionConfig{model_dim, heads, dropout}.validate();
  }
};

/// Value projection + sinusoidal position + linear calendar encoding.
struct DataEmbedding {
  DataEmbedding() = default;
  DataEmbedding(std::size_t channels, std::size_t d, bool use_time, std::mt19937_64& rng)
      : dim(d), value(channels, d, false, rng), with_time(use_time) {
    if (use_time) time = Linear(data::kTimeFeatures, d, false, rng);
  }

  /// x: (B, L, C), time: (B, L, F) -> (B, L, d)
  Tensor forward(const Tensor& x, const Tensor& time_feats, double p, Context& ctx) const {
    if (x.rank() != 3 || x.size(2) != value.in_features) {
      throw DimensionError("embedding expects (batch, L, " + std::to_string(value.in_features) + "), got " +
                           shape_str(x.shape()));
    }
    Tensor e = add(value.forward(x), sinusoidal_positions(x.size(1), dim));
    if (with_time && time_feats.defined()) e = add(e, time.forward(time_feats));
    return dropout(e, p, ctx.training, ctx.rng);
  }
  void collect(ParameterSet& ps, const std::string& prefix) const {
    value.collect(ps, prefix + "value.");
    if (with_time) time.collect(ps, prefix + "time.");
  }

  std::size_t dim = 0;
  Linear value;
  Linear time;
  bool with_time = false;
};

/// Conv1d with weight normalization and bias; operates on (B, C, L).
struct WeightNormConv1d {
  WeightNormConv1d() = default;
  WeightNormConv1d(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride_, std::mt19937_64& rng)
      : stride(stride_), padding(k / 2) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k));
    raw = uniform_parameter({cout, cin, k}, bound, rng);
    bias = uniform_parameter({cout}, bound, rng);
    std::vector<double> g(cout);
    const auto rv = raw.values();
    for (std::size_t c = 0; c < cout; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < cin * k; ++i) s += rv[c * cin * k + i] * rv[c * cin * k + i];
      g[c] = std::sqrt(s);
    }
    gain = Tensor::from_vector({cout}, std::move(g), true);
  }
  Tensor forward(const Tensor& x) const {
    const std::size_t cout = raw.size(0);
    return add(conv1d(x, weight_norm_apply(raw, gain), stride, padding), reshape(bias, {cout, 1}));
  }
  void collect(ParameterSet& ps, const std::string& prefix) const {
    ps.add(prefix + "raw", raw);
    ps.add(prefix + "gain", gain);
    ps.add(prefix + "bias", bias);
  }
  std::size_t stride = 1, padding = 0;
  Tensor raw, gain, bias;
};

/// Pointwise (kernel 1) convolution used for residual shape matching.
struct PointwiseConv1d {
  PointwiseConv1d() = default;
  PointwiseConv1d(std::size_t cin, std::size_t cout, std::size_t stride_, std::mt19937_64& rng) : stride(stride_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin));
    weight = uniform_parameter({cout, cin, 1}, bound, rng);
    bias = uniform_parameter({cout}, bound, rng);
  }
  Tensor forward(const Tensor& x) const {
    return add(conv1d(x, weight, stride, 0), reshape(bias, {weight.size(0), 1}));
  }
  void collect(ParameterSet& ps, const std::string& prefix) const {
    ps.add(prefix + "weight", weight);
    ps.add(prefix + "bias", bias);
  }
  std::size_t stride = 1;
  Tensor weight, bias;
};

/// Res-P (stride-2 length halving) followed by Res-C (channel doubling), each
/// a weight-normalized Gelu conv plus a pointwise residual path.
/// (B, L, d) -> (B, ceil(L/2), 2d).
struct ConvBlock {
  ConvBlock() = default;
  ConvBlock(std::size_t d, std::size_t k, std::mt19937_64& rng)
      : shrink(d, d, k, 2, rng), shrink_skip(d, d, 2, rng), widen(d, 2 * d, k, 1, rng), widen_skip(d, 2 * d, 1, rng) {}

  Tensor forward(const Tensor& x, double p, Context& ctx) const {
    if (x.rank() != 3 || x.size(1) < 2) {
      throw DimensionError("ConvBlock needs (batch, L >= 2, d), got " + shape_str(x.shape()));
    }
    Tensor xc = permute(x, {0, 2, 1});
    Tensor y = add(gelu(shrink.forward(xc)), shrink_skip.forward(xc));
    Tensor z = add(gelu(widen.forward(y)), widen_skip.forward(y));
    return dropout(permute(z, {0, 2, 1}), p, ctx.training, ctx.rng);
  }
  void collect(ParameterSet& ps, const std::string& prefix) const {
    shrink.collect(ps, prefix + "res_p.conv.");
    shrink_skip.collect(ps, prefix + "res_p.skip.");
    widen.collect(ps, prefix + "res_c.conv.");
    widen_skip.collect(ps, prefix + "res_c.skip.");
  }

  WeightNormConv1d shrink;
  PointwiseConv1d shrink_skip;
  WeightNormConv1d widen;
  PointwiseConv1d widen_skip;
};

/// Encoder layer without feed-forward (attention + residual + post-norm),
/// followed by a ConvBlock, or by a residual feed-forward sublayer when
/// ConvBlocks are ablated.
struct ARBlock {
  ARBlock() = default;
  ARBlock(std::size_t d, std::size_t heads, std::size_t k, double p, bool use_conv, std::mt19937_64& rng)
      : attention(AttentionConfig{d, heads, p, false, false}, rng), norm(d), with_conv(use_conv), dropout_p(p) {
    if (with_conv) {
      conv = ConvBlock(d, k, rng);
    } else {
      ff = FeedForward(d, 4 * d, rng);
      ff_norm = LayerNorm(d);
    }
  }

  Tensor forward(const Tensor& x, Context& ctx) const {
    Tensor h = norm.forward(add(x, dropout(attention.self_attention(x, ctx), dropout_p, ctx.training, ctx.rng)));
    if (with_conv) return conv.forward(h, dropout_p, ctx);
    return ff_norm.forward(add(h, dropout(ff.forward(h, dropout_p, ctx), dropout_p, ctx.training, ctx.rng)));
  }
  void collect(ParameterSet& ps, const std::string& prefix) const {
    attention.collect(ps, prefix + "attention.");
    norm.collect(ps, prefix + "norm.");
    if (with_conv) {
      conv.collect(ps, prefix + "convblock.");
    } else {
      ff.collect(ps, prefix + "ff.");
      ff_norm.collect(ps, prefix + "ff_norm.");
    }
  }

  MultiHeadAttention attention;
  LayerNorm norm;
  bool with_conv = true;
  double dropout_p = 0.0;
  ConvBlock conv;
  FeedForward ff;
  LayerNorm ff_norm;
};

class StageOneModel {
 public:
  StageOneModel() = default;
  StageOneModel(const StageOneConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    embedding_ = DataEmbedding(cfg_.in_channels, cfg_.model_dim, cfg_.time_features, rng);
    for (std::size_t p = 0; p < cfg_.branch_count(); ++p) {
      std::vector<ARBlock> blocks;
      std::size_t d = cfg_.model_dim;
      for (std::size_t b = 0; b < cfg_.ar_blocks - p; ++b) {
        blocks.emplace_back(d, cfg_.heads, cfg_.kernel_size, cfg_.dropout, cfg_.convblock, rng);
        if (cfg_.convblock) d *= 2;
      }
      branches_.push_back(std::move(blocks));
    }
    head_ = Linear(cfg_.feature_size(), cfg_.horizon * cfg_.out_channels, true, rng);
  }

  const StageOneConfig& config() const { return cfg_; }
  const std::vector<ARBlock>& branch(std::size_t p) const { return branches_.at(p); }

  Tensor embed(const Tensor& x, const Tensor& x_time, Context& ctx) const {
    if (x.rank() != 3 || x.size(1) != cfg_.input_len || x.size(2) != cfg_.in_channels) {
      throw DimensionError("stage 1 expects input (batch, " + std::to_string(cfg_.input_len) + ", " +
                           std::to_string(cfg_.in_channels) + "), got " + shape_str(x.shape()));
    }
    return embedding_.forward(x, x_time, cfg_.dropout, ctx);
  }

  /// Input of branch p: the embedded sequence shortened by 2^p.
  Tensor branch_input(const Tensor& embedded, std::size_t p) const {
    if (p == 0) return embedded;
    const std::size_t stride = std::size_t{1} << p, len = embedded.size(1);
    if (cfg_.downsample == StageOneConfig::Downsample::Subsample) return slice(embedded, 1, 0, len, stride);
    Tensor acc = slice(embedded, 1, 0, len, stride);
    for (std::size_t o = 1; o < stride; ++o) acc = add(acc, slice(embedded, 1, o, len, stride));
    return scale(acc, 1.0 / static_cast<double>(stride));
  }

  /// Terminal feature map of every branch, (B, L_p, d_p).
  std::vector<Tensor> terminal_maps(const Tensor& embedded, Context& ctx) const {
    std::vector<Tensor> out;
    for (std::size_t p = 0; p < branches_.size(); ++p) {
      Tensor h = branch_input(embedded, p);
      for (const ARBlock& block : branches_[p]) h = block.forward(h, ctx);
      out.push_back(h);
    }
    return out;
  }

  /// Flattened, concatenated pyramid features (B, feature_size).
  Tensor features(const Tensor& x, const Tensor& x_time, Context& ctx) const {
    const auto maps = terminal_maps(embed(x, x_time, ctx), ctx);
    std::vector<Tensor> flat;
    for (const Tensor& m : maps) flat.push_back(reshape(m, {m.size(0), m.size(1) * m.size(2)}));
    return flat.size() == 1 ? flat.front() : concat(flat, 1);
  }

  /// The Good Beginning: (B, horizon, out_channels).
  Tensor predict(const Tensor& x, const Tensor& x_time, Context& ctx) const {
    Tensor f = features(x, x_time, ctx);
    return reshape(head_.forward(f), {f.size(0), cfg_.horizon, cfg_.out_channels});
  }

  void zero_init_head() { head_.zero_init(); }

  ParameterSet parameters() const {
    ParameterSet ps;
    embedding_.collect(ps, "embedding.");
    for (std::size_t p = 0; p < branches_.size(); ++p)
      for (std::size_t b = 0; b < branches_[p].size(); ++b)
        branches_[p][b].collect(ps, "branch" + std::to_string(p) + ".block" + std::to_string(b) + ".");
    head_.collect(ps, "head.");
    return ps;
  }

  ParameterSet branch_parameters(std::size_t p) const {
    ParameterSet ps;
    for (std::size_t b = 0; b < branches_.at(p).size(); ++b) branches_[p][b].collect(ps, "block" + std::to_string(b) + ".");
    return ps;
  }

 private:
  StageOneConfig cfg_;
  DataEmbedding embedding_;
  std::vector<std::vector<ARBlock>> branches_;
  Linear head_;
};

}  // namespace gbt
