#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gbt/ops.hpp"

namespace gbt {

/// Per-session mutable state: the dropout stream and the train/eval switch.
struct Context {
  explicit Context(std::uint64_t seed, bool training_mode = false) : rng(seed), training(training_mode) {}
  std::mt19937_64 rng;
  bool training;
};

/// Ordered, named collection of parameter tensors. Entries share storage
/// with the owning modules.
class ParameterSet {
 public:
  void add(std::string name, Tensor t) { entries_.emplace_back(std::move(name), std::move(t)); }
  void append(const ParameterSet& other, const std::string& prefix = "") {
    for (const auto& [n, t] : other.entries_) add(prefix + n, t);
  }

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.second);
    return out;
  }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.numel();
    return n;
  }
  const Tensor* find(std::string_view name) const {
    for (const auto& e : entries_)
      if (e.first == name) return &e.second;
    return nullptr;
  }

  void set_requires_grad(bool flag) {
    for (auto& e : entries_) e.second.set_requires_grad(flag);
  }
  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

  /// Hash of every name, shape and value byte, in order.
  std::uint64_t digest() const {
    std::string bytes;
    for (const auto& [n, t] : entries_) {
      bytes += n;
      bytes.push_back('\0');
      for (std::size_t d : t.shape()) bytes.append(reinterpret_cast<const char*>(&d), sizeof d);
      const auto v = t.values();
      bytes.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
    }
    return static_cast<std::uint64_t>(std::hash<std::string_view>{}(bytes));
  }

  std::vector<std::vector<double>> snapshot() const {
    std::vector<std::vector<double>> out;
    for (const auto& e : entries_) out.emplace_back(e.second.values().begin(), e.second.values().end());
    return out;
  }
  void restore(const std::vector<std::vector<double>>& snap) {
    if (snap.size() != entries_.size()) throw DimensionError("snapshot has wrong parameter count");
    for (std::size_t i = 0; i < snap.size(); ++i) {
      auto dst = entries_[i].second.mutable_values();
      if (dst.size() != snap[i].size()) throw DimensionError("snapshot size mismatch for " + entries_[i].first);
      std::copy(snap[i].begin(), snap[i].end(), dst.begin());
    }
  }
  /// Copies values for every name present in `source` with a matching shape.
  std::size_t copy_matching_from(const ParameterSet& source) {
    std::size_t copied = 0;
    for (auto& [n, t] : entries_) {
      const Tensor* s = source.find(n);
      if (s && s->shape() == t.shape()) {
        std::copy(s->values().begin(), s->values().end(), t.mutable_values().begin());
        ++copied;
      }
    }
    return copied;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

inline Tensor uniform_parameter(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from_vector(std::move(shape), std::move(v), true);
}

/// y = x W (+ b), W stored (in, out).
struct Linear {
  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool with_bias, std::mt19937_64& rng) : in_features(in), out_features(out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = uniform_parameter({in, out}, bound, rng);
    if (with_bias) bias = uniform_parameter({out}, bound, rng);
  }

  Tensor forward(const Tensor& x) const {
    if (x.size(-1) != in_features) {
      throw DimensionError("Linear expects last dim " + std::to_string(in_features) + ", got " + shape_str(x.shape()));
    }
    Tensor y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
  }
  void zero_init() {
    for (double& w : weight.mutable_values()) w = 0.0;
    if (bias.defined())
      for (double& b : bias.mutable_values()) b = 0.0;
  }
  void collect(ParameterSet& ps, const std::string& prefix) const {
    ps.add(prefix + "weight", weight);
    if (bias.defined()) ps.add(prefix + "bias", bias);
  }

  std::size_t in_features = 0;
  std::size_t out_features = 0;
  Tensor weight;
  Tensor bias;
};

struct LayerNorm {
  LayerNorm() = default;
  explicit LayerNorm(std::size_t d) : gain(Tensor::full({d}, 1.0, true)), bias(Tensor::zeros({d}, true)) {}
  Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias); }
  void collect(ParameterSet& ps, const std::string& prefix) const {
    ps.add(prefix + "gain", gain);
    ps.add(prefix + "bias", bias);
  }
  Tensor gain;
  Tensor bias;
};

/// Two-layer Gelu feed-forward d -> inner -> d.
struct FeedForward {
  FeedForward() = default;
  FeedForward(std::size_t d, std::size_t inner, std::mt19937_64& rng)
      : up(d, inner, true, rng), down(inner, d, true, rng) {}
  Tensor forward(const Tensor& x, double p, Context& ctx) const {
    return down.forward(dropout(gelu(up.forward(x)), p, ctx.training, ctx.rng));
  }
  void collect(ParameterSet& ps, const std::string& prefix) const {
    up.collect(ps, prefix + "up.");
    down.collect(ps, prefix + "down.");
  }
  Linear up;
  Linear down;
};

/// Fixed sinusoidal table (length, d): sin on even, cos on odd features.
inline Tensor sinusoidal_positions(std::size_t length, std::size_t d) {
  std::vector<double> v(length * d);
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * freq;
      v[pos * d + i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  return Tensor::from_vector({length, d}, std::move(v));
}

}  // namespace gbt
