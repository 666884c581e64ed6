#pragma once

// Forecast metrics, the per-step error curve, and multi-run statistics.
// Standard deviations use the population convention (divide by n).

#include <cmath>
#include <cstdio>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "gbt/errors.hpp"

namespace gbt {

namespace detail {
inline void check_pair(std::span<const double> pred, std::span<const double> truth, const char* what) {
  if (pred.size() != truth.size()) {
    throw DimensionError(std::string(what) + ": prediction has " + std::to_string(pred.size()) + " values, truth has " +
                         std::to_string(truth.size()));
  }
  if (pred.empty()) throw DimensionError(std::string(what) + ": no values to score");
}
}  // namespace detail

inline double mse(std::span<const double> pred, std::span<const double> truth) {
  detail::check_pair(pred, truth, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return s / static_cast<double>(pred.size());
}

inline double mae(std::span<const double> pred, std::span<const double> truth) {
  detail::check_pair(pred, truth, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - truth[i]);
  return s / static_cast<double>(pred.size());
}

/// curve[t] = mean squared error at step t over all windows and channels.
/// Values are laid out (window, step, channel).
inline std::vector<double> mse_t(std::span<const double> pred, std::span<const double> truth, std::size_t horizon,
                                 std::size_t channels = 1) {
  detail::check_pair(pred, truth, "mse_t");
  if (horizon == 0 || channels == 0 || pred.size() % (horizon * channels) != 0) {
    throw DimensionError("mse_t: " + std::to_string(pred.size()) + " values do not tile horizon " +
                         std::to_string(horizon) + " x " + std::to_string(channels) + " channels");
  }
  const std::size_t windows = pred.size() / (horizon * channels);
  std::vector<double> curve(horizon, 0.0);
  for (std::size_t w = 0; w < windows; ++w)
    for (std::size_t t = 0; t < horizon; ++t)
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t i = (w * horizon + t) * channels + c;
        curve[t] += (pred[i] - truth[i]) * (pred[i] - truth[i]);
      }
  for (double& v : curve) v /= static_cast<double>(windows * channels);
  return curve;
}

struct EvalReport {
  std::string split;
  std::size_t windows = 0;
  std::size_t horizon = 0;
  std::size_t channels = 0;
  double mse = 0.0;
  double mae = 0.0;
  /// Same metrics after inverting the standardization.
  double mse_raw = 0.0;
  double mae_raw = 0.0;
  std::vector<double> curve;
};

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_metrics_csv(const std::string& path, const std::vector<EvalReport>& reports) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "split,scale,windows,horizon,mse,mae\n";
  for (const auto& r : reports) {
    out << r.split << ",standardized," << r.windows << ',' << r.horizon << ',' << format_double(r.mse) << ','
        << format_double(r.mae) << '\n';
    out << r.split << ",original," << r.windows << ',' << r.horizon << ',' << format_double(r.mse_raw) << ','
        << format_double(r.mae_raw) << '\n';
  }
}

inline void write_mse_t_csv(const std::string& path, const std::vector<double>& curve) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "t,mse_t\n";
  for (std::size_t t = 0; t < curve.size(); ++t) out << t << ',' << format_double(curve[t]) << '\n';
}

struct MetricStats {
  double mean = 0.0;
  double std = 0.0;  // population
};

inline MetricStats summarize(std::span<const double> samples) {
  if (samples.empty()) throw DimensionError("summarize: no samples");
  // Shifted by the first sample so identical inputs give exactly 0 spread.
  const double n = static_cast<double>(samples.size()), x0 = samples.front();
  double shift = 0.0;
  for (double v : samples) shift += v - x0;
  shift /= n;
  double var = 0.0;
  for (double v : samples) var += (v - x0 - shift) * (v - x0 - shift);
  MetricStats s;
  s.mean = x0 + shift;
  s.std = std::sqrt(var / n);
  return s;
}

struct RunOutcome {
  std::uint64_t seed = 0;
  bool ok = false;
  double mse = 0.0;
  double mae = 0.0;
  std::string error;
};

struct RobustnessReport {
  std::size_t requested = 0;
  std::vector<RunOutcome> runs;
  MetricStats mse;
  MetricStats mae;

  std::size_t completed() const {
    std::size_t n = 0;
    for (const auto& r : runs) n += r.ok ? 1 : 0;
    return n;
  }
  bool complete() const { return completed() == requested; }
};

/// Statistics over the successful runs only; a pure function of the run list.
inline RobustnessReport make_robustness_report(std::vector<RunOutcome> runs, std::size_t requested) {
  RobustnessReport rep;
  rep.requested = requested;
  rep.runs = std::move(runs);
  std::vector<double> m, a;
  for (const auto& r : rep.runs)
    if (r.ok) {
      m.push_back(r.mse);
      a.push_back(r.mae);
    }
  if (!m.empty()) {
    rep.mse = summarize(m);
    rep.mae = summarize(a);
  }
  return rep;
}

}  // namespace gbt
