#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <istream>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gbt/tensor.hpp"

namespace gbt::data {

/// Multivariate series as loaded: timestamps in UTC seconds, values
/// row-major (time x variates).
struct RawSeries {
  std::vector<std::int64_t> timestamps;
  std::vector<double> values;
  std::vector<std::string> variate_names;
  std::string target_name;
  std::int64_t frequency_seconds = 0;

  std::size_t length() const { return timestamps.size(); }
  std::size_t variates() const { return variate_names.size(); }
  double at(std::size_t t, std::size_t v) const { return values[t * variates() + v]; }
  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < variate_names.size(); ++i)
      if (variate_names[i] == name) return i;
    std::string known;
    for (const auto& n : variate_names) known += (known.empty() ? "" : ", ") + n;
    throw DataError("column \"" + std::string(name) + "\" not found; available columns: " + known);
  }
  std::size_t target_index() const { return index_of(target_name); }
};

/// "YYYY-MM-DD", "YYYY-MM-DD HH:MM[:SS]" or ISO-8601 with 'T'. UTC seconds.
inline std::int64_t parse_timestamp(std::string_view text) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  std::string buf(text);
  for (char& c : buf)
    if (c == 'T') c = ' ';
  const int n = std::sscanf(buf.c_str(), "%d-%d-%d %d:%d:%d", &y, &mo, &d, &h, &mi, &s);
  if (n != 3 && n != 5 && n != 6) throw DataError("unparsable timestamp \"" + std::string(text) + "\"");
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h < 0 || h > 23 || mi < 0 || mi > 59 || s < 0 || s > 60) {
    throw DataError("invalid calendar timestamp \"" + std::string(text) + "\"");
  }
  return sys_days{ymd}.time_since_epoch().count() * 86400LL + h * 3600LL + mi * 60LL + s;
}

inline std::string format_timestamp(std::int64_t t) {
  using namespace std::chrono;
  const sys_days day{days{t >= 0 ? t / 86400 : (t - 86399) / 86400}};
  const std::int64_t rem = t - day.time_since_epoch().count() * 86400LL;
  const year_month_day ymd{day};
  char out[32];
  std::snprintf(out, sizeof out, "%04d-%02u-%02u %02d:%02d:%02d", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), static_cast<int>(rem / 3600),
                static_cast<int>(rem / 60 % 60), static_cast<int>(rem % 60));
  return out;
}

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    cells.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}
}  // namespace detail

/// Parses the CSV layout: header row, first column "date", numeric rest.
inline RawSeries parse_csv(std::istream& in, const std::string& target_name, const std::string& source = "<stream>") {
  std::string line;
  if (!std::getline(in, line)) throw DataError(source + ": empty file");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
  auto header = detail::split_csv_line(line);
  if (header.size() < 2 || header[0] != "date") {
    throw DataError(source + ": header must start with a \"date\" column followed by numeric columns");
  }
  RawSeries series;
  series.variate_names.assign(header.begin() + 1, header.end());
  series.target_name = target_name;
  series.target_index();  // throws with the available column names
  const std::size_t n_var = series.variates();
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != n_var + 1) {
      throw DataError(source + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                      " cells, expected " + std::to_string(n_var + 1));
    }
    try {
      series.timestamps.push_back(parse_timestamp(cells[0]));
    } catch (const DataError& e) {
      throw DataError(source + ": row " + std::to_string(row) + ", column 1: " + e.what());
    }
    for (std::size_t c = 1; c < cells.size(); ++c) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cells[c], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != cells[c].size() || !std::isfinite(v)) {
        throw DataError(source + ": unparsable or missing value \"" + cells[c] + "\" at row " + std::to_string(row) +
                        ", column " + std::to_string(c + 1) + " (" + header[c] + ")");
      }
      series.values.push_back(v);
    }
  }
  if (series.length() < 2) throw DataError(source + ": need at least two rows");
  series.frequency_seconds = series.timestamps[1] - series.timestamps[0];
  for (std::size_t t = 1; t < series.length(); ++t) {
    const std::int64_t step = series.timestamps[t] - series.timestamps[t - 1];
    if (step <= 0) throw DataError(source + ": timestamps not strictly increasing at row " + std::to_string(t + 2));
    if (step != series.frequency_seconds) {
      throw DataError(source + ": gap or irregular step at row " + std::to_string(t + 2) + " (" + std::to_string(step) +
                      " s vs " + std::to_string(series.frequency_seconds) + " s)");
    }
  }
  return series;
}

inline RawSeries load_csv(const std::string& path, const std::string& target_name) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return parse_csv(in, target_name, path);
}

inline void write_csv(const RawSeries& series, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "date";
  for (const auto& n : series.variate_names) out << ',' << n;
  out << '\n';
  out.precision(17);
  for (std::size_t t = 0; t < series.length(); ++t) {
    out << format_timestamp(series.timestamps[t]);
    for (std::size_t v = 0; v < series.variates(); ++v) out << ',' << series.at(t, v);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Splits

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const IndexRange&) const = default;
};

struct SplitRanges {
  IndexRange train, val, test;
};

struct SplitSpec {
  enum class Mode { Fractional, Monthly };
  Mode mode = Mode::Fractional;
  double train = 0.7, val = 0.1, test = 0.2;
  std::size_t train_months = 12, val_months = 4, test_months = 4;
  std::size_t days_per_month = 30;
};

/// Fractional: floor(n * train), floor(n * val), remainder to test.
/// Monthly: fixed-length months of days_per_month days from the start.
inline SplitRanges split(std::size_t length, std::int64_t frequency_seconds, const SplitSpec& spec) {
  std::size_t n_train = 0, n_val = 0, n_test = 0;
  if (spec.mode == SplitSpec::Mode::Fractional) {
    if (spec.train < 0 || spec.val < 0 || spec.test < 0 || std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9) {
      throw ConfigError("split fractions must be non-negative and sum to 1");
    }
    const double n = static_cast<double>(length);
    n_train = static_cast<std::size_t>(std::floor(n * spec.train + 1e-9));
    n_val = static_cast<std::size_t>(std::floor(n * spec.val + 1e-9));
    n_test = length - n_train - n_val;
  } else {
    if (frequency_seconds <= 0 || 86400 % frequency_seconds != 0) {
      throw ConfigError("monthly split needs a sampling step that divides one day");
    }
    const std::size_t per_month = spec.days_per_month * static_cast<std::size_t>(86400 / frequency_seconds);
    n_train = spec.train_months * per_month;
    n_val = spec.val_months * per_month;
    n_test = spec.test_months * per_month;
    if (n_train + n_val + n_test > length) {
      throw ConfigError("monthly split needs " + std::to_string(n_train + n_val + n_test) + " points, series has " +
                        std::to_string(length));
    }
  }
  if (n_train == 0 || n_val == 0 || n_test == 0) {
    throw ConfigError("empty split (train " + std::to_string(n_train) + ", val " + std::to_string(n_val) + ", test " +
                      std::to_string(n_test) + ")");
  }
  return {{0, n_train}, {n_train, n_train + n_val}, {n_train + n_val, n_train + n_val + n_test}};
}

// ---------------------------------------------------------------------------
// Standardization

struct StandardizeStats {
  std::vector<double> mean;
  std::vector<double> std;  // population convention
};

/// Per-variate mean/std over rows [train.begin, train.end) of a row-major matrix.
inline StandardizeStats fit_standardize(const std::vector<double>& values, std::size_t variates, IndexRange train,
                                        const std::vector<std::string>& names = {}) {
  if (train.size() == 0) throw DataError("fit_standardize: empty training range");
  StandardizeStats st{std::vector<double>(variates, 0.0), std::vector<double>(variates, 0.0)};
  const double n = static_cast<double>(train.size());
  for (std::size_t t = train.begin; t < train.end; ++t)
    for (std::size_t v = 0; v < variates; ++v) st.mean[v] += values[t * variates + v];
  for (double& m : st.mean) m /= n;
  for (std::size_t t = train.begin; t < train.end; ++t)
    for (std::size_t v = 0; v < variates; ++v) {
      const double d = values[t * variates + v] - st.mean[v];
      st.std[v] += d * d;
    }
  for (std::size_t v = 0; v < variates; ++v) {
    st.std[v] = std::sqrt(st.std[v] / n);
    if (!(st.std[v] > 0.0)) {
      throw DataError("zero-variance variate " + (v < names.size() ? "\"" + names[v] + "\"" : std::to_string(v)) +
                      " cannot be standardized");
    }
  }
  return st;
}

inline StandardizeStats fit_standardize(const RawSeries& s, IndexRange train) {
  return fit_standardize(s.values, s.variates(), train, s.variate_names);
}

inline std::vector<double> apply_standardize(const std::vector<double>& values, const StandardizeStats& st) {
  const std::size_t nv = st.mean.size();
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - st.mean[i % nv]) / st.std[i % nv];
  return out;
}

inline std::vector<double> invert_standardize(const std::vector<double>& values, const StandardizeStats& st) {
  const std::size_t nv = st.mean.size();
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i] * st.std[i % nv] + st.mean[i % nv];
  return out;
}

// ---------------------------------------------------------------------------
// Calendar features

inline constexpr std::size_t kTimeFeatures = 4;

/// Hour of day, day of week, day of month, day of year, each scaled to [-0.5, 0.5].
inline std::array<double, kTimeFeatures> time_features(std::int64_t t) {
  using namespace std::chrono;
  const sys_days day{days{t >= 0 ? t / 86400 : (t - 86399) / 86400}};
  const std::int64_t secs = t - day.time_since_epoch().count() * 86400LL;
  const year_month_day ymd{day};
  const weekday wd{day};
  const auto yday = (day - sys_days{ymd.year() / January / 1}).count();
  const double monday_based = static_cast<double>((wd.c_encoding() + 6) % 7);
  return {static_cast<double>(secs / 3600) / 23.0 - 0.5, monday_based / 6.0 - 0.5,
          (static_cast<double>(static_cast<unsigned>(ymd.day())) - 1.0) / 30.0 - 0.5,
          static_cast<double>(yday) / 365.0 - 0.5};
}

// ---------------------------------------------------------------------------
// Windows

/// Stride-1 enumeration of (input, target) windows over one split. Window i
/// reads input rows [first_input + i, first_input + i + input_len) and target
/// rows immediately after.
struct WindowIndex {
  std::size_t first_input = 0;
  std::size_t count = 0;
  std::size_t input_len = 0;
  std::size_t horizon = 0;

  IndexRange input_rows(std::size_t i) const { return {first_input + i, first_input + i + input_len}; }
  IndexRange target_rows(std::size_t i) const {
    return {first_input + i + input_len, first_input + i + input_len + horizon};
  }
};

/// Without bridging, windows lie entirely inside `range`. With bridging
/// (val/test), inputs may start before range.begin but targets never do.
inline WindowIndex make_windows(IndexRange range, std::size_t input_len, std::size_t horizon, bool bridge_context) {
  if (input_len == 0 || horizon == 0) throw ConfigError("input length and horizon must be positive");
  WindowIndex w{0, 0, input_len, horizon};
  if (bridge_context) {
    if (range.begin < input_len) {
      throw ConfigError("split starting at row " + std::to_string(range.begin) + " cannot bridge " +
                        std::to_string(input_len) + " rows of context");
    }
    if (horizon > range.size()) {
      throw ConfigError("horizon " + std::to_string(horizon) + " too long for split of length " +
                        std::to_string(range.size()));
    }
    w.first_input = range.begin - input_len;
    w.count = range.size() - horizon + 1;
  } else {
    if (input_len + horizon > range.size()) {
      throw ConfigError("input " + std::to_string(input_len) + " + horizon " + std::to_string(horizon) +
                        " too long for split of length " + std::to_string(range.size()));
    }
    w.first_input = range.begin;
    w.count = range.size() - (input_len + horizon) + 1;
  }
  return w;
}

enum class Task { Univariate, Multivariate };
enum class ChannelMode { Independent, Relevant };
enum class Split { Train, Val, Test };

struct Batch {
  Tensor input;        // (B, input_len, C)
  Tensor input_time;   // (B, input_len, F)
  Tensor target;       // (B, horizon, C)
  Tensor target_time;  // (B, horizon, F)
  std::vector<std::size_t> variates;  // (B * C) source variate of each model channel
};

/// Standardized series, split boundaries and window indices ready for training.
class SeriesDataset {
 public:
  struct Options {
    std::size_t input_len = 96;
    std::size_t horizon = 96;
    Task task = Task::Univariate;
    ChannelMode channel_mode = ChannelMode::Independent;
    /// Left-replicate each input window up to this length (0 = off).
    std::size_t pad_input_to = 0;
  };

  SeriesDataset(const RawSeries& raw, const SplitSpec& split_spec, const Options& opt) : opt_(opt) {
    ranges_ = split(raw.length(), raw.frequency_seconds, split_spec);
    if (opt.task == Task::Univariate) {
      selected_ = {raw.target_index()};
    } else {
      for (std::size_t v = 0; v < raw.variates(); ++v) selected_.push_back(v);
    }
    for (std::size_t v : selected_) names_.push_back(raw.variate_names[v]);
    const std::size_t nv = selected_.size();
    std::vector<double> picked(raw.length() * nv);
    for (std::size_t t = 0; t < raw.length(); ++t)
      for (std::size_t k = 0; k < nv; ++k) picked[t * nv + k] = raw.at(t, selected_[k]);
    stats_ = fit_standardize(picked, nv, ranges_.train, names_);
    values_ = apply_standardize(picked, stats_);
    time_.resize(raw.length() * kTimeFeatures);
    for (std::size_t t = 0; t < raw.length(); ++t) {
      const auto f = time_features(raw.timestamps[t]);
      std::copy(f.begin(), f.end(), time_.begin() + static_cast<std::ptrdiff_t>(t * kTimeFeatures));
    }
    if (opt.pad_input_to != 0 && opt.pad_input_to < opt.input_len) {
      throw ConfigError("pad_input_to must be >= input_len");
    }
    windows_[0] = make_windows(ranges_.train, opt.input_len, opt.horizon, false);
    windows_[1] = make_windows(ranges_.val, opt.input_len, opt.horizon, true);
    windows_[2] = make_windows(ranges_.test, opt.input_len, opt.horizon, true);
  }

  const Options& options() const { return opt_; }
  const SplitRanges& ranges() const { return ranges_; }
  const StandardizeStats& stats() const { return stats_; }
  const std::vector<double>& standardized() const { return values_; }
  const std::vector<std::string>& variate_names() const { return names_; }
  std::size_t variates() const { return selected_.size(); }
  /// Channels the model sees per sample.
  std::size_t model_channels() const {
    return opt_.channel_mode == ChannelMode::Relevant ? variates() : 1;
  }
  std::size_t model_input_len() const { return opt_.pad_input_to ? opt_.pad_input_to : opt_.input_len; }
  const WindowIndex& windows(Split s) const { return windows_[static_cast<int>(s)]; }
  /// Samples per split: windows x (variates when channels are independent instances).
  std::size_t sample_count(Split s) const { return windows(s).count * (variates() / model_channels()); }

  Batch batch(Split s, std::span<const std::size_t> samples) const {
    const WindowIndex& w = windows(s);
    const std::size_t c = model_channels(), per_window = variates() / c, nv = variates();
    const std::size_t b = samples.size(), lin = model_input_len(), pad = lin - opt_.input_len, h = opt_.horizon;
    std::vector<double> x(b * lin * c), xt(b * lin * kTimeFeatures), y(b * h * c), yt(b * h * kTimeFeatures);
    std::vector<std::size_t> vars(b * c);
    for (std::size_t i = 0; i < b; ++i) {
      const std::size_t win = samples[i] / per_window, sub = samples[i] % per_window;
      if (win >= w.count) throw DimensionError("window " + std::to_string(win) + " out of range");
      for (std::size_t k = 0; k < c; ++k) vars[i * c + k] = c == 1 ? (per_window == 1 ? 0 : sub) : k;
      const IndexRange in = w.input_rows(win), out = w.target_rows(win);
      for (std::size_t t = 0; t < lin; ++t) {
        const std::size_t row = in.begin + (t < pad ? 0 : t - pad);
        for (std::size_t k = 0; k < c; ++k) x[(i * lin + t) * c + k] = values_[row * nv + vars[i * c + k]];
        for (std::size_t f = 0; f < kTimeFeatures; ++f)
          xt[(i * lin + t) * kTimeFeatures + f] = time_[row * kTimeFeatures + f];
      }
      for (std::size_t t = 0; t < h; ++t) {
        const std::size_t row = out.begin + t;
        for (std::size_t k = 0; k < c; ++k) y[(i * h + t) * c + k] = values_[row * nv + vars[i * c + k]];
        for (std::size_t f = 0; f < kTimeFeatures; ++f)
          yt[(i * h + t) * kTimeFeatures + f] = time_[row * kTimeFeatures + f];
      }
    }
    return {Tensor::from_vector({b, lin, c}, std::move(x)), Tensor::from_vector({b, lin, kTimeFeatures}, std::move(xt)),
            Tensor::from_vector({b, h, c}, std::move(y)), Tensor::from_vector({b, h, kTimeFeatures}, std::move(yt)),
            std::move(vars)};
  }

 private:
  Options opt_;
  SplitRanges ranges_;
  std::vector<std::size_t> selected_;
  std::vector<std::string> names_;
  StandardizeStats stats_;
  std::vector<double> values_;
  std::vector<double> time_;
  std::array<WindowIndex, 3> windows_{};
};

// ---------------------------------------------------------------------------
// Synthetic non-stationary benchmark

struct SyntheticSpec {
  std::size_t length = 2400;
  std::size_t variates = 1;
  double trend_per_step = 0.002;
  double daily_amplitude = 1.0;
  double weekly_amplitude = 0.5;
  std::size_t level_shifts = 6;
  double shift_scale = 1.5;
  double noise = 0.1;
  double noise_persistence = 0.7;
  std::uint64_t seed = 4321;
  std::int64_t start = 1467331200;  // 2016-07-01 00:00:00 UTC
  std::int64_t frequency_seconds = 3600;
};

/// Hash of names, timestamps and values; identifies a dataset in run manifests.
inline std::uint64_t series_digest(const RawSeries& s) {
  std::string bytes = s.target_name;
  for (const auto& n : s.variate_names) bytes += '\0' + n;
  bytes.append(reinterpret_cast<const char*>(s.timestamps.data()), s.timestamps.size() * sizeof(std::int64_t));
  bytes.append(reinterpret_cast<const char*>(s.values.data()), s.values.size() * sizeof(double));
  return static_cast<std::uint64_t>(std::hash<std::string_view>{}(bytes));
}

/// Trend + daily/weekly seasonality + random level shifts + AR(1) noise.
/// The last variate is named "OT" and used as the target.
inline RawSeries make_synthetic(const SyntheticSpec& spec) {
  if (spec.length < 2 || spec.variates == 0) throw ConfigError("synthetic series needs length >= 2 and >= 1 variate");
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> when(1, spec.length - 1);
  RawSeries s;
  s.frequency_seconds = spec.frequency_seconds;
  for (std::size_t t = 0; t < spec.length; ++t) s.timestamps.push_back(spec.start + static_cast<std::int64_t>(t) * spec.frequency_seconds);
  for (std::size_t v = 0; v + 1 < spec.variates; ++v) s.variate_names.push_back("V" + std::to_string(v + 1));
  s.variate_names.push_back("OT");
  s.target_name = "OT";
  s.values.assign(spec.length * spec.variates, 0.0);
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t v = 0; v < spec.variates; ++v) {
    std::vector<std::pair<std::size_t, double>> shifts;
    for (std::size_t k = 0; k < spec.level_shifts; ++k) shifts.emplace_back(when(rng), spec.shift_scale * gauss(rng));
    const double phase = two_pi * static_cast<double>(v) / static_cast<double>(spec.variates);
    const double slope = spec.trend_per_step * (1.0 + 0.5 * gauss(rng));
    double ar = 0.0;
    for (std::size_t t = 0; t < spec.length; ++t) {
      const double tt = static_cast<double>(t);
      double level = 0.0;
      for (const auto& [at, mag] : shifts)
        if (t >= at) level += mag;
      ar = spec.noise_persistence * ar + spec.noise * gauss(rng);
      s.values[t * spec.variates + v] = slope * tt + spec.daily_amplitude * std::sin(two_pi * tt / 24.0 + phase) +
                                        spec.weekly_amplitude * std::sin(two_pi * tt / 168.0 + phase) + level + ar;
    }
  }
  return s;
}

}  // namespace gbt::data
