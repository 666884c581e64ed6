#pragma once

// Run configuration: JSON with nested sections mirroring the field names
// below. Unknown keys are rejected so typos surface as validation errors.

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gbt/stage2.hpp"

namespace gbt {

using Json = nlohmann::ordered_json;

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or "csv"
  std::string path;                  // csv path; relative paths resolve against the data root
  std::string target = "OT";
  data::Task task = data::Task::Univariate;
  data::ChannelMode channel_mode = data::ChannelMode::Independent;
  data::SplitSpec split;
  data::SyntheticSpec synthetic;
};

struct ModelConfig {
  std::size_t input_len = 96;
  std::size_t horizon = 96;
  std::size_t pad_input_to = 0;
  // stage 1
  std::size_t d1 = 32;
  std::size_t heads1 = 4;
  std::size_t ar_blocks = 3;
  std::size_t pyramids = 3;
  StageOneConfig::Downsample downsample = StageOneConfig::Downsample::Subsample;
  bool time_features1 = true;
  // stage 2
  std::size_t d2 = 512;
  std::size_t heads2 = 8;
  std::size_t layers = 2;
  std::size_t ff_mult = 4;
  EsmKernel esm_kernel = EsmKernel::Pdf;
  bool esm_per_head = false;
  bool time_features2 = true;
  bool residual = true;
  bool zero_init_head = true;
  bool anchor = false;
  std::size_t start_token_len = 0;
};

struct VariantFlags {
  bool two_stage = true;
  bool first_only = false;
  bool simultaneous = false;
  bool esm = true;
  bool convblock = true;
  bool pyramid = true;
  bool start_token = false;
  bool cross_attention = false;
};

struct TrainOptions {
  std::size_t batch_size = 32;
  double lr = 1e-4;
  /// Initial lr of phase 2 (0 = same as lr).
  double stage2_lr = 0.0;
  double lr_decay = 0.5;
  double dropout = 0.1;
  std::size_t max_epochs = 10;
  std::size_t patience = 3;
  std::uint64_t seed = 4321;
  /// Cap on optimizer steps per epoch (0 = full pass).
  std::size_t max_batches_per_epoch = 0;
  /// Reuse one eval-mode stage-1 pass per sample during phase 2.
  bool cache_stage1 = false;
};

struct TrainConfig {
  DataConfig data;
  ModelConfig model;
  VariantFlags variant;
  TrainOptions train;

  std::size_t model_input_len() const { return model.pad_input_to ? model.pad_input_to : model.input_len; }

  StageOneConfig stage1(std::size_t channels) const {
    StageOneConfig c;
    c.input_len = model_input_len();
    c.horizon = model.horizon;
    c.in_channels = channels;
    c.out_channels = channels;
    c.model_dim = model.d1;
    c.heads = model.heads1;
    c.ar_blocks = model.ar_blocks;
    c.pyramids = model.pyramids;
    c.dropout = train.dropout;
    c.convblock = variant.convblock;
    c.pyramid = variant.pyramid;
    c.time_features = model.time_features1;
    c.downsample = model.downsample;
    return c;
  }

  StageTwoConfig stage2(std::size_t channels) const {
    StageTwoConfig c;
    c.input_len = model_input_len();
    c.horizon = model.horizon;
    c.channels = channels;
    c.model_dim = model.d2;
    c.heads = model.heads2;
    c.layers = model.layers;
    c.ff_mult = model.ff_mult;
    c.dropout = train.dropout;
    c.esm = variant.esm;
    c.esm_kernel = model.esm_kernel;
    c.esm_per_head = model.esm_per_head;
    c.time_features = model.time_features2;
    c.residual = model.residual;
    c.zero_init_head = model.zero_init_head;
    c.anchor = model.anchor;
    c.start_token = variant.start_token;
    c.start_token_len = model.start_token_len;
    c.cross_attention = variant.cross_attention;
    c.aux = stage1(channels);
    return c;
  }

  void validate() const {
    const int modes = int(variant.two_stage) + int(variant.first_only) + int(variant.simultaneous);
    if (modes != 1) {
      throw ConfigError("variant: exactly one of two_stage, first_only, simultaneous must be true (got " +
                        std::to_string(modes) + ")");
    }
    if (data.source != "synthetic" && data.source != "csv") {
      throw ConfigError("data.source must be \"synthetic\" or \"csv\", got \"" + data.source + "\"");
    }
    if (data.source == "csv" && data.path.empty()) throw ConfigError("data.path is required for csv sources");
    if (train.batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (!(train.lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (train.stage2_lr < 0.0) throw ConfigError("train.stage2_lr must be >= 0");
    if (!(train.lr_decay > 0.0 && train.lr_decay <= 1.0)) throw ConfigError("train.lr_decay must lie in (0, 1]");
    if (train.max_epochs == 0) throw ConfigError("train.max_epochs must be positive");
    if (model.pad_input_to != 0 && model.pad_input_to < model.input_len) {
      throw ConfigError("model.pad_input_to must be 0 or >= model.input_len");
    }
    stage1(1).validate();
    if (!variant.first_only) stage2(1).validate();
  }
};

// ---------------------------------------------------------------------------
// JSON mapping

namespace detail {

inline const char* task_name(data::Task t) { return t == data::Task::Univariate ? "univariate" : "multivariate"; }
inline const char* channel_name(data::ChannelMode m) {
  return m == data::ChannelMode::Independent ? "independent" : "relevant";
}
inline const char* kernel_name(EsmKernel k) {
  switch (k) {
    case EsmKernel::Pdf: return "pdf";
    case EsmKernel::LogPdf: return "log_pdf";
    case EsmKernel::Unnormalized: return "unnormalized";
  }
  return "pdf";
}

/// Reads fields of one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [k, v] : j_.items()) {
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end()) {
        throw ConfigError("unknown key " + path_ + "." + k);
      }
    }
  }
  Section(const Section&) = delete;
  Section& operator=(const Section&) = delete;

  template <typename T>
  void get(const char* key, T& out) {
    seen_.emplace_back(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path_ + "." + key + " has the wrong type: " + j_.at(key).dump());
    }
  }
  bool has(const char* key) {
    seen_.emplace_back(key);
    return j_.contains(key);
  }
  const Json& at(const char* key) const { return j_.at(key); }
  std::string path(const char* key) const { return path_ + "." + key; }

 private:
  const Json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

template <typename E>
E parse_enum(const std::string& value, const std::string& where, std::initializer_list<std::pair<const char*, E>> opts) {
  std::string allowed;
  for (const auto& [name, e] : opts) {
    if (value == name) return e;
    allowed += std::string(allowed.empty() ? "" : ", ") + name;
  }
  throw ConfigError(where + ": \"" + value + "\" is not one of {" + allowed + "}");
}

}  // namespace detail

inline TrainConfig config_from_json(const Json& root) {
  TrainConfig c;
  detail::Section top(root, "config");
  if (top.has("data")) {
    detail::Section s(top.at("data"), "data");
    s.get("source", c.data.source);
    s.get("path", c.data.path);
    s.get("target", c.data.target);
    std::string task = detail::task_name(c.data.task), mode = detail::channel_name(c.data.channel_mode);
    s.get("task", task);
    s.get("channel_mode", mode);
    c.data.task = detail::parse_enum<data::Task>(
        task, "data.task", {{"univariate", data::Task::Univariate}, {"multivariate", data::Task::Multivariate}});
    c.data.channel_mode = detail::parse_enum<data::ChannelMode>(
        mode, "data.channel_mode",
        {{"independent", data::ChannelMode::Independent}, {"relevant", data::ChannelMode::Relevant}});
    if (s.has("split")) {
      detail::Section sp(s.at("split"), "data.split");
      std::string kind = c.data.split.mode == data::SplitSpec::Mode::Monthly ? "monthly" : "fractional";
      sp.get("kind", kind);
      c.data.split.mode = detail::parse_enum<data::SplitSpec::Mode>(
          kind, "data.split.kind",
          {{"fractional", data::SplitSpec::Mode::Fractional}, {"monthly", data::SplitSpec::Mode::Monthly}});
      sp.get("train", c.data.split.train);
      sp.get("val", c.data.split.val);
      sp.get("test", c.data.split.test);
      sp.get("train_months", c.data.split.train_months);
      sp.get("val_months", c.data.split.val_months);
      sp.get("test_months", c.data.split.test_months);
      sp.get("days_per_month", c.data.split.days_per_month);
    }
    if (s.has("synthetic")) {
      detail::Section sy(s.at("synthetic"), "data.synthetic");
      auto& y = c.data.synthetic;
      sy.get("length", y.length);
      sy.get("variates", y.variates);
      sy.get("trend_per_step", y.trend_per_step);
      sy.get("daily_amplitude", y.daily_amplitude);
      sy.get("weekly_amplitude", y.weekly_amplitude);
      sy.get("level_shifts", y.level_shifts);
      sy.get("shift_scale", y.shift_scale);
      sy.get("noise", y.noise);
      sy.get("noise_persistence", y.noise_persistence);
      sy.get("seed", y.seed);
    }
  }
  if (top.has("model")) {
    detail::Section s(top.at("model"), "model");
    auto& m = c.model;
    s.get("input_len", m.input_len);
    s.get("horizon", m.horizon);
    s.get("pad_input_to", m.pad_input_to);
    s.get("d1", m.d1);
    s.get("heads1", m.heads1);
    s.get("ar_blocks", m.ar_blocks);
    s.get("pyramids", m.pyramids);
    std::string down = m.downsample == StageOneConfig::Downsample::AvgPool ? "avgpool" : "subsample";
    s.get("downsample", down);
    m.downsample = detail::parse_enum<StageOneConfig::Downsample>(
        down, "model.downsample",
        {{"subsample", StageOneConfig::Downsample::Subsample}, {"avgpool", StageOneConfig::Downsample::AvgPool}});
    s.get("time_features1", m.time_features1);
    s.get("d2", m.d2);
    s.get("heads2", m.heads2);
    s.get("layers", m.layers);
    s.get("ff_mult", m.ff_mult);
    std::string kernel = detail::kernel_name(m.esm_kernel);
    s.get("esm_kernel", kernel);
    m.esm_kernel = detail::parse_enum<EsmKernel>(
        kernel, "model.esm_kernel",
        {{"pdf", EsmKernel::Pdf}, {"log_pdf", EsmKernel::LogPdf}, {"unnormalized", EsmKernel::Unnormalized}});
    s.get("esm_per_head", m.esm_per_head);
    s.get("time_features2", m.time_features2);
    s.get("residual", m.residual);
    s.get("zero_init_head", m.zero_init_head);
    s.get("anchor", m.anchor);
    s.get("start_token_len", m.start_token_len);
  }
  if (top.has("variant")) {
    detail::Section s(top.at("variant"), "variant");
    auto& v = c.variant;
    s.get("two_stage", v.two_stage);
    s.get("first_only", v.first_only);
    s.get("simultaneous", v.simultaneous);
    s.get("esm", v.esm);
    s.get("convblock", v.convblock);
    s.get("pyramid", v.pyramid);
    s.get("start_token", v.start_token);
    s.get("cross_attention", v.cross_attention);
  }
  if (top.has("train")) {
    detail::Section s(top.at("train"), "train");
    auto& t = c.train;
    s.get("batch_size", t.batch_size);
    s.get("lr", t.lr);
    s.get("stage2_lr", t.stage2_lr);
    s.get("lr_decay", t.lr_decay);
    s.get("dropout", t.dropout);
    s.get("max_epochs", t.max_epochs);
    s.get("patience", t.patience);
    s.get("seed", t.seed);
    s.get("max_batches_per_epoch", t.max_batches_per_epoch);
    s.get("cache_stage1", t.cache_stage1);
  }
  c.validate();
  return c;
}

inline Json config_to_json(const TrainConfig& c) {
  const auto& y = c.data.synthetic;
  const auto& sp = c.data.split;
  const auto& m = c.model;
  const auto& v = c.variant;
  const auto& t = c.train;
  Json j;
  j["data"] = {{"source", c.data.source},
               {"path", c.data.path},
               {"target", c.data.target},
               {"task", detail::task_name(c.data.task)},
               {"channel_mode", detail::channel_name(c.data.channel_mode)},
               {"split",
                {{"kind", sp.mode == data::SplitSpec::Mode::Monthly ? "monthly" : "fractional"},
                 {"train", sp.train},
                 {"val", sp.val},
                 {"test", sp.test},
                 {"train_months", sp.train_months},
                 {"val_months", sp.val_months},
                 {"test_months", sp.test_months},
                 {"days_per_month", sp.days_per_month}}},
               {"synthetic",
                {{"length", y.length},
                 {"variates", y.variates},
                 {"trend_per_step", y.trend_per_step},
                 {"daily_amplitude", y.daily_amplitude},
                 {"weekly_amplitude", y.weekly_amplitude},
                 {"level_shifts", y.level_shifts},
                 {"shift_scale", y.shift_scale},
                 {"noise", y.noise},
                 {"noise_persistence", y.noise_persistence},
                 {"seed", y.seed}}}};
  j["model"] = {{"input_len", m.input_len},
                {"horizon", m.horizon},
                {"pad_input_to", m.pad_input_to},
                {"d1", m.d1},
                {"heads1", m.heads1},
                {"ar_blocks", m.ar_blocks},
                {"pyramids", m.pyramids},
                {"downsample", m.downsample == StageOneConfig::Downsample::AvgPool ? "avgpool" : "subsample"},
                {"time_features1", m.time_features1},
                {"d2", m.d2},
                {"heads2", m.heads2},
                {"layers", m.layers},
                {"ff_mult", m.ff_mult},
                {"esm_kernel", detail::kernel_name(m.esm_kernel)},
                {"esm_per_head", m.esm_per_head},
                {"time_features2", m.time_features2},
                {"residual", m.residual},
                {"zero_init_head", m.zero_init_head},
                {"anchor", m.anchor},
                {"start_token_len", m.start_token_len}};
  j["variant"] = {{"two_stage", v.two_stage},       {"first_only", v.first_only}, {"simultaneous", v.simultaneous},
                  {"esm", v.esm},                   {"convblock", v.convblock},   {"pyramid", v.pyramid},
                  {"start_token", v.start_token},   {"cross_attention", v.cross_attention}};
  j["train"] = {{"batch_size", t.batch_size},
                {"lr", t.lr},
                {"stage2_lr", t.stage2_lr},
                {"lr_decay", t.lr_decay},
                {"dropout", t.dropout},
                {"max_epochs", t.max_epochs},
                {"patience", t.patience},
                {"seed", t.seed},
                {"max_batches_per_epoch", t.max_batches_per_epoch},
                {"cache_stage1", t.cache_stage1}};
  return j;
}

/// Parses JSON text; syntax errors carry line and column.
inline TrainConfig parse_config(const std::string& text, const std::string& source = "<config>") {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(source + ":" + std::to_string(line) + ":" + std::to_string(col) + ": JSON syntax error");
  }
  return config_from_json(j);
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

inline std::uint64_t config_digest(const TrainConfig& c) {
  return static_cast<std::uint64_t>(std::hash<std::string>{}(config_to_json(c).dump()));
}

inline std::string hex_digest(std::uint64_t d) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << d;
  return os.str();
}

/// Named ablation variants.
inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{"first-only", "second", "simul",  "wo-ESM",
                                              "wo-CB",      "wo-Pyra", "w-st", "w-cross"};
  return names;
}

/// Returns `base` with the variant's flags applied on top of the full model.
inline TrainConfig apply_variant(TrainConfig base, const std::string& name) {
  VariantFlags& v = base.variant;
  v = VariantFlags{};
  if (name == "first-only") {
    v.two_stage = false;
    v.first_only = true;
  } else if (name == "second") {
  } else if (name == "simul") {
    v.two_stage = false;
    v.simultaneous = true;
  } else if (name == "wo-ESM") {
    v.esm = false;
  } else if (name == "wo-CB") {
    v.convblock = false;
  } else if (name == "wo-Pyra") {
    v.pyramid = false;
  } else if (name == "w-st") {
    v.start_token = true;
  } else if (name == "w-cross") {
    v.cross_attention = true;
  } else {
    std::string all;
    for (const auto& n : variant_names()) all += (all.empty() ? "" : ", ") + n;
    throw ConfigError("unknown variant \"" + name + "\"; expected one of {" + all + "}");
  }
  base.validate();
  return base;
}

}  // namespace gbt
