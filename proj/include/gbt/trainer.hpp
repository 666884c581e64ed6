#pragma once

// Two-phase training (stage 1, then a frozen-upstream stage 2), the
// first-only and simultaneous ablation modes, evaluation, the ablation
// roster and the multi-seed robustness driver.

#include <algorithm>
#include <chrono>
#include <fstream>
#include <future>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "gbt/checkpoint.hpp"
#include "gbt/metrics.hpp"
#include "gbt/optim.hpp"

namespace gbt {

/// SplitMix64 step: independent sub-seeds from one session seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline data::RawSeries load_series(const DataConfig& dc, const std::string& data_root = "") {
  if (dc.source == "synthetic") return data::make_synthetic(dc.synthetic);
  std::string path = dc.path;
  const bool relative = !path.empty() && path.front() != '/';
  if (relative && !data_root.empty()) path = data_root + "/" + path;
  if (!std::ifstream(path)) {
    throw DataError("cannot open " + path +
                    (relative ? (data_root.empty() ? " (relative data paths resolve against GBT_DATA_ROOT, which is unset)"
                                                   : " (resolved against data root " + data_root + ")")
                              : ""));
  }
  return data::load_csv(path, dc.target);
}

inline data::SeriesDataset make_dataset(const TrainConfig& cfg, const data::RawSeries& raw) {
  data::SeriesDataset::Options o;
  o.input_len = cfg.model.input_len;
  o.horizon = cfg.model.horizon;
  o.task = cfg.data.task;
  o.channel_mode = cfg.data.channel_mode;
  o.pad_input_to = cfg.model.pad_input_to;
  return data::SeriesDataset(raw, cfg.data.split, o);
}

/// Both stages plus the variant wiring between them.
class GbtModel {
 public:
  GbtModel(const TrainConfig& cfg, std::size_t channels, std::uint64_t seed)
      : cfg_(cfg), channels_(channels), stage1_(cfg.stage1(channels), derive_seed(seed, 1)) {
    if (!cfg.variant.first_only) stage2_.emplace(cfg.stage2(channels), derive_seed(seed, 2));
  }

  const TrainConfig& config() const { return cfg_; }
  std::size_t channels() const { return channels_; }
  const StageOneModel& stage1() const { return stage1_; }
  StageOneModel& stage1() { return stage1_; }
  bool has_stage2() const { return stage2_.has_value(); }
  const StageTwoModel& stage2() const {
    if (!stage2_) throw UsageError("first-only model has no stage 2");
    return *stage2_;
  }

  Tensor good_beginning(const data::Batch& b, Context& ctx) const {
    return stage1_.predict(b.input, b.input_time, ctx);
  }

  Tensor refine(const data::Batch& b, const Tensor& gb, Context& ctx) const {
    const StageTwoModel& s2 = stage2();
    if (cfg_.variant.cross_attention) {
      return s2.forward_with_cross(s2.encode_memory(b.input, b.input_time, ctx), gb, b.target_time, ctx);
    }
    if (cfg_.variant.start_token) {
      const std::size_t len = b.input.size(1), s = s2.config().token_len();
      return s2.forward_with_start_token(slice(b.input, 1, len - s, len), slice(b.input_time, 1, len - s, len), gb,
                                         b.target_time, ctx);
    }
    return s2.forward(gb, b.target_time, ctx);
  }

  Tensor predict(const data::Batch& b, Context& ctx) const {
    Tensor gb = good_beginning(b, ctx);
    return has_stage2() ? refine(b, gb, ctx) : gb;
  }

  ParameterSet parameters() const {
    ParameterSet ps;
    ps.append(stage1_.parameters(), "stage1.");
    if (stage2_) ps.append(stage2_->parameters(), "stage2.");
    return ps;
  }

  Json meta() const {
    return {{"format", "gbt-model"}, {"channels", channels_}, {"config", config_to_json(cfg_)}};
  }

 private:
  TrainConfig cfg_;
  std::size_t channels_;
  StageOneModel stage1_;
  std::optional<StageTwoModel> stage2_;
};

/// Rebuilds a model from a combined checkpoint written by save_model.
inline GbtModel load_model(const Checkpoint& ck) {
  if (!ck.meta.contains("config") || !ck.meta.contains("channels")) {
    throw DataError("checkpoint metadata lacks config/channels");
  }
  GbtModel m(config_from_json(ck.meta.at("config")), ck.meta.at("channels").get<std::size_t>(), 0);
  ParameterSet ps = m.parameters();
  load_parameters(ck, ps);
  return m;
}

inline void save_model(const std::string& path, const GbtModel& m) { save_checkpoint(path, m.parameters(), m.meta()); }

// ---------------------------------------------------------------------------
// Records

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::size_t batches = 0;
};

struct StageRecord {
  std::string stage;
  double initial_val = 0.0;
  std::vector<EpochLog> epochs;
  /// Epoch whose weights were kept; -1 means the pre-training weights.
  long best_epoch = -1;
  double best_val = 0.0;
  std::size_t trainable_scalars = 0;
  bool early_stopped = false;
  bool reused = false;
};

struct TrainRecord {
  std::vector<StageRecord> stages;
  bool freeze_checked = false;
  std::uint64_t stage1_digest_before = 0;
  std::uint64_t stage1_digest_after = 0;
  double wall_seconds = 0.0;
  std::vector<std::string> checkpoints;

  bool freeze_held() const { return !freeze_checked || stage1_digest_before == stage1_digest_after; }
  const StageRecord* find(const std::string& stage) const {
    for (const auto& s : stages)
      if (s.stage == stage) return &s;
    return nullptr;
  }

  Json to_json() const {
    Json j;
    j["stages"] = Json::array();
    for (const auto& s : stages) {
      Json e = Json::array();
      for (const auto& ep : s.epochs) {
        e.push_back({{"epoch", ep.epoch},
                     {"lr", ep.lr},
                     {"train_loss", ep.train_loss},
                     {"val_loss", ep.val_loss},
                     {"batches", ep.batches}});
      }
      j["stages"].push_back({{"stage", s.stage},
                             {"initial_val", s.initial_val},
                             {"best_epoch", s.best_epoch},
                             {"best_val", s.best_val},
                             {"trainable_scalars", s.trainable_scalars},
                             {"early_stopped", s.early_stopped},
                             {"reused", s.reused},
                             {"epochs", e}});
    }
    j["freeze"] = {{"checked", freeze_checked},
                   {"stage1_digest_before", hex_digest(stage1_digest_before)},
                   {"stage1_digest_after", hex_digest(stage1_digest_after)},
                   {"held", freeze_held()}};
    j["wall_seconds"] = wall_seconds;
    j["checkpoints"] = checkpoints;
    return j;
  }
};

// ---------------------------------------------------------------------------
// Evaluation

struct Predictions {
  std::vector<double> pred;
  std::vector<double> truth;
  std::vector<std::size_t> variates;  // per (sample, channel)
  std::size_t horizon = 0;
  std::size_t channels = 0;
};

template <typename PredictFn>
Predictions collect_predictions(const data::SeriesDataset& ds, data::Split split, std::size_t batch_size,
                                PredictFn&& predict) {
  NoGradGuard no_grad;
  Predictions out;
  out.horizon = ds.options().horizon;
  out.channels = ds.model_channels();
  const std::size_t n = ds.sample_count(split);
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  for (std::size_t lo = 0; lo < n; lo += batch_size) {
    const std::size_t hi = std::min(n, lo + batch_size);
    std::span<const std::size_t> chunk(ids.data() + lo, hi - lo);
    data::Batch b = ds.batch(split, chunk);
    Tensor p = predict(b, chunk);
    out.pred.insert(out.pred.end(), p.values().begin(), p.values().end());
    out.truth.insert(out.truth.end(), b.target.values().begin(), b.target.values().end());
    out.variates.insert(out.variates.end(), b.variates.begin(), b.variates.end());
  }
  return out;
}

inline EvalReport score(const Predictions& p, const data::StandardizeStats& stats, const std::string& split_name) {
  EvalReport r;
  r.split = split_name;
  r.horizon = p.horizon;
  r.channels = p.channels;
  r.windows = p.pred.size() / (p.horizon * p.channels);
  r.mse = mse(p.pred, p.truth);
  r.mae = mae(p.pred, p.truth);
  r.curve = mse_t(p.pred, p.truth, p.horizon, p.channels);
  std::vector<double> pr(p.pred.size()), tr(p.truth.size());
  for (std::size_t i = 0; i < pr.size(); ++i) {
    const std::size_t sample = i / (p.horizon * p.channels), c = i % p.channels;
    const std::size_t v = p.variates[sample * p.channels + c];
    pr[i] = p.pred[i] * stats.std[v] + stats.mean[v];
    tr[i] = p.truth[i] * stats.std[v] + stats.mean[v];
  }
  r.mse_raw = mse(pr, tr);
  r.mae_raw = mae(pr, tr);
  return r;
}

inline const char* split_name(data::Split s) {
  return s == data::Split::Train ? "train" : s == data::Split::Val ? "val" : "test";
}

inline EvalReport evaluate(const GbtModel& model, const data::SeriesDataset& ds, data::Split split,
                           std::size_t batch_size = 128) {
  Context ctx(0, false);
  auto p = collect_predictions(ds, split, batch_size,
                               [&](const data::Batch& b, std::span<const std::size_t>) { return model.predict(b, ctx); });
  return score(p, ds.stats(), split_name(split));
}

/// Stage-1 output alone, i.e. the first-only forecast of a two-stage model.
inline EvalReport evaluate_stage1(const GbtModel& model, const data::SeriesDataset& ds, data::Split split,
                                  std::size_t batch_size = 128) {
  Context ctx(0, false);
  auto p = collect_predictions(ds, split, batch_size, [&](const data::Batch& b, std::span<const std::size_t>) {
    return model.good_beginning(b, ctx);
  });
  return score(p, ds.stats(), split_name(split));
}

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
  GbtModel model;
  TrainRecord record;
};

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const data::SeriesDataset& ds, std::uint64_t seed)
      : cfg_(cfg), ds_(ds), seed_(seed) {
    cfg_.validate();
  }
  Trainer(const TrainConfig& cfg, const data::SeriesDataset& ds) : Trainer(cfg, ds, cfg.train.seed) {}

  /// Phase 2 keeps the pre-training stage-2 weights as a best-val candidate.
  bool stage2_initial_candidate = true;

  /// Runs the configured mode. A supplied stage-1 model with the same
  /// configuration replaces phase 1 (its weights are copied, not shared).
  TrainResult run(const StageOneModel* pretrained = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    GbtModel model(cfg_, ds_.model_channels(), seed_);
    TrainRecord rec;
    if (cfg_.variant.simultaneous) {
      rec.stages.push_back(train_simultaneous(model));
    } else {
      if (pretrained != nullptr) {
        ParameterSet dst = model.stage1().parameters();
        if (dst.copy_matching_from(pretrained->parameters()) != dst.size()) {
          throw ConfigError("pretrained stage 1 does not match this configuration");
        }
        StageRecord reused;
        reused.stage = "stage1";
        reused.reused = true;
        rec.stages.push_back(reused);
      } else {
        rec.stages.push_back(train_stage1(model));
      }
      if (cfg_.variant.two_stage) {
        rec.freeze_checked = true;
        rec.stage1_digest_before = model.stage1().parameters().digest();
        rec.stages.push_back(train_stage2(model));
        rec.stage1_digest_after = model.stage1().parameters().digest();
        if (rec.stage1_digest_after != rec.stage1_digest_before) {
          throw FreezeViolation("stage-1 parameter digest changed during phase 2: " +
                                hex_digest(rec.stage1_digest_before) + " -> " + hex_digest(rec.stage1_digest_after));
        }
      }
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {std::move(model), std::move(rec)};
  }

  StageRecord train_stage1(GbtModel& model) {
    ParameterSet params = model.stage1().parameters();
    params.set_requires_grad(true);
    const GbtModel& m = model;
    return fit(
        "stage1", params,
        [&](const data::Batch& b, std::span<const std::size_t>, Context& ctx) {
          return mse_loss(m.good_beginning(b, ctx), b.target);
        },
        [&] { return val_mse([&](const data::Batch& b, std::span<const std::size_t>, Context& ctx) {
                return m.good_beginning(b, ctx);
              }); },
        false, 10, cfg_.train.lr);
  }

  StageRecord train_stage2(GbtModel& model) {
    ParameterSet frozen = model.stage1().parameters();
    frozen.set_requires_grad(false);
    frozen.zero_grad();
    ParameterSet params = model.stage2().parameters();
    params.set_requires_grad(true);
    const GbtModel& m = model;
    std::array<std::vector<double>, 3> cache;
    if (cfg_.train.cache_stage1) {
      for (auto s : {data::Split::Train, data::Split::Val}) {
        Context ev(0, false);
        cache[static_cast<int>(s)] = collect_predictions(ds_, s, 128, [&](const data::Batch& b, auto) {
                                       return m.good_beginning(b, ev);
                                     }).pred;
      }
    }
    const std::size_t row = cfg_.model.horizon * ds_.model_channels();
    auto beginning = [&, row](data::Split s, const data::Batch& b, std::span<const std::size_t> ids) {
      NoGradGuard no_grad;
      if (!cfg_.train.cache_stage1) {
        Context ev(0, false);
        return m.good_beginning(b, ev).detach();
      }
      const auto& c = cache[static_cast<int>(s)];
      std::vector<double> v(ids.size() * row);
      for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(c.begin() + static_cast<std::ptrdiff_t>(ids[i] * row), row,
                    v.begin() + static_cast<std::ptrdiff_t>(i * row));
      return Tensor::from_vector({ids.size(), cfg_.model.horizon, ds_.model_channels()}, std::move(v));
    };
    return fit(
        "stage2", params,
        [&](const data::Batch& b, std::span<const std::size_t> ids, Context& ctx) {
          return mse_loss(m.refine(b, beginning(data::Split::Train, b, ids), ctx), b.target);
        },
        [&] {
          return val_mse([&](const data::Batch& b, std::span<const std::size_t> ids, Context& ctx) {
            return m.refine(b, beginning(data::Split::Val, b, ids), ctx);
          });
        },
        stage2_initial_candidate, 20, cfg_.train.stage2_lr > 0.0 ? cfg_.train.stage2_lr : cfg_.train.lr);
  }

  StageRecord train_simultaneous(GbtModel& model) {
    ParameterSet params = model.parameters();
    params.set_requires_grad(true);
    const GbtModel& m = model;
    return fit(
        "simultaneous", params,
        [&](const data::Batch& b, std::span<const std::size_t>, Context& ctx) {
          return mse_loss(m.predict(b, ctx), b.target);
        },
        [&] {
          return val_mse([&](const data::Batch& b, std::span<const std::size_t>, Context& ctx) {
            return m.predict(b, ctx);
          });
        },
        false, 30, cfg_.train.lr);
  }

  /// Learning rate for an epoch: lr0 * decay^epoch, no floor.
  static double lr_at(double lr0, double decay, std::size_t epoch) {
    return lr0 * std::pow(decay, static_cast<double>(epoch));
  }

 private:
  template <typename PredictFn>
  double val_mse(PredictFn&& predict) const {
    Context ctx(0, false);
    auto p = collect_predictions(ds_, data::Split::Val, 128, [&](const data::Batch& b, std::span<const std::size_t> ids) {
      return predict(b, ids, ctx);
    });
    return mse(p.pred, p.truth);
  }

  template <typename LossFn, typename ValFn>
  StageRecord fit(const std::string& name, ParameterSet& params, LossFn&& batch_loss, ValFn&& validate,
                  bool initial_candidate, std::uint64_t stream, double lr0) {
    StageRecord rec;
    rec.stage = name;
    rec.trainable_scalars = params.scalar_count();
    Adam opt(params.tensors());
    std::mt19937_64 order_rng(derive_seed(seed_, stream));
    Context ctx(derive_seed(seed_, stream + 1), true);

    rec.initial_val = validate();
    if (!std::isfinite(rec.initial_val)) {
      throw DivergenceError(name + ": validation loss is " + format_double(rec.initial_val) + " before training");
    }
    double best = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> best_snapshot;
    if (initial_candidate) {
      best = rec.initial_val;
      best_snapshot = params.snapshot();
    }
    std::vector<std::size_t> order(ds_.sample_count(data::Split::Train));
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t bs = cfg_.train.batch_size;
    std::size_t stale = 0;
    for (std::size_t epoch = 0; epoch < cfg_.train.max_epochs; ++epoch) {
      EpochLog log;
      log.epoch = epoch;
      log.lr = lr_at(lr0, cfg_.train.lr_decay, epoch);
      std::shuffle(order.begin(), order.end(), order_rng);
      double loss_sum = 0.0;
      std::size_t seen = 0;
      try {
        for (std::size_t lo = 0; lo < order.size(); lo += bs) {
          if (cfg_.train.max_batches_per_epoch && log.batches == cfg_.train.max_batches_per_epoch) break;
          std::span<const std::size_t> ids(order.data() + lo, std::min(order.size(), lo + bs) - lo);
          data::Batch b = ds_.batch(data::Split::Train, ids);
          opt.zero_grad();
          Tensor loss = batch_loss(b, ids, ctx);
          backward(loss);
          opt.step(log.lr);
          loss_sum += loss.item() * static_cast<double>(ids.size());
          seen += ids.size();
          ++log.batches;
        }
        log.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(seen, 1));
        log.val_loss = validate();
      } catch (const NumericError& e) {
        throw DivergenceError(name + ": non-finite state at epoch " + std::to_string(epoch) + " batch " +
                              std::to_string(log.batches) + " (lr " + format_double(log.lr) + "): " + e.what());
      }
      rec.epochs.push_back(log);
      if (!std::isfinite(log.val_loss)) {
        throw DivergenceError(name + ": validation loss " + format_double(log.val_loss) + " at epoch " +
                              std::to_string(epoch) + " (lr " + format_double(log.lr) + ", train loss " +
                              format_double(log.train_loss) + ")");
      }
      if (log.val_loss < best) {
        best = log.val_loss;
        best_snapshot = params.snapshot();
        rec.best_epoch = static_cast<long>(epoch);
        stale = 0;
      } else if (++stale >= cfg_.train.patience) {
        rec.early_stopped = true;
        break;
      }
    }
    rec.best_val = best;
    params.restore(best_snapshot);
    return rec;
  }

  TrainConfig cfg_;
  const data::SeriesDataset& ds_;
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Ablation roster and robustness driver

struct AblationRow {
  std::string variant;
  bool ok = false;
  double mse = 0.0;
  double mae = 0.0;
  double seconds = 0.0;
  std::string error;
};

/// One row per variant, same data and seed. Variants whose stage 1 matches
/// the base configuration share one stage-1 training run.
inline std::vector<AblationRow> run_ablation_suite(const TrainConfig& base, const data::SeriesDataset& ds,
                                                   const std::vector<std::string>& variants = variant_names()) {
  if (variants.empty()) throw ConfigError("ablation needs at least one variant");
  std::optional<GbtModel> shared;
  const TrainConfig first = apply_variant(base, "first-only");
  std::vector<AblationRow> rows;
  for (const auto& name : variants) {
    AblationRow row;
    row.variant = name;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const TrainConfig cfg = apply_variant(base, name);
      const bool same_stage1 = !cfg.variant.simultaneous &&
                               config_to_json(cfg).at("model") == config_to_json(first).at("model") &&
                               cfg.variant.convblock == first.variant.convblock &&
                               cfg.variant.pyramid == first.variant.pyramid;
      if (same_stage1 && !shared) shared.emplace(Trainer(first, ds).run().model);
      TrainResult r = Trainer(cfg, ds).run(same_stage1 ? &shared->stage1() : nullptr);
      const EvalReport rep = evaluate(r.model, ds, data::Split::Test);
      row.mse = rep.mse;
      row.mae = rep.mae;
      row.ok = true;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(row);
  }
  return rows;
}

/// n_runs independent train + test-eval sessions, concurrently. Seeds are
/// base, base + 1, ... unless identical_seeds forces them all to base.
inline RobustnessReport robustness(const TrainConfig& cfg, const data::SeriesDataset& ds, std::size_t n_runs,
                                   bool identical_seeds = false) {
  if (n_runs < 2) throw ConfigError("robustness needs at least 2 runs");
  std::vector<std::future<RunOutcome>> futures;
  for (std::size_t i = 0; i < n_runs; ++i) {
    const std::uint64_t seed = cfg.train.seed + (identical_seeds ? 0 : i);
    futures.push_back(std::async(std::launch::async, [&cfg, &ds, seed] {
      RunOutcome o;
      o.seed = seed;
      try {
        TrainResult r = Trainer(cfg, ds, seed).run();
        const EvalReport rep = evaluate(r.model, ds, data::Split::Test);
        o.mse = rep.mse;
        o.mae = rep.mae;
        o.ok = true;
      } catch (const std::exception& e) {
        o.error = e.what();
      }
      return o;
    }));
  }
  std::vector<RunOutcome> runs;
  for (auto& f : futures) runs.push_back(f.get());
  return make_robustness_report(std::move(runs), n_runs);
}

}  // namespace gbt
