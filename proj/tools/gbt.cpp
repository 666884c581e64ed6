// Command-line driver: train, eval, ablate, diagnose and robust.
//
//   gbt train    --config cfg.json [--seed N] [--variant NAME] [--out DIR]
//   gbt eval     --checkpoint model.ckpt [--config cfg.json] [--out DIR]
//   gbt ablate   --config cfg.json [--seed N] [--out DIR]
//   gbt diagnose --regime zero|start_token|start_token_posemb [--seed N] [--out DIR]
//   gbt robust   --config cfg.json --runs N [--identical-seeds] [--out DIR]
//
// Relative data paths resolve against $GBT_DATA_ROOT when it is set.
// Exit codes: 0 success, 1 runtime failure, 2 config or validation failure.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "gbt/gbt.hpp"

namespace {

namespace fs = std::filesystem;
using namespace gbt;

constexpr const char* kArtifactVersion = "gbt-cpp 1.0.0";

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string variant;
  std::string out = "runs";
  std::string checkpoint;
  std::string regime = "zero";
  std::size_t runs = 5;
  bool identical_seeds = false;
  std::size_t embed_dim = 64, token_len = 48, pred_len = 96;
  std::optional<bool> bias;
  std::string command_line;
};

std::string data_root() {
  const char* env = std::getenv("GBT_DATA_ROOT");
  return env ? env : "";
}

TrainConfig resolve_config(const Options& o) {
  TrainConfig c = load_config(o.config);
  if (o.seed) c.train.seed = *o.seed;
  if (!o.variant.empty()) c = apply_variant(c, o.variant);
  c.validate();
  return c;
}

std::string utc_stamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

/// Run directory plus a manifest listing every file written into it.
class RunDir {
 public:
  RunDir(const std::string& out, const std::string& command, std::uint64_t digest, const Options& o) {
    const std::string base = command + "-" + hex_digest(digest).substr(0, 12) + "-" + utc_stamp();
    dir_ = fs::path(out) / base;
    for (int i = 1; fs::exists(dir_); ++i) dir_ = fs::path(out) / (base + "-" + std::to_string(i));
    fs::create_directories(dir_);
    manifest_["artifact_version"] = kArtifactVersion;
    manifest_["command"] = command;
    manifest_["command_line"] = o.command_line;
    manifest_["created_utc"] = utc_stamp();
    manifest_["files"] = Json::array();
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  Json& manifest() { return manifest_; }

  void add(const std::string& name, const std::string& role) {
    manifest_["files"].push_back({{"name", name}, {"role", role}});
  }

  void write_json(const std::string& name, const std::string& role, const Json& j) {
    std::ofstream(path(name)) << j.dump(2) << '\n';
    add(name, role);
  }

  void finish() {
    manifest_["files"].push_back({{"name", "manifest.json"}, {"role", "this manifest"}});
    std::ofstream(path("manifest.json")) << manifest_.dump(2) << '\n';
    std::cout << "run directory: " << dir_.string() << '\n';
  }

 private:
  fs::path dir_;
  Json manifest_;
};

Json dataset_entry(const TrainConfig& c, const data::RawSeries& raw) {
  return {{"source", c.data.source},
          {"path", c.data.path},
          {"data_root", data_root()},
          {"rows", raw.length()},
          {"variates", raw.variates()},
          {"digest", hex_digest(data::series_digest(raw))}};
}

void record_config(RunDir& run, const TrainConfig& c, const data::RawSeries& raw) {
  const Json cj = config_to_json(c);
  run.manifest()["config"] = cj;
  run.manifest()["config_digest"] = hex_digest(config_digest(c));
  run.manifest()["seed"] = c.train.seed;
  run.manifest()["dataset"] = dataset_entry(c, raw);
  run.write_json("config.json", "resolved configuration", cj);
}

void print_report(const EvalReport& r) {
  std::printf("%-11s windows %zu  mse %.6f  mae %.6f  (original scale mse %.6g  mae %.6g)\n", r.split.c_str(),
              r.windows, r.mse, r.mae, r.mse_raw, r.mae_raw);
}

void write_reports(RunDir& run, std::vector<EvalReport> reports, const EvalReport& curve_source) {
  write_metrics_csv(run.path("metrics.csv"), reports);
  run.add("metrics.csv", "MSE/MAE per split, standardized and original scale");
  write_mse_t_csv(run.path("mse_t.csv"), curve_source.curve);
  run.add("mse_t.csv", "per-step test MSE of the final model");
}

int cmd_train(const Options& o) {
  const TrainConfig cfg = resolve_config(o);
  const data::RawSeries raw = load_series(cfg.data, data_root());
  const data::SeriesDataset ds = make_dataset(cfg, raw);
  RunDir run(o.out, "train", config_digest(cfg), o);
  record_config(run, cfg, raw);

  TrainResult r = Trainer(cfg, ds).run();
  for (const auto& s : r.record.stages)
    for (const auto& e : s.epochs)
      std::printf("%-12s epoch %zu  lr %.3e  train %.6f  val %.6f\n", s.stage.c_str(), e.epoch, e.lr, e.train_loss,
                  e.val_loss);
  run.write_json("train_record.json", "per-stage epoch log, freeze audit, timing", r.record.to_json());

  if (!cfg.variant.simultaneous) {
    Json meta = r.model.meta();
    meta["format"] = "gbt-stage1";
    save_checkpoint(run.path("stage1.ckpt"), r.model.stage1().parameters(), meta);
    run.add("stage1.ckpt", "stage-1 parameters after phase 1");
  }
  save_model(run.path("model.ckpt"), r.model);
  run.add("model.ckpt", "full model; input to gbt eval");

  std::vector<EvalReport> reports{evaluate(r.model, ds, data::Split::Val), evaluate(r.model, ds, data::Split::Test)};
  if (r.model.has_stage2()) {
    EvalReport first = evaluate_stage1(r.model, ds, data::Split::Test);
    first.split = "test_stage1";
    reports.push_back(first);
  }
  for (const auto& rep : reports) print_report(rep);
  write_reports(run, reports, reports[1]);
  run.finish();
  return 0;
}

/// Names of model/variant settings that differ between two configurations.
std::vector<std::string> model_mismatches(const TrainConfig& a, const TrainConfig& b) {
  std::vector<std::string> out;
  const Json ja = config_to_json(a), jb = config_to_json(b);
  for (const char* section : {"model", "variant"})
    for (const auto& [k, v] : ja.at(section).items())
      if (!jb.at(section).contains(k) || jb.at(section).at(k) != v)
        out.push_back(std::string(section) + "." + k + " (checkpoint " + v.dump() + ", config " +
                      (jb.at(section).contains(k) ? jb.at(section).at(k).dump() : "absent") + ")");
  return out;
}

int cmd_eval(const Options& o) {
  const Checkpoint ck = read_checkpoint(o.checkpoint);
  if (ck.meta.value("format", "") != "gbt-model") throw ConfigError(o.checkpoint + " is not a full-model checkpoint");
  GbtModel model = load_model(ck);
  TrainConfig cfg = model.config();
  if (!o.config.empty()) {
    TrainConfig given = resolve_config(o);
    const auto diff = model_mismatches(cfg, given);
    if (!diff.empty()) {
      std::string msg = "checkpoint and config disagree on";
      for (const auto& d : diff) msg += "\n  " + d;
      throw ConfigError(msg);
    }
    cfg.data = given.data;
  }
  const data::RawSeries raw = load_series(cfg.data, data_root());
  const data::SeriesDataset ds = make_dataset(cfg, raw);
  if (ds.model_channels() != model.channels()) {
    throw ConfigError("checkpoint expects " + std::to_string(model.channels()) + " channels, data provides " +
                      std::to_string(ds.model_channels()));
  }
  RunDir run(o.out, "eval", config_digest(cfg), o);
  record_config(run, cfg, raw);
  run.manifest()["checkpoint"] = fs::absolute(o.checkpoint).string();
  std::vector<EvalReport> reports{evaluate(model, ds, data::Split::Val), evaluate(model, ds, data::Split::Test)};
  for (const auto& rep : reports) print_report(rep);
  write_reports(run, reports, reports[1]);
  run.finish();
  return 0;
}

int cmd_ablate(const Options& o) {
  const TrainConfig cfg = resolve_config(o);
  const data::RawSeries raw = load_series(cfg.data, data_root());
  const data::SeriesDataset ds = make_dataset(cfg, raw);
  RunDir run(o.out, "ablate", config_digest(cfg), o);
  record_config(run, cfg, raw);
  const auto rows = run_ablation_suite(cfg, ds);
  std::ofstream csv(run.path("ablation.csv"));
  csv << "variant,ok,mse,mae,seconds,error\n";
  bool all_ok = true;
  std::printf("%-11s %-10s %-10s %s\n", "variant", "mse", "mae", "seconds");
  for (const auto& r : rows) {
    all_ok = all_ok && r.ok;
    std::string err = r.error;
    for (char& ch : err)
      if (ch == ',' || ch == '\n') ch = ';';
    csv << r.variant << ',' << (r.ok ? 1 : 0) << ',' << format_double(r.mse) << ',' << format_double(r.mae) << ','
        << format_double(r.seconds) << ',' << err << '\n';
    if (r.ok) {
      std::printf("%-11s %-10.6f %-10.6f %.1f\n", r.variant.c_str(), r.mse, r.mae, r.seconds);
    } else {
      std::printf("%-11s failed: %s\n", r.variant.c_str(), r.error.c_str());
    }
  }
  csv.close();
  run.add("ablation.csv", "one row per variant: test MSE/MAE and wall time");
  run.finish();
  return all_ok ? 0 : 1;
}

int cmd_diagnose(const Options& o) {
  const DiagnosticRegime regime = parse_regime(o.regime);
  const std::uint64_t seed = o.seed.value_or(0);
  const DegeneracyReport rep = zero_init_diagnostic(o.embed_dim, o.token_len, o.pred_len, regime, seed, o.bias);
  const Json j = {{"regime", regime_name(rep.regime)},
                  {"seed", seed},
                  {"embed_dim", rep.embed_dim},
                  {"token_len", rep.token_len},
                  {"pred_len", rep.pred_len},
                  {"projection_bias", rep.projection_bias},
                  {"position_embedding", rep.position_embedding},
                  {"max_abs_prediction_blocks", rep.max_abs_prediction_blocks},
                  {"max_abs_token_block", rep.max_abs_token_block},
                  {"prediction_row_spread", rep.prediction_row_spread},
                  {"posemb_recompute_diff", rep.posemb_recompute_diff},
                  {"verdict", rep.verdict}};
  RunDir run(o.out, "diagnose", std::hash<std::string>{}(j.dump()), o);
  run.manifest()["parameters"] = {{"regime", j["regime"]}, {"seed", seed}, {"embed_dim", o.embed_dim},
                                  {"token_len", o.token_len}, {"pred_len", o.pred_len}};
  run.write_json("diagnosis.json", "score-matrix statistics and verdict", j);
  std::printf("regime %s  max|S| prediction blocks %.3g  token block %.3g  row spread %.3g\n", j["regime"].get<std::string>().c_str(),
              rep.max_abs_prediction_blocks, rep.max_abs_token_block, rep.prediction_row_spread);
  std::printf("verdict: %s\n", rep.verdict.c_str());
  run.finish();
  return 0;
}

int cmd_robust(const Options& o) {
  const TrainConfig cfg = resolve_config(o);
  const data::RawSeries raw = load_series(cfg.data, data_root());
  const data::SeriesDataset ds = make_dataset(cfg, raw);
  RunDir run(o.out, "robust", config_digest(cfg), o);
  record_config(run, cfg, raw);
  run.manifest()["runs"] = o.runs;
  run.manifest()["identical_seeds"] = o.identical_seeds;
  const RobustnessReport rep = robustness(cfg, ds, o.runs, o.identical_seeds);
  std::ofstream csv(run.path("robustness.csv"));
  csv << "run,seed,ok,mse,mae\n";
  for (std::size_t i = 0; i < rep.runs.size(); ++i) {
    const auto& r = rep.runs[i];
    csv << i << ',' << r.seed << ',' << (r.ok ? 1 : 0) << ',' << format_double(r.mse) << ',' << format_double(r.mae)
        << '\n';
    if (r.ok) {
      std::printf("run %zu  seed %llu  mse %.6f  mae %.6f\n", i, static_cast<unsigned long long>(r.seed), r.mse, r.mae);
    } else {
      std::printf("run %zu  seed %llu  failed: %s\n", i, static_cast<unsigned long long>(r.seed), r.error.c_str());
    }
  }
  csv << "mean,,," << format_double(rep.mse.mean) << ',' << format_double(rep.mae.mean) << '\n';
  csv << "std,,," << format_double(rep.mse.std) << ',' << format_double(rep.mae.std) << '\n';
  csv.close();
  run.add("robustness.csv", "per-run test metrics, then mean and population std over completed runs");
  std::printf("completed %zu/%zu  mse %.6f +- %.6f  mae %.6f +- %.6f\n", rep.completed(), rep.requested, rep.mse.mean,
              rep.mse.std, rep.mae.mean, rep.mae.std);
  run.finish();
  return rep.complete() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  for (int i = 0; i < argc; ++i) o.command_line += (i ? " " : "") + std::string(argv[i]);

  CLI::App app{"GBT two-stage forecasting: training, evaluation, ablation and diagnostics"};
  app.require_subcommand(1);
  const auto add_out = [&](CLI::App* sub) { sub->add_option("--out", o.out, "parent directory for run outputs"); };
  const auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", o.seed, "overrides train.seed"); };

  CLI::App* train = app.add_subcommand("train", "train a model and evaluate it on val and test");
  train->add_option("--config", o.config, "JSON configuration")->required();
  train->add_option("--variant", o.variant, "ablation variant applied on top of the config");
  add_seed(train);
  add_out(train);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a saved model checkpoint");
  eval->add_option("--checkpoint", o.checkpoint, "model.ckpt written by train")->required();
  eval->add_option("--config", o.config, "configuration for the data; model settings must match the checkpoint");
  add_out(eval);

  CLI::App* ablate = app.add_subcommand("ablate", "train every ablation variant and tabulate test metrics");
  ablate->add_option("--config", o.config, "JSON configuration")->required();
  add_seed(ablate);
  add_out(ablate);

  CLI::App* diagnose = app.add_subcommand("diagnose", "zero-initialization degeneracy probe");
  diagnose->add_option("--regime", o.regime, "zero, start_token or start_token_posemb");
  diagnose->add_option("--embed-dim", o.embed_dim, "model dimension");
  diagnose->add_option("--token-len", o.token_len, "start-token length");
  diagnose->add_option("--pred-len", o.pred_len, "prediction length");
  diagnose->add_option("--bias", o.bias, "projection bias on or off (default depends on the regime)");
  add_seed(diagnose);
  add_out(diagnose);

  CLI::App* robust = app.add_subcommand("robust", "repeat training over seeds and report mean and std");
  robust->add_option("--config", o.config, "JSON configuration")->required();
  robust->add_option("--runs", o.runs, "number of runs (at least 2)");
  robust->add_flag("--identical-seeds", o.identical_seeds, "use the same seed for every run");
  add_seed(robust);
  add_out(robust);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*ablate) return cmd_ablate(o);
    if (*diagnose) return cmd_diagnose(o);
    if (*robust) return cmd_robust(o);
  } catch (const ConfigError& e) {
    std::cerr << "gbt: configuration error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "gbt: invalid arguments: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "gbt: error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
