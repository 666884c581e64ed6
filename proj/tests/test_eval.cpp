#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"

using namespace gbt;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Metrics, HandOracles) {
  const std::vector<double> pred{1, 2, 3}, truth{1, 3, 5};
  EXPECT_NEAR(mse(pred, truth), 5.0 / 3.0, 1e-12);
  EXPECT_NEAR(mae(pred, truth), 1.0, 1e-12);
  const std::vector<double> a{0.5, -1.5}, b{-0.5, 0.5};
  EXPECT_NEAR(mse(a, b), 2.5, 1e-12);
  EXPECT_NEAR(mae(a, b), 1.5, 1e-12);
  EXPECT_EQ(mse(pred, pred), 0.0);
  EXPECT_EQ(mae(pred, pred), 0.0);
}

TEST(Metrics, ShapeErrors) {
  const std::vector<double> a{1, 2, 3}, b{1, 2}, empty;
  EXPECT_THROW(mse(a, b), DimensionError);
  EXPECT_THROW(mae(a, b), DimensionError);
  EXPECT_THROW(mse(empty, empty), DimensionError);
  EXPECT_THROW(mse_t(a, a, 2), DimensionError);
  EXPECT_THROW(mse_t(a, a, 0), DimensionError);
}

TEST(Metrics, StepCurveHandOracle) {
  // Two windows, horizon 2, one channel.
  const std::vector<double> pred{0, 0, 1, 1}, truth{1, 2, 1, 3};
  const auto curve = mse_t(pred, truth, 2);
  ASSERT_EQ(curve.size(), 2u);
  EXPECT_NEAR(curve[0], 0.5, 1e-12);
  EXPECT_NEAR(curve[1], 4.0, 1e-12);
}

TEST(Metrics, StepCurveAveragesToMse) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g(0.0, 1.0);
  for (std::size_t channels : {1u, 3u}) {
    std::vector<double> p(37 * 24 * channels), t(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = g(rng);
      t[i] = g(rng);
    }
    const auto curve = mse_t(p, t, 24, channels);
    double mean = 0.0;
    for (double v : curve) mean += v;
    mean /= 24.0;
    EXPECT_NEAR(mean, mse(p, t), 1e-9);
  }
}

TEST(Metrics, ScoreInvertsStandardization) {
  Predictions p;
  p.pred = {0.0, 1.0};
  p.truth = {1.0, 1.0};
  p.variates = {0};
  p.horizon = 2;
  p.channels = 1;
  const data::StandardizeStats st{{10.0}, {2.0}};
  const EvalReport r = score(p, st, "test");
  EXPECT_EQ(r.windows, 1u);
  EXPECT_NEAR(r.mse, 0.5, 1e-12);
  EXPECT_NEAR(r.mse_raw, 2.0, 1e-12);
  EXPECT_NEAR(r.mae_raw, 1.0, 1e-12);
}

TEST(Metrics, SummaryUsesPopulationStd) {
  const std::vector<double> xs{1.0, 2.0, 3.0, 4.0};
  const MetricStats s = summarize(xs);
  EXPECT_NEAR(s.mean, 2.5, 1e-12);
  EXPECT_NEAR(s.std, std::sqrt(1.25), 1e-12);
  const std::vector<double> same(5, 0.1);
  EXPECT_EQ(summarize(same).std, 0.0);
  EXPECT_EQ(summarize(same).mean, 0.1);
  EXPECT_THROW(summarize(std::vector<double>{}), DimensionError);
}

TEST(Metrics, RobustnessReportSkipsFailedRuns) {
  std::vector<RunOutcome> runs(3);
  runs[0] = {1, true, 1.0, 0.5, ""};
  runs[1] = {2, false, 0.0, 0.0, "diverged"};
  runs[2] = {3, true, 3.0, 1.5, ""};
  const RobustnessReport rep = make_robustness_report(runs, 3);
  EXPECT_EQ(rep.completed(), 2u);
  EXPECT_FALSE(rep.complete());
  EXPECT_NEAR(rep.mse.mean, 2.0, 1e-12);
  EXPECT_NEAR(rep.mse.std, 1.0, 1e-12);
}

TEST(Metrics, CsvWritersUseFullPrecision) {
  const auto dir = std::filesystem::temp_directory_path();
  EvalReport r;
  r.split = "test";
  r.windows = 3;
  r.horizon = 2;
  r.mse = 0.1;
  r.mae = 1.0 / 3.0;
  r.mse_raw = 2.0;
  r.mae_raw = 4.0;
  write_metrics_csv((dir / "gbt_metrics.csv").string(), {r});
  EXPECT_EQ(slurp(dir / "gbt_metrics.csv"),
            "split,scale,windows,horizon,mse,mae\n"
            "test,standardized,3,2,0.10000000000000001,0.33333333333333331\n"
            "test,original,3,2,2,4\n");
  write_mse_t_csv((dir / "gbt_mse_t.csv").string(), {0.25, 0.5});
  EXPECT_EQ(slurp(dir / "gbt_mse_t.csv"), "t,mse_t\n0,0.25\n1,0.5\n");
  EXPECT_EQ(std::stod(format_double(0.1)), 0.1);
  std::filesystem::remove(dir / "gbt_metrics.csv");
  std::filesystem::remove(dir / "gbt_mse_t.csv");
  EXPECT_THROW(write_mse_t_csv("/nonexistent/dir/x.csv", {}), DataError);
}

TEST(Evaluate, ReportMatchesCollectedPredictions) {
  const TrainConfig c = gbt::testing::tiny_config();
  const data::RawSeries raw = load_series(c.data);
  const data::SeriesDataset ds = make_dataset(c, raw);
  const GbtModel m(c, 1, 3);
  const EvalReport r = evaluate(m, ds, data::Split::Test);
  EXPECT_EQ(r.split, "test");
  EXPECT_EQ(r.windows, ds.sample_count(data::Split::Test));
  EXPECT_EQ(r.horizon, 4u);
  ASSERT_EQ(r.curve.size(), 4u);
  double mean = 0.0;
  for (double v : r.curve) mean += v;
  EXPECT_NEAR(mean / 4.0, r.mse, 1e-9);
  EXPECT_EQ(evaluate(m, ds, data::Split::Test, 7).mse, r.mse);
  // The untrained residual stage starts from the good beginning exactly.
  EXPECT_NEAR(evaluate_stage1(m, ds, data::Split::Test).mse, r.mse, 1e-12);
}

TEST(Diagnostics, ZeroRegimeIsBitZeroForEveryDraw) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const DegeneracyReport rep = zero_init_diagnostic(16, 0, 8, DiagnosticRegime::Zero, seed);
    ASSERT_EQ(rep.max_abs_prediction_blocks, 0.0) << seed;
    EXPECT_EQ(rep.verdict, "degenerate (exact zeros)");
  }
}

TEST(Diagnostics, StartTokenGivesIdenticalPredictionRows) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const DegeneracyReport rep = zero_init_diagnostic(16, 4, 8, DiagnosticRegime::StartToken, seed);
    EXPECT_GT(rep.max_abs_token_block, 0.0);
    EXPECT_EQ(rep.prediction_row_spread, 0.0) << seed;
    EXPECT_EQ(rep.verdict, "degenerate (identical prediction rows)");
  }
  // Without projection bias the prediction queries vanish too.
  const DegeneracyReport nb = zero_init_diagnostic(16, 4, 8, DiagnosticRegime::StartToken, 1, false);
  EXPECT_EQ(nb.prediction_row_spread, 0.0);
}

TEST(Diagnostics, PositionEmbeddingDrivesPredictionScores) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const DegeneracyReport rep = zero_init_diagnostic(16, 4, 8, DiagnosticRegime::StartTokenPosEmb, seed);
    EXPECT_GT(rep.prediction_row_spread, 0.0);
    EXPECT_LT(rep.posemb_recompute_diff, 1e-12) << seed;
  }
}

TEST(Diagnostics, RegimeNamesRoundTrip) {
  for (auto r : {DiagnosticRegime::Zero, DiagnosticRegime::StartToken, DiagnosticRegime::StartTokenPosEmb})
    EXPECT_EQ(parse_regime(regime_name(r)), r);
  EXPECT_THROW(parse_regime("random"), ConfigError);
  EXPECT_THROW(zero_init_diagnostic(0, 1, 1, DiagnosticRegime::Zero, 0), ConfigError);
}
