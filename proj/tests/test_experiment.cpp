#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "support.hpp"

using namespace feri;

namespace {

std::string small_config_text(const std::string& out_dir, std::size_t epochs = 6,
                              const std::string& source = "data.source = synth\nsynth.total = 250\n") {
  return source +
         "model.embed_dim = 2\n"
         "model.hidden = 8\n"
         "model.head = 4\n"
         "train.epochs = " +
         std::to_string(epochs) +
         "\n"
         "cv.k = 5\n"
         "seed = 7\n"
         "arms = baseline, feri\n"
         "out_dir = " +
         out_dir + "\n";
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> rows_of(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) rows.push_back(csv::split(line));
  return rows;
}

}  // namespace

TEST(Config, ParsesEveryKey) {
  const auto cfg = parse_config(
      "# comment\n"
      "data.source = synth\n"
      "attribute = race\n"
      "synth.groups = A, B, C\n"
      "synth.counts = 100, 60, 40\n"
      "synth.rates = 0.5, 0.4, 0.3\n"
      "synth.signal = 1, 0.8, 0.6\n"
      "synth.tilt = 0.5, 0.5, 0.5\n"
      "synth.offset = 0, 0.2, 0.4\n"
      "synth.twist = 0, 0.5, 1\n"
      "synth.cardinalities = 3, 3\n"
      "synth.continuous = 4\n"
      "synth.noise = 0.7\n"
      "synth.missing_rate = 0.1\n"
      "synth.seed = 99\n"
      "model.embed_dim = 4\n"
      "model.hidden = 16, 8\n"
      "model.head = \n"
      "opt.alpha = 0.02\n"
      "opt.beta = 0.11\n"
      "opt.gamma = 1e-7\n"
      "opt.epsilon = 1e-9\n"
      "opt.max_grad_norm = 2\n"
      "train.epochs = 12\n"
      "cv.k = 4\n"
      "seed = 5\n"
      "arms = feri\n"
      "out_dir = somewhere\n"
      "eval.threshold = 0.4\n"
      "grid.gamma = 1e-6\n"
      "grid.beta = 0.1, 0.2\n");
  EXPECT_EQ(cfg.attribute, "race");
  ASSERT_EQ(cfg.synth.groups.size(), 3u);
  EXPECT_EQ(cfg.synth.groups[2].name, "C");
  EXPECT_EQ(cfg.synth.groups[1].count, 60u);
  EXPECT_EQ(cfg.synth.groups[2].twist, 1.0);
  EXPECT_EQ(cfg.synth.groups[1].offset, 0.2);
  EXPECT_EQ(cfg.synth.cat_cardinalities, (std::vector<std::size_t>{3, 3}));
  EXPECT_TRUE(cfg.synth_seed_explicit);
  EXPECT_EQ(cfg.synth.attribute_name, "race");
  EXPECT_EQ(cfg.model.hidden, (std::vector<std::size_t>{16, 8}));
  EXPECT_TRUE(cfg.model.head.empty());
  EXPECT_EQ(cfg.hyper.beta, 0.11);
  EXPECT_EQ(cfg.hyper.epsilon, 1e-9);
  EXPECT_EQ(cfg.epochs, 12u);
  EXPECT_EQ(cfg.k, 4u);
  EXPECT_EQ(cfg.arms, (std::vector<Arm>{Arm::Feri}));
  EXPECT_EQ(cfg.threshold, 0.4);
  EXPECT_EQ(cfg.grid_beta, (std::vector<double>{0.1, 0.2}));
  EXPECT_NO_THROW(cfg.validate());
}

TEST(Config, Defaults) {
  const auto cfg = parse_config("");
  EXPECT_EQ(cfg.epochs, 300u);
  EXPECT_EQ(cfg.k, 5u);
  EXPECT_EQ(cfg.seed, 42u);
  EXPECT_EQ(cfg.synth.groups.size(), 2u);
  EXPECT_EQ(cfg.grid_gamma.size() * cfg.grid_beta.size(), 40u);
  EXPECT_EQ(cfg.grid_beta, (std::vector<double>{0.05, 0.08, 0.10, 0.11, 0.15}));
  EXPECT_EQ(cfg.grid_gamma.front(), 1e-9);
  EXPECT_EQ(cfg.grid_gamma.back(), 1e-2);
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("opt.alhpa = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("seed 4\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = 1\nseed = 2\n"), ConfigError);
  EXPECT_THROW(parse_config("train.epochs = 2.5\n"), ConfigError);
  EXPECT_THROW(parse_config("arms = baseline, other\n"), ConfigError);
  EXPECT_THROW(parse_config("synth.rates = 0.3\n"), ConfigError);
  EXPECT_THROW(parse_config("train.epochs = 0\n").validate(), ConfigError);
  EXPECT_THROW(parse_config("arms = \n").validate(), ConfigError);
  EXPECT_THROW(parse_config("data.source = csv\ndata.path = /nonexistent/x.csv\n").validate(), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.conf"), ConfigError);
}

TEST(Seeds, DerivedStreamsDiffer) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 200; ++s) seen.insert(derive_seed(42, s));
  EXPECT_EQ(seen.size(), 200u);
  EXPECT_EQ(derive_seed(42, 3), derive_seed(42, 3));
  EXPECT_NE(derive_seed(42, 3), derive_seed(43, 3));
}

TEST(Experiment, ResultsTableShape) {
  const auto dir = feri::testing::scratch_dir("shape");
  const auto cfg = parse_config(small_config_text(dir.string()));
  const auto res = run_experiment(cfg);
  write_artifacts(cfg, res);
  for (const char* f : {"trace.csv", "results.csv", "accuracy.csv", "summary.txt"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;

  const auto rows = rows_of(slurp(dir / "results.csv"));
  ASSERT_EQ(rows.size(), 1u + 2 * 5 + 2 * 2 + 1);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"arm", "fold", "demographic_parity", "equalized_odds", "status"}));
  std::size_t fold_rows = 0;
  for (const auto& r : rows)
    if (r[1] != "fold" && r[1] != "mean" && r[1] != "sd") ++fold_rows;
  EXPECT_EQ(fold_rows, 10u);
  EXPECT_EQ(rows.back()[0], "reduction");

  const auto acc = rows_of(slurp(dir / "accuracy.csv"));
  EXPECT_EQ(acc.size(), 1u + 2 * 5 * 2 + 2 * 2 * 2);
}

TEST(Experiment, SummaryRowsMatchFoldValues) {
  const auto dir = feri::testing::scratch_dir("consistency");
  const auto cfg = parse_config(small_config_text(dir.string()));
  const auto res = run_experiment(cfg);
  write_artifacts(cfg, res);
  const auto rows = rows_of(slurp(dir / "results.csv"));
  std::map<std::string, std::vector<double>> dp, eo;
  std::map<std::string, std::pair<double, double>> mean, sd;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r[0] == "reduction") continue;
    const double d = *csv::parse_double(r[2]), e = *csv::parse_double(r[3]);
    if (r[1] == "mean") mean[r[0]] = {d, e};
    else if (r[1] == "sd") sd[r[0]] = {d, e};
    else {
      dp[r[0]].push_back(d);
      eo[r[0]].push_back(e);
    }
  }
  for (const char* arm : {"baseline", "feri"}) {
    ASSERT_EQ(dp[arm].size(), 5u);
    const auto m = mean_sd(dp[arm]), n = mean_sd(eo[arm]);
    EXPECT_NEAR(mean[arm].first, m.mean, 1e-12);
    EXPECT_NEAR(sd[arm].first, m.sd, 1e-12);
    EXPECT_NEAR(mean[arm].second, n.mean, 1e-12);
    EXPECT_NEAR(sd[arm].second, n.sd, 1e-12);
  }
  const auto& red = rows.back();
  EXPECT_EQ(red[2], format_percent(percent_reduction(mean["baseline"].first, mean["feri"].first)));
}

TEST(Experiment, ArtifactsAreByteIdenticalAcrossRunsAndThreadCounts) {
  const auto a = feri::testing::scratch_dir("det_a");
  const auto b = feri::testing::scratch_dir("det_b");
  auto ca = parse_config(small_config_text(a.string()));
  auto cb = parse_config(small_config_text(b.string()));
  write_artifacts(ca, run_experiment(ca));
  setenv("FERI_THREADS", "1", 1);
  write_artifacts(cb, run_experiment(cb));
  unsetenv("FERI_THREADS");
  for (const char* f : {"trace.csv", "results.csv", "accuracy.csv"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  auto sa = slurp(a / "summary.txt"), sb = slurp(b / "summary.txt");
  EXPECT_EQ(sa, sb);
}

TEST(Experiment, MetricsUseOnlyTestIndices) {
  const auto dir = feri::testing::scratch_dir("leak");
  const auto cfg = parse_config(small_config_text(dir.string(), 2));
  const auto res = run_experiment(cfg);
  const Dataset raw = load_experiment_data(cfg);
  const auto plan = kfold_split(raw, cfg.k, derive_seed(cfg.seed, seed_stream::kSplit));
  for (const auto& r : res.runs) {
    const auto& fold = plan.folds[r.fold - 1];
    EXPECT_EQ(r.evaluated_indices, fold.test);
    EXPECT_EQ(r.train_indices, fold.train);
    const std::set<std::size_t> train(r.train_indices.begin(), r.train_indices.end());
    for (std::size_t i : r.evaluated_indices) EXPECT_FALSE(train.count(i));
  }
  const auto val = run_experiment(cfg, EvalSplit::Validation);
  for (const auto& r : val.runs) EXPECT_EQ(r.evaluated_indices, plan.folds[r.fold - 1].validation);
}

TEST(Experiment, ArmsShareInitialization) {
  const auto dir = feri::testing::scratch_dir("shared");
  const auto cfg = parse_config(small_config_text(dir.string(), 1));
  const auto res = run_experiment(cfg);
  // Epoch-0 losses are computed before any update, so they agree across arms.
  std::map<std::tuple<std::size_t, std::size_t>, double> base;
  for (const auto& t : res.trace)
    if (t.arm == Arm::Baseline) base[{t.fold, t.task}] = t.loss;
  for (const auto& t : res.trace)
    if (t.arm == Arm::Feri) EXPECT_EQ(t.loss, (base[{t.fold, t.task}]));
}

TEST(Trace, RowsWeightsAndRoundTrip) {
  const auto dir = feri::testing::scratch_dir("trace");
  auto cfg = parse_config(small_config_text(dir.string(), 4));
  const auto res = run_experiment(cfg);
  write_artifacts(cfg, res);
  const auto back = parse_trace((dir / "trace.csv").string());
  ASSERT_EQ(back.size(), 2u * 5 * 4 * 2);
  std::map<std::tuple<int, std::size_t, std::size_t>, double> wsum;
  for (const auto& r : back) {
    wsum[{static_cast<int>(r.arm), r.fold, r.epoch}] += r.weight;
    if (r.arm == Arm::Baseline || r.epoch == 0) EXPECT_EQ(r.weight, 0.5);
  }
  for (const auto& [key, s] : wsum) EXPECT_NEAR(s, 1.0, 1e-8);
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].arm, res.trace[i].arm);
    EXPECT_EQ(back[i].epoch, res.trace[i].epoch);
    EXPECT_NEAR(back[i].loss, res.trace[i].loss, 1e-8 * res.trace[i].loss);
  }
  for (std::size_t i = 1; i < back.size(); ++i) {
    const auto& a = back[i - 1];
    const auto& b = back[i];
    EXPECT_LT(std::tie(a.arm, a.fold, a.epoch, a.task), std::tie(b.arm, b.fold, b.epoch, b.task));
  }
  // Re-exporting the parsed trace reproduces the file.
  export_trace(back, (dir / "again.csv").string());
  EXPECT_EQ(slurp(dir / "trace.csv"), slurp(dir / "again.csv"));
  EXPECT_THROW(export_trace({}, (dir / "x.csv").string()), ContractError);
  EXPECT_THROW(export_trace(back, (dir / "no" / "such" / "dir.csv").string()), DataError);
}

TEST(Experiment, DivergenceBecomesFailureRow) {
  const auto dir = feri::testing::scratch_dir("diverge");
  auto cfg = parse_config(small_config_text(dir.string(), 3) + "opt.alpha = 1e308\nopt.max_grad_norm = 1e308\n");
  const auto res = run_experiment(cfg);
  write_artifacts(cfg, res);
  std::size_t failed = 0;
  for (const auto& r : res.runs)
    if (!r.ok) {
      ++failed;
      EXPECT_NE(r.status.find("diverged"), std::string::npos) << r.status;
    }
  EXPECT_GT(failed, 0u);
  EXPECT_NE(slurp(dir / "results.csv").find("diverged"), std::string::npos);
}

TEST(Experiment, CsvSourceMatchesSyntheticSource) {
  const auto dir = feri::testing::scratch_dir("csvsource");
  const auto synth_cfg = parse_config(small_config_text((dir / "a").string(), 2));
  const Dataset ds = load_experiment_data(synth_cfg);
  const auto path = (dir / "cohort.csv").string();
  write_csv(ds, path);
  write_vocabulary(ds.vocabulary, ds.schema, vocabulary_path(path));
  std::string cats, conts;
  for (const auto& c : ds.schema.categorical)
    cats += (cats.empty() ? "" : ", ") + c.name + ":" + std::to_string(c.cardinality);
  for (const auto& c : ds.schema.continuous) conts += (conts.empty() ? "" : ", ") + c;
  const auto csv_cfg = parse_config(small_config_text(
      (dir / "b").string(), 2,
      "data.source = csv\ndata.path = " + path + "\ndata.vocab = " + vocabulary_path(path) +
          "\ndata.categorical = " + cats + "\ndata.continuous = " + conts + "\ndata.groups = Adult, Pediatric\n"));
  EXPECT_EQ(load_experiment_data(csv_cfg), ds);
  write_artifacts(synth_cfg, run_experiment(synth_cfg));
  write_artifacts(csv_cfg, run_experiment(csv_cfg));
  EXPECT_EQ(slurp(dir / "a" / "results.csv"), slurp(dir / "b" / "results.csv"));
}

TEST(Grid, RankingAndTieBreaks) {
  std::vector<GridPoint> pts(5);
  pts[0] = {1e-6, 0.10, true, "ok", 0.1, 0.20, 0.80, 0.7, 0};
  pts[1] = {1e-7, 0.10, true, "ok", 0.1, 0.20, 0.80, 0.7, 0};
  pts[2] = {1e-7, 0.05, true, "ok", 0.1, 0.20, 0.80, 0.7, 0};
  pts[3] = {1e-9, 0.15, true, "ok", 0.1, 0.20, 0.85, 0.7, 0};
  pts[4] = {1e-9, 0.05, false, "diverged", 0, 0, 0, 0, 0};
  rank_grid(pts);
  EXPECT_EQ(pts[0].gamma, 1e-9);  // higher AUROC wins the EO tie
  EXPECT_EQ(pts[1].gamma, 1e-7);
  EXPECT_EQ(pts[1].beta, 0.05);
  EXPECT_EQ(pts[2].beta, 0.10);
  EXPECT_EQ(pts[2].gamma, 1e-7);
  EXPECT_EQ(pts[3].gamma, 1e-6);
  EXPECT_FALSE(pts[4].ok);
  for (std::size_t i = 0; i < pts.size(); ++i) EXPECT_EQ(pts[i].rank, i + 1);
}

TEST(Grid, SinglePointMatchesValidationRun) {
  const auto dir = feri::testing::scratch_dir("grid1");
  auto cfg = parse_config(small_config_text(dir.string(), 3) + "grid.gamma = 1e-6\ngrid.beta = 0.1\n");
  const auto pts = grid_search(cfg);
  ASSERT_EQ(pts.size(), 1u);
  EXPECT_EQ(pts[0].rank, 1u);
  auto single = cfg;
  single.arms = {Arm::Feri};
  single.hyper.gamma = 1e-6;
  single.hyper.beta = 0.1;
  const auto res = run_experiment(single, EvalSplit::Validation);
  EXPECT_EQ(pts[0].equalized_odds, res.summary(Arm::Feri)->equalized_odds.mean);
  EXPECT_EQ(pts[0].demographic_parity, res.summary(Arm::Feri)->demographic_parity.mean);
  write_grid(cfg, pts);
  const auto rows = rows_of(slurp(dir / "grid.csv"));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0][0], "rank");
}

TEST(Grid, PerPointFailuresAreRecorded) {
  const auto dir = feri::testing::scratch_dir("gridfail");
  auto cfg = parse_config(small_config_text(dir.string(), 2) + "grid.gamma = 1e-6, -1\ngrid.beta = 0.1\n");
  const auto pts = grid_search(cfg);
  ASSERT_EQ(pts.size(), 2u);
  EXPECT_TRUE(pts[0].ok);
  EXPECT_FALSE(pts[1].ok);
  EXPECT_NE(pts[1].status.find("gamma"), std::string::npos);
}

TEST(Parallel, EveryIndexRunsOnceAndErrorsPropagate) {
  std::vector<std::atomic<int>> hits(100);
  parallel_for(100, [&](std::size_t i) { ++hits[i]; }, 4);
  for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
  EXPECT_THROW(parallel_for(
                   10, [](std::size_t i) { if (i == 3) throw DataError("boom"); }, 3),
               DataError);
}
