#pragma once

// Cross-validated comparison of the averaged-loss baseline and the FERI
// optimizer: configuration, per-fold training, reports and grid search.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "feri/dataio.hpp"
#include "feri/metrics.hpp"
#include "feri/optim.hpp"
#include "feri/tabmodel.hpp"

namespace feri {

enum class Arm { Baseline, Feri };

inline const char* arm_name(Arm a) { return a == Arm::Baseline ? "baseline" : "feri"; }

inline Arm parse_arm(const std::string& s) {
  if (s == "baseline") return Arm::Baseline;
  if (s == "feri") return Arm::Feri;
  throw ConfigError("unknown arm '" + s + "' (expected baseline or feri)");
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class DataSource { Synth, Csv };

struct ExperimentConfig {
  DataSource source = DataSource::Synth;
  std::string data_path;
  std::string vocab_path;                   // optional sidecar for csv input
  FeatureSchema csv_schema;
  std::vector<std::string> csv_groups;      // optional fixed group order
  bool csv_strict = false;
  SynthSpec synth = default_synth_spec();
  bool synth_seed_explicit = false;         // otherwise derived from the master seed
  std::string attribute = "age_group";
  ModelConfig model;
  FeriHyper hyper;
  std::size_t epochs = 300;
  std::size_t k = 5;
  std::uint64_t seed = 42;
  std::vector<Arm> arms{Arm::Baseline, Arm::Feri};
  std::string out_dir = "out";
  double threshold = 0.5;
  std::vector<double> grid_gamma{1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2};
  std::vector<double> grid_beta{0.05, 0.08, 0.10, 0.11, 0.15};

  void validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (arms.empty()) throw ConfigError("arms: select at least one arm");
    if (k < 3) throw ConfigError("cv.k must be >= 3");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("eval.threshold must lie in (0, 1)");
    hyper.validate();
    if (source == DataSource::Csv) {
      if (data_path.empty()) throw ConfigError("data.path is required when data.source = csv");
      if (!std::filesystem::exists(data_path)) throw ConfigError("data.path '" + data_path + "' does not exist");
      if (!vocab_path.empty() && !std::filesystem::exists(vocab_path))
        throw ConfigError("data.vocab '" + vocab_path + "' does not exist");
      csv_schema.validate();
    } else {
      synth.validate();
    }
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  const auto d = csv::parse_double(v);
  if (!d) throw ConfigError(key + ": '" + v + "' is not a number");
  return *d;
}

inline std::size_t to_count(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d < 0 || d != std::floor(d) || d > 1e15) throw ConfigError(key + ": '" + v + "' is not a non-negative integer");
  return static_cast<std::size_t>(d);
}

inline std::vector<double> to_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& item : split_list(v)) out.push_back(to_double(key, item));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

inline std::vector<std::size_t> to_counts(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(v)) out.push_back(to_count(key, item));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": '" + v + "' is not a boolean");
}

}  // namespace detail

// Flat `key = value` text; '#' starts a comment line. Unknown keys are errors.
inline ExperimentConfig parse_config(std::string_view text) {
  using namespace detail;
  ExperimentConfig cfg;
  std::map<std::string, std::string> kv;
  std::size_t line_no = 0;
  std::stringstream ss{std::string(text)};
  std::string line;
  while (std::getline(ss, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    if (!kv.emplace(key, trim(std::string_view(t).substr(eq + 1))).second)
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
  }

  // synth.total resizes the default groups before any other synth.* key applies;
  // per-group vectors are applied once the group list is known.
  if (auto it = kv.find("synth.total"); it != kv.end()) cfg.synth = default_synth_spec(to_count(it->first, it->second));
  std::map<std::string, std::vector<double>> synth_vectors;
  for (const auto& [key, v] : kv) {
    if (key == "data.source") {
      if (v == "synth") cfg.source = DataSource::Synth;
      else if (v == "csv") cfg.source = DataSource::Csv;
      else throw ConfigError("data.source must be synth or csv");
    } else if (key == "data.path") {
      cfg.data_path = v;
    } else if (key == "data.vocab") {
      cfg.vocab_path = v;
    } else if (key == "data.categorical") {
      // name:cardinality, ...
      for (const auto& item : split_list(v)) {
        const auto colon = item.rfind(':');
        if (colon == std::string::npos) throw ConfigError("data.categorical: expected name:cardinality, got '" + item + "'");
        cfg.csv_schema.categorical.push_back({trim(item.substr(0, colon)), to_count(key, trim(item.substr(colon + 1)))});
      }
    } else if (key == "data.continuous") {
      cfg.csv_schema.continuous = split_list(v);
    } else if (key == "data.groups") {
      cfg.csv_groups = split_list(v);
    } else if (key == "data.strict") {
      cfg.csv_strict = to_bool(key, v);
    } else if (key == "attribute") {
      cfg.attribute = v;
    } else if (key == "model.embed_dim") {
      cfg.model.embed_dim = to_count(key, v);
    } else if (key == "model.hidden") {
      cfg.model.hidden = to_counts(key, v);
    } else if (key == "model.head") {
      cfg.model.head = v.empty() ? std::vector<std::size_t>{} : to_counts(key, v);
    } else if (key == "opt.alpha") {
      cfg.hyper.alpha = to_double(key, v);
    } else if (key == "opt.beta") {
      cfg.hyper.beta = to_double(key, v);
    } else if (key == "opt.gamma") {
      cfg.hyper.gamma = to_double(key, v);
    } else if (key == "opt.epsilon") {
      cfg.hyper.epsilon = to_double(key, v);
    } else if (key == "opt.max_grad_norm") {
      cfg.hyper.max_grad_norm = to_double(key, v);
    } else if (key == "train.epochs") {
      cfg.epochs = to_count(key, v);
    } else if (key == "cv.k") {
      cfg.k = to_count(key, v);
    } else if (key == "seed") {
      cfg.seed = to_count(key, v);
    } else if (key == "arms") {
      cfg.arms.clear();
      for (const auto& a : split_list(v)) {
        const Arm arm = parse_arm(a);
        if (std::find(cfg.arms.begin(), cfg.arms.end(), arm) == cfg.arms.end()) cfg.arms.push_back(arm);
      }
      std::sort(cfg.arms.begin(), cfg.arms.end());
    } else if (key == "out_dir") {
      cfg.out_dir = v;
    } else if (key == "eval.threshold") {
      cfg.threshold = to_double(key, v);
    } else if (key == "grid.gamma") {
      cfg.grid_gamma = to_doubles(key, v);
    } else if (key == "grid.beta") {
      cfg.grid_beta = to_doubles(key, v);
    } else if (key == "synth.total" || key == "synth.groups") {
      // applied below
    } else if (key == "synth.counts" || key == "synth.rates" || key == "synth.signal" || key == "synth.tilt" ||
               key == "synth.offset" || key == "synth.twist") {
      synth_vectors[key] = to_doubles(key, v);
    } else if (key == "synth.cardinalities") {
      cfg.synth.cat_cardinalities = to_counts(key, v);
    } else if (key == "synth.continuous") {
      cfg.synth.num_continuous = to_count(key, v);
    } else if (key == "synth.noise") {
      cfg.synth.noise = to_double(key, v);
    } else if (key == "synth.missing_rate") {
      cfg.synth.missing_rate = to_double(key, v);
    } else if (key == "synth.seed") {
      cfg.synth.seed = to_count(key, v);
      cfg.synth_seed_explicit = true;
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }

  if (auto it = kv.find("synth.groups"); it != kv.end()) {
    const auto names = split_list(it->second);
    if (names.empty()) throw ConfigError("synth.groups: empty list");
    auto& groups = cfg.synth.groups;
    groups.resize(names.size());
    for (std::size_t g = 0; g < names.size(); ++g) groups[g].name = names[g];
  }
  auto apply = [&](const std::string& key, auto setter) {
    auto it = synth_vectors.find(key);
    if (it == synth_vectors.end()) return;
    if (it->second.size() != cfg.synth.groups.size())
      throw ConfigError(key + ": expected " + std::to_string(cfg.synth.groups.size()) + " values, one per group");
    for (std::size_t g = 0; g < it->second.size(); ++g) setter(cfg.synth.groups[g], it->second[g]);
  };
  apply("synth.counts", [&](SynthGroup& g, double v) {
    if (v < 0 || v != std::floor(v)) throw ConfigError("synth.counts: counts must be integers");
    g.count = static_cast<std::size_t>(v);
  });
  apply("synth.rates", [](SynthGroup& g, double v) { g.positive_rate = v; });
  apply("synth.signal", [](SynthGroup& g, double v) { g.signal = v; });
  apply("synth.tilt", [](SynthGroup& g, double v) { g.tilt = v; });
  apply("synth.offset", [](SynthGroup& g, double v) { g.offset = v; });
  apply("synth.twist", [](SynthGroup& g, double v) { g.twist = v; });
  cfg.synth.attribute_name = cfg.attribute;
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// ---------------------------------------------------------------------------
// Seeds
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Independent stream `stream` of the master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  return splitmix64(splitmix64(master) ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
}

namespace seed_stream {
inline constexpr std::uint64_t kData = 1;
inline constexpr std::uint64_t kSplit = 2;
inline constexpr std::uint64_t kInitBase = 100;  // + fold index; shared by both arms
}  // namespace seed_stream

// ---------------------------------------------------------------------------
// Parallelism
// ---------------------------------------------------------------------------

// FERI_THREADS caps the number of workers; defaults to the hardware concurrency.
inline std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("FERI_THREADS")) {
    const auto v = csv::parse_double(env);
    if (v && *v >= 1) n = std::min(n, static_cast<std::size_t>(*v));
  }
  return n;
}

// Runs body(i) for i in [0, n) on up to `threads` threads; rethrows the first
// exception by index after all workers finish.
template <typename Body>
void parallel_for(std::size_t n, Body&& body, std::size_t threads = worker_count()) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        body(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::min(std::max<std::size_t>(threads, 1), n);
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

struct TraceRow {
  Arm arm = Arm::Baseline;
  std::size_t fold = 1;  // 1-based
  std::size_t epoch = 0;
  std::size_t task = 0;
  double loss = 0.0;
  double weight = 0.0;

  friend bool operator==(const TraceRow&, const TraceRow&) = default;
};

using TrainingTrace = std::vector<TraceRow>;

enum class EvalSplit { Test, Validation };

struct RunRecord {
  Arm arm = Arm::Baseline;
  std::size_t fold = 1;  // 1-based
  bool ok = true;
  std::string status = "ok";
  double demographic_parity = std::numeric_limits<double>::quiet_NaN();
  double equalized_odds = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> positive_rates, tprs, fprs;
  std::vector<double> auroc, auprc;            // per subgroup
  std::vector<double> final_train_loss;        // per task, at the end of training
  std::vector<double> final_eval_loss;         // per task, on the evaluated split
  std::vector<double> final_weights;           // z after the last epoch
  std::vector<std::size_t> train_indices;      // dataset indices used for fitting
  std::vector<std::size_t> evaluated_indices;  // dataset indices scored for metrics
  TrainingTrace trace;
};

struct ArmSummary {
  Arm arm = Arm::Baseline;
  std::size_t folds_ok = 0;
  MeanSd demographic_parity, equalized_odds;
  std::vector<MeanSd> auroc, auprc;  // per subgroup
};

struct ExperimentResult {
  std::vector<std::string> group_names;
  std::string attribute;
  std::vector<RunRecord> runs;  // sorted by (arm, fold)
  std::vector<ArmSummary> summaries;
  TrainingTrace trace;          // sorted by (arm, fold, epoch, task)

  const ArmSummary* summary(Arm a) const {
    for (const auto& s : summaries)
      if (s.arm == a) return &s;
    return nullptr;
  }
};

inline Dataset load_experiment_data(const ExperimentConfig& cfg) {
  if (cfg.source == DataSource::Csv) {
    LoadOptions opt;
    if (!cfg.vocab_path.empty()) opt.vocabulary = read_vocabulary(cfg.vocab_path, cfg.csv_schema);
    opt.strict = cfg.csv_strict;
    opt.group_names = cfg.csv_groups;
    return load_csv(cfg.data_path, cfg.csv_schema, cfg.attribute, opt);
  }
  SynthSpec spec = cfg.synth;
  spec.attribute_name = cfg.attribute;
  if (!cfg.synth_seed_explicit) spec.seed = derive_seed(cfg.seed, seed_stream::kData);
  return synth_generate(spec);
}

namespace detail {

inline RunRecord run_single(const ExperimentConfig& cfg, const Dataset& raw, const Fold& fold, std::size_t fold_idx,
                            Arm arm, EvalSplit split) {
  RunRecord rec;
  rec.arm = arm;
  rec.fold = fold_idx + 1;
  rec.train_indices = fold.train;
  rec.evaluated_indices = split == EvalSplit::Test ? fold.test : fold.validation;

  const auto stats = fit_standardization(raw, fold.train);
  const Dataset train = standardize(subset(raw, fold.train), stats);
  const Dataset eval = standardize(subset(raw, rec.evaluated_indices), stats);

  ModelConfig mc = cfg.model;
  mc.num_tasks = raw.num_groups();
  ModelParams params = init_params(raw.schema, mc, derive_seed(cfg.seed, seed_stream::kInitBase + fold_idx));
  MultitaskObjective objective(params, train);
  FeriState state(mc.num_tasks, cfg.hyper);

  try {
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
      const EpochResult r = arm == Arm::Feri
                                ? train_epoch_feri(params, state, objective)
                                : train_epoch_baseline(params, objective, cfg.hyper.alpha, cfg.hyper.max_grad_norm, e);
      for (std::size_t m = 0; m < mc.num_tasks; ++m)
        rec.trace.push_back({arm, rec.fold, e, m, r.losses_before[m], r.weights_used[m]});
    }
    rec.final_train_loss = objective.losses(params);
    rec.final_weights = arm == Arm::Feri ? softmax_weights(state.logits)
                                         : std::vector<double>(mc.num_tasks, 1.0 / static_cast<double>(mc.num_tasks));

    ScoredPredictions preds;
    preds.num_groups = raw.num_groups();
    preds.threshold = cfg.threshold;
    for (std::size_t m = 0; m < mc.num_tasks; ++m) {
      const auto samples = task_samples(eval, m);
      if (samples.empty()) throw EmptyTaskError(m);
      TaskGraph graph(params, samples, m);
      const auto probs = graph.probabilities(params);
      rec.final_eval_loss.push_back(graph.loss(params));
      std::vector<int> labels;
      for (const auto& s : samples) labels.push_back(s.label);
      rec.auroc.push_back(auroc(probs, labels));
      rec.auprc.push_back(auprc(probs, labels));
      for (std::size_t i = 0; i < samples.size(); ++i) {
        preds.scores.push_back(probs[i]);
        preds.labels.push_back(labels[i]);
        preds.groups.push_back(m);
      }
    }
    const FairnessReport rep = fairness_report(preds);
    rec.demographic_parity = rep.demographic_parity;
    rec.equalized_odds = rep.equalized_odds;
    rec.positive_rates = rep.positive_rates;
    rec.tprs = rep.tprs;
    rec.fprs = rep.fprs;
  } catch (const DivergenceError& e) {
    rec.ok = false;
    rec.status = std::string("diverged: ") + e.what();
  } catch (const UndefinedMetricError& e) {
    rec.ok = false;
    rec.status = std::string("undefined metric: ") + e.what();
  }
  return rec;
}

inline ArmSummary summarize(Arm arm, const std::vector<RunRecord>& runs, std::size_t num_groups) {
  ArmSummary s;
  s.arm = arm;
  std::vector<double> dp, eo;
  std::vector<std::vector<double>> roc(num_groups), pr(num_groups);
  for (const auto& r : runs) {
    if (r.arm != arm || !r.ok) continue;
    dp.push_back(r.demographic_parity);
    eo.push_back(r.equalized_odds);
    for (std::size_t g = 0; g < num_groups; ++g) {
      roc[g].push_back(r.auroc[g]);
      pr[g].push_back(r.auprc[g]);
    }
  }
  s.folds_ok = dp.size();
  if (dp.empty()) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    s.demographic_parity = s.equalized_odds = {nan, nan};
    s.auroc.assign(num_groups, {nan, nan});
    s.auprc.assign(num_groups, {nan, nan});
    return s;
  }
  s.demographic_parity = mean_sd(dp);
  s.equalized_odds = mean_sd(eo);
  for (std::size_t g = 0; g < num_groups; ++g) {
    s.auroc.push_back(mean_sd(roc[g]));
    s.auprc.push_back(mean_sd(pr[g]));
  }
  return s;
}

}  // namespace detail

// Trains every (fold, arm) pair and scores the chosen split. Deterministic for a
// fixed config regardless of thread count.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, EvalSplit split = EvalSplit::Test) {
  cfg.validate();
  const Dataset raw = load_experiment_data(cfg);
  const FoldPlan plan = kfold_split(raw, cfg.k, derive_seed(cfg.seed, seed_stream::kSplit));

  struct Job {
    std::size_t fold;
    Arm arm;
  };
  std::vector<Job> jobs;
  for (Arm a : cfg.arms)
    for (std::size_t f = 0; f < cfg.k; ++f) jobs.push_back({f, a});

  ExperimentResult res;
  res.group_names = raw.group_names;
  res.attribute = raw.attribute_name;
  res.runs.resize(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t i) {
    res.runs[i] = detail::run_single(cfg, raw, plan.folds[jobs[i].fold], jobs[i].fold, jobs[i].arm, split);
  });
  std::sort(res.runs.begin(), res.runs.end(),
            [](const RunRecord& a, const RunRecord& b) { return std::tie(a.arm, a.fold) < std::tie(b.arm, b.fold); });
  for (Arm a : cfg.arms) res.summaries.push_back(detail::summarize(a, res.runs, raw.num_groups()));
  for (const auto& r : res.runs) res.trace.insert(res.trace.end(), r.trace.begin(), r.trace.end());
  return res;
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

inline std::string fmt_value(double v) { return std::isnan(v) ? std::string("nan") : csv::format_double(v); }

inline std::string fmt_fixed(double v, int decimals = 4) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

inline void export_trace(const TrainingTrace& trace, const std::string& path) {
  if (trace.empty()) throw ContractError("export_trace: empty trace");
  TrainingTrace rows = trace;
  std::sort(rows.begin(), rows.end(), [](const TraceRow& a, const TraceRow& b) {
    return std::tie(a.arm, a.fold, a.epoch, a.task) < std::tie(b.arm, b.fold, b.epoch, b.task);
  });
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << "arm,fold,epoch,task,loss,weight\n";
  for (const auto& r : rows)
    out << arm_name(r.arm) << ',' << r.fold << ',' << r.epoch << ',' << r.task << ',' << csv::format_double(r.loss, 9)
        << ',' << csv::format_double(r.weight, 9) << '\n';
  if (!out) throw DataError("failed writing '" + path + "'");
}

inline TrainingTrace parse_trace(const std::string& path) {
  const auto lines = csv::read_lines(path);
  if (lines.empty() || lines[0] != "arm,fold,epoch,task,loss,weight")
    throw DataError("'" + path + "': expected header arm,fold,epoch,task,loss,weight");
  TrainingTrace trace;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = csv::split(lines[i], i + 1);
    if (f.size() != 6) throw DataError("trace line " + std::to_string(i + 1) + ": expected 6 fields");
    TraceRow r;
    r.arm = parse_arm(f[0]);
    const auto fold = csv::parse_double(f[1]), epoch = csv::parse_double(f[2]), task = csv::parse_double(f[3]);
    const auto loss = csv::parse_double(f[4]), weight = csv::parse_double(f[5]);
    if (!fold || !epoch || !task || !loss || !weight) throw DataError("trace line " + std::to_string(i + 1) + ": bad number");
    r.fold = static_cast<std::size_t>(*fold);
    r.epoch = static_cast<std::size_t>(*epoch);
    r.task = static_cast<std::size_t>(*task);
    r.loss = *loss;
    r.weight = *weight;
    trace.push_back(r);
  }
  return trace;
}

// Fairness table: one row per (arm, fold), then mean and sd rows per arm, then
// the percent reduction of FERI relative to the baseline when both arms ran.
inline std::string results_csv(const ExperimentResult& res) {
  std::ostringstream out;
  out << "arm,fold,demographic_parity,equalized_odds,status\n";
  for (const auto& s : res.summaries) {
    for (const auto& r : res.runs)
      if (r.arm == s.arm)
        out << arm_name(r.arm) << ',' << r.fold << ',' << fmt_value(r.demographic_parity) << ','
            << fmt_value(r.equalized_odds) << ',' << csv::quote(r.status) << '\n';
    out << arm_name(s.arm) << ",mean," << fmt_value(s.demographic_parity.mean) << ',' << fmt_value(s.equalized_odds.mean)
        << ",ok\n";
    out << arm_name(s.arm) << ",sd," << fmt_value(s.demographic_parity.sd) << ',' << fmt_value(s.equalized_odds.sd)
        << ",ok\n";
  }
  const ArmSummary* b = res.summary(Arm::Baseline);
  const ArmSummary* f = res.summary(Arm::Feri);
  if (b && f) {
    auto red = [](double base, double cand) {
      return base == 0.0 || std::isnan(base) || std::isnan(cand) ? std::string("nan")
                                                                  : format_percent(percent_reduction(base, cand));
    };
    out << "reduction,mean," << red(b->demographic_parity.mean, f->demographic_parity.mean) << ','
        << red(b->equalized_odds.mean, f->equalized_odds.mean) << ",ok\n";
  }
  return out.str();
}

// Per-subgroup accuracy: one row per (arm, fold, subgroup), then mean/sd rows.
inline std::string accuracy_csv(const ExperimentResult& res) {
  std::ostringstream out;
  out << "arm,fold,subgroup,auroc,auprc\n";
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& s : res.summaries) {
    for (const auto& r : res.runs) {
      if (r.arm != s.arm) continue;
      for (std::size_t g = 0; g < res.group_names.size(); ++g)
        out << arm_name(r.arm) << ',' << r.fold << ',' << csv::quote(res.group_names[g]) << ','
            << fmt_value(r.ok ? r.auroc[g] : nan) << ',' << fmt_value(r.ok ? r.auprc[g] : nan) << '\n';
    }
    for (const char* stat : {"mean", "sd"})
      for (std::size_t g = 0; g < res.group_names.size(); ++g) {
        const bool mean = std::string(stat) == "mean";
        out << arm_name(s.arm) << ',' << stat << ',' << csv::quote(res.group_names[g]) << ','
            << fmt_value(mean ? s.auroc[g].mean : s.auroc[g].sd) << ','
            << fmt_value(mean ? s.auprc[g].mean : s.auprc[g].sd) << '\n';
      }
  }
  return out.str();
}

inline std::string summary_text(const ExperimentConfig& cfg, const ExperimentResult& res) {
  std::ostringstream out;
  out << "attribute: " << res.attribute << " (M=" << res.group_names.size() << ":";
  for (std::size_t g = 0; g < res.group_names.size(); ++g) out << " " << g << "=" << res.group_names[g];
  out << ")\n";
  out << "epochs: " << cfg.epochs << "  folds: " << cfg.k << "  seed: " << cfg.seed << "  alpha: " << cfg.hyper.alpha
      << "  beta: " << cfg.hyper.beta << "  gamma: " << cfg.hyper.gamma << "  threshold: " << cfg.threshold << "\n\n";

  const ArmSummary* b = res.summary(Arm::Baseline);
  const ArmSummary* f = res.summary(Arm::Feri);
  auto metric = [&](Arm a, std::size_t fold, bool dp) {
    for (const auto& r : res.runs)
      if (r.arm == a && r.fold == fold) return r.ok ? fmt_fixed(dp ? r.demographic_parity : r.equalized_odds) : std::string("failed");
    return std::string("-");
  };
  auto ms = [](const MeanSd& m) { return fmt_fixed(m.mean) + " (+/- " + fmt_fixed(m.sd) + ")"; };

  out << "Disparity (lower is fairer)\n";
  out << "fold\tbaseline DP\tferi DP\tbaseline EO\tferi EO\n";
  for (std::size_t k = 1; k <= cfg.k; ++k)
    out << k << '\t' << metric(Arm::Baseline, k, true) << '\t' << metric(Arm::Feri, k, true) << '\t'
        << metric(Arm::Baseline, k, false) << '\t' << metric(Arm::Feri, k, false) << '\n';
  out << "mean+/-sd\t" << (b ? ms(b->demographic_parity) : "-") << '\t' << (f ? ms(f->demographic_parity) : "-") << '\t'
      << (b ? ms(b->equalized_odds) : "-") << '\t' << (f ? ms(f->equalized_odds) : "-") << '\n';
  if (b && f) {
    auto red = [](double base, double cand) {
      return base == 0.0 || std::isnan(base) || std::isnan(cand) ? std::string("n/a")
                                                                  : format_percent(percent_reduction(base, cand));
    };
    out << "reduction\t" << red(b->demographic_parity.mean, f->demographic_parity.mean) << "\t\t"
        << red(b->equalized_odds.mean, f->equalized_odds.mean) << '\n';
  }

  out << "\nAccuracy by subgroup (mean over folds)\n";
  out << "subgroup\tbaseline AUROC\tferi AUROC\t|diff|\tbaseline AUPRC\tferi AUPRC\t|diff|\n";
  for (std::size_t g = 0; g < res.group_names.size(); ++g) {
    out << res.group_names[g];
    for (int which = 0; which < 2; ++which) {
      const double bv = b ? (which ? b->auprc[g].mean : b->auroc[g].mean) : std::nan("");
      const double fv = f ? (which ? f->auprc[g].mean : f->auroc[g].mean) : std::nan("");
      out << '\t' << fmt_fixed(bv) << '\t' << fmt_fixed(fv) << '\t' << fmt_fixed(std::fabs(fv - bv));
    }
    out << '\n';
  }

  out << "\nFinal losses per task (train / evaluated split)\n";
  for (const auto& r : res.runs) {
    out << arm_name(r.arm) << " fold " << r.fold << ": ";
    if (!r.ok) {
      out << r.status << '\n';
      continue;
    }
    for (std::size_t m = 0; m < r.final_train_loss.size(); ++m)
      out << (m ? "  " : "") << res.group_names[m] << " " << fmt_fixed(r.final_train_loss[m]) << " / "
          << fmt_fixed(r.final_eval_loss[m]) << " (z=" << fmt_fixed(r.final_weights[m]) << ")";
    out << '\n';
  }
  return out.str();
}

namespace detail {
inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}
}  // namespace detail

// trace.csv, results.csv, accuracy.csv and summary.txt under cfg.out_dir.
inline void write_artifacts(const ExperimentConfig& cfg, const ExperimentResult& res) {
  const std::filesystem::path dir(cfg.out_dir);
  std::filesystem::create_directories(dir);
  if (!res.trace.empty()) export_trace(res.trace, (dir / "trace.csv").string());
  detail::write_text(dir / "results.csv", results_csv(res));
  detail::write_text(dir / "accuracy.csv", accuracy_csv(res));
  detail::write_text(dir / "summary.txt", summary_text(cfg, res));
}

// ---------------------------------------------------------------------------
// Grid search over (gamma, logit rate beta), scored on the validation split
// ---------------------------------------------------------------------------

struct GridPoint {
  double gamma = 0.0;
  double beta = 0.0;
  bool ok = true;
  std::string status = "ok";
  double demographic_parity = std::numeric_limits<double>::quiet_NaN();
  double equalized_odds = std::numeric_limits<double>::quiet_NaN();
  double auroc = std::numeric_limits<double>::quiet_NaN();  // mean over subgroups
  double auprc = std::numeric_limits<double>::quiet_NaN();
  std::size_t rank = 0;  // 1 = best
};

// Orders by equalized odds ascending, then AUROC descending, then smaller
// gamma, then smaller beta. Failed points rank last.
inline void rank_grid(std::vector<GridPoint>& points) {
  std::sort(points.begin(), points.end(), [](const GridPoint& a, const GridPoint& b) {
    if (a.ok != b.ok) return a.ok;
    if (a.ok) {
      if (a.equalized_odds != b.equalized_odds) return a.equalized_odds < b.equalized_odds;
      if (a.auroc != b.auroc) return a.auroc > b.auroc;
    }
    if (a.gamma != b.gamma) return a.gamma < b.gamma;
    return a.beta < b.beta;
  });
  for (std::size_t i = 0; i < points.size(); ++i) points[i].rank = i + 1;
}

inline GridPoint grid_point_from(const ExperimentResult& res, double gamma, double beta) {
  GridPoint p;
  p.gamma = gamma;
  p.beta = beta;
  const ArmSummary* s = res.summary(Arm::Feri);
  if (!s || s->folds_ok == 0) {
    p.ok = false;
    p.status = "all folds failed";
    for (const auto& r : res.runs)
      if (!r.ok) {
        p.status = r.status;
        break;
      }
    return p;
  }
  if (s->folds_ok < res.runs.size()) p.status = "partial: " + std::to_string(s->folds_ok) + " folds ok";
  p.demographic_parity = s->demographic_parity.mean;
  p.equalized_odds = s->equalized_odds.mean;
  double roc = 0.0, pr = 0.0;
  for (std::size_t g = 0; g < s->auroc.size(); ++g) {
    roc += s->auroc[g].mean;
    pr += s->auprc[g].mean;
  }
  p.auroc = roc / static_cast<double>(s->auroc.size());
  p.auprc = pr / static_cast<double>(s->auprc.size());
  return p;
}

inline std::vector<GridPoint> grid_search(const ExperimentConfig& cfg) {
  if (cfg.grid_gamma.empty() || cfg.grid_beta.empty()) throw ConfigError("grid: gamma and beta grids must be nonempty");
  std::vector<GridPoint> points;
  for (double gamma : cfg.grid_gamma)
    for (double beta : cfg.grid_beta) {
      ExperimentConfig point = cfg;
      point.arms = {Arm::Feri};
      point.hyper.gamma = gamma;
      point.hyper.beta = beta;
      try {
        points.push_back(grid_point_from(run_experiment(point, EvalSplit::Validation), gamma, beta));
      } catch (const Error& e) {
        GridPoint p;
        p.gamma = gamma;
        p.beta = beta;
        p.ok = false;
        p.status = e.what();
        points.push_back(p);
      }
    }
  rank_grid(points);
  return points;
}

inline std::string grid_csv(const std::vector<GridPoint>& points) {
  std::ostringstream out;
  out << "rank,gamma,beta,demographic_parity,equalized_odds,auroc,auprc,status\n";
  for (const auto& p : points)
    out << p.rank << ',' << fmt_value(p.gamma) << ',' << fmt_value(p.beta) << ',' << fmt_value(p.demographic_parity) << ','
        << fmt_value(p.equalized_odds) << ',' << fmt_value(p.auroc) << ',' << fmt_value(p.auprc) << ','
        << csv::quote(p.status) << '\n';
  return out.str();
}

inline void write_grid(const ExperimentConfig& cfg, const std::vector<GridPoint>& points) {
  const std::filesystem::path dir(cfg.out_dir);
  std::filesystem::create_directories(dir);
  detail::write_text(dir / "grid.csv", grid_csv(points));
}

}  // namespace feri
