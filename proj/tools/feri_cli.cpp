// feri: run the baseline/FERI comparison, grid-search the logit hyperparameters,
// generate synthetic cohorts, or score a predictions file.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "feri/feri.hpp"

namespace {

int cmd_run(const std::string& config_path) {
  const auto cfg = feri::load_config(config_path);
  const auto res = feri::run_experiment(cfg);
  feri::write_artifacts(cfg, res);
  std::cout << feri::summary_text(cfg, res);
  std::size_t failed = 0;
  for (const auto& r : res.runs) failed += !r.ok;
  if (failed) std::cerr << "warning: " << failed << " run(s) failed; see results.csv\n";
  return 0;
}

int cmd_grid(const std::string& config_path) {
  const auto cfg = feri::load_config(config_path);
  const auto points = feri::grid_search(cfg);
  feri::write_grid(cfg, points);
  std::cout << feri::grid_csv(points);
  return 0;
}

int cmd_synth(const std::string& spec_path, const std::string& out_csv) {
  const auto cfg = feri::load_config(spec_path);
  feri::SynthSpec spec = cfg.synth;
  spec.attribute_name = cfg.attribute;
  if (!cfg.synth_seed_explicit) spec.seed = feri::derive_seed(cfg.seed, feri::seed_stream::kData);
  spec.validate();
  const auto data = feri::synth_generate(spec);
  if (const auto parent = std::filesystem::path(out_csv).parent_path(); !parent.empty())
    std::filesystem::create_directories(parent);
  feri::write_csv(data, out_csv);
  feri::write_vocabulary(data.vocabulary, data.schema, feri::vocabulary_path(out_csv));
  std::cout << "wrote " << data.samples.size() << " rows to " << out_csv << " (vocabulary: "
            << feri::vocabulary_path(out_csv) << ")\n";
  return 0;
}

int cmd_metrics(const std::string& path, double threshold) {
  const auto lines = feri::csv::read_lines(path);
  if (lines.empty()) throw feri::DataError("'" + path + "' is empty");
  const auto header = feri::csv::split(lines[0], 1);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* need : {"score", "label", "group"})
    if (!col.count(need)) throw feri::DataError("'" + path + "' lacks column '" + need + "'");

  std::vector<std::string> raw_groups;
  feri::ScoredPredictions p;
  p.threshold = threshold;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = feri::csv::split(lines[i], i + 1);
    if (f.size() != header.size()) throw feri::DataError("line " + std::to_string(i + 1) + ": wrong field count");
    const auto score = feri::csv::parse_double(f[col["score"]]);
    if (!score) throw feri::DataError("line " + std::to_string(i + 1) + ": bad score");
    const std::string& label = f[col["label"]];
    if (label != "0" && label != "1") throw feri::DataError("line " + std::to_string(i + 1) + ": label must be 0 or 1");
    p.scores.push_back(*score);
    p.labels.push_back(label == "1");
    raw_groups.push_back(f[col["group"]]);
  }
  std::map<std::string, std::size_t> ids;
  for (const auto& g : raw_groups) ids.emplace(g, 0);
  std::vector<std::string> names;
  for (auto& [name, id] : ids) {
    id = names.size();
    names.push_back(name);
  }
  for (const auto& g : raw_groups) p.groups.push_back(ids[g]);
  p.num_groups = names.size();

  const auto rep = feri::fairness_report(p);
  std::cout << "demographic_parity=" << feri::csv::format_double(rep.demographic_parity) << '\n';
  std::cout << "equalized_odds=" << feri::csv::format_double(rep.equalized_odds) << '\n';
  for (std::size_t g = 0; g < names.size(); ++g) {
    std::vector<double> s;
    std::vector<int> y;
    for (std::size_t i = 0; i < p.scores.size(); ++i)
      if (p.groups[i] == g) {
        s.push_back(p.scores[i]);
        y.push_back(p.labels[i]);
      }
    std::cout << "group=" << names[g] << " n=" << s.size()
              << " positive_rate=" << feri::csv::format_double(rep.positive_rates[g])
              << " tpr=" << feri::csv::format_double(rep.tprs[g]) << " fpr=" << feri::csv::format_double(rep.fprs[g])
              << " auroc=" << feri::csv::format_double(feri::auroc(s, y))
              << " auprc=" << feri::csv::format_double(feri::auprc(s, y)) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fair multitask training by equal rate of loss improvement"};
  app.require_subcommand(1);

  std::string config, spec, out_csv, predictions;
  double threshold = 0.5;
  auto* run = app.add_subcommand("run", "train both arms over k folds and write reports");
  run->add_option("config", config, "key = value config file")->required();
  auto* grid = app.add_subcommand("grid", "rank (gamma, beta) grid points on the validation split");
  grid->add_option("config", config, "key = value config file")->required();
  auto* synth = app.add_subcommand("synth", "generate a synthetic cohort CSV and vocabulary sidecar");
  synth->add_option("spec", spec, "config file with synth.* keys")->required();
  synth->add_option("out", out_csv, "output CSV path")->required();
  auto* metrics = app.add_subcommand("metrics", "fairness and ranking metrics for a score,label,group CSV");
  metrics->add_option("predictions", predictions, "predictions CSV")->required();
  metrics->add_option("--threshold", threshold, "decision threshold")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*run) return cmd_run(config);
    if (*grid) return cmd_grid(config);
    if (*synth) return cmd_synth(spec, out_csv);
    if (*metrics) return cmd_metrics(predictions, threshold);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
