#pragma once

// Shared helpers for the unit and acceptance tests: finite-difference
// gradients, small random datasets and brute-force metric oracles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "feri/feri.hpp"

namespace feri::testing {

// ||a - b|| / max(||a||, ||b||, floor), over the flattened vectors.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-12) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

// Central differences of f over every scalar in xs.
inline std::vector<double> central_difference(std::vector<ad::Array2D>& xs, const std::function<double()>& f,
                                              double h = 1e-5) {
  std::vector<double> out;
  for (auto& x : xs)
    for (double& v : x.data) {
      const double keep = v;
      v = keep + h;
      const double up = f();
      v = keep - h;
      const double down = f();
      v = keep;
      out.push_back((up - down) / (2.0 * h));
    }
  return out;
}

// Builds a scalar from parameter leaves xs on a fresh tape and returns the
// relative error between the tape gradient and central differences.
inline double tape_gradient_error(std::vector<ad::Array2D> xs,
                                  const std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>& build,
                                  double h = 1e-5) {
  auto evaluate = [&](std::vector<double>* grad_out) {
    ad::Tape t;
    std::vector<ad::Var> vs;
    for (std::size_t i = 0; i < xs.size(); ++i) vs.push_back(t.parameter(i, xs[i]));
    const ad::Var root = build(t, vs);
    const double v = t.forward(root).data[0];
    if (grad_out) {
      const auto g = t.backward(root);
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const ad::Array2D* gi = g.find(i);
        for (std::size_t k = 0; k < xs[i].size(); ++k) grad_out->push_back(gi ? gi->data[k] : 0.0);
      }
    }
    return v;
  };
  std::vector<double> analytic;
  evaluate(&analytic);
  const auto numeric = central_difference(xs, [&] { return evaluate(nullptr); }, h);
  return relative_error(analytic, numeric);
}

// Moves every parameter off exact zeros so no ReLU input sits on its kink.
inline void jitter(ModelParams& p, std::uint64_t seed, double scale = 0.1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& t : p.tensors)
    for (double& v : t.data) v += u(rng);
}

inline ad::Array2D random_array(std::mt19937_64& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  ad::Array2D a(r, c);
  for (double& v : a.data) v = u(rng);
  return a;
}

// A small labelled dataset with both labels present in every group.
inline Dataset tiny_dataset(std::uint64_t seed, std::size_t groups = 2, std::size_t per_group = 8,
                            std::vector<std::size_t> cards = {3, 4}, std::size_t num_cont = 3) {
  Dataset ds;
  for (std::size_t j = 0; j < cards.size(); ++j) ds.schema.categorical.push_back({"c" + std::to_string(j), cards[j]});
  for (std::size_t j = 0; j < num_cont; ++j) ds.schema.continuous.push_back("x" + std::to_string(j));
  ds.attribute_name = "group";
  ds.vocabulary.categories.resize(cards.size());
  for (std::size_t j = 0; j < cards.size(); ++j)
    for (std::size_t k = 0; k < cards[j]; ++k) ds.vocabulary.categories[j].push_back(k ? "v" + std::to_string(k) : "");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (std::size_t g = 0; g < groups; ++g) {
    ds.group_names.push_back("g" + std::to_string(g));
    for (std::size_t i = 0; i < per_group; ++i) {
      Sample s;
      s.group = g;
      s.label = static_cast<int>(i % 2);
      for (std::size_t c : cards) s.cat.push_back(std::uniform_int_distribution<std::size_t>(0, c - 1)(rng));
      for (std::size_t j = 0; j < num_cont; ++j) s.cont.push_back(n01(rng) + (s.label ? 0.5 : -0.5));
      ds.samples.push_back(std::move(s));
    }
  }
  ds.validate();
  return ds;
}

// Brute-force fairness oracle straight from the definitions.
struct BruteFairness {
  double dp = 0.0, eo = 0.0;
};

inline BruteFairness brute_fairness(const ScoredPredictions& p) {
  BruteFairness out;
  std::vector<double> rate(p.num_groups), tpr(p.num_groups), fpr(p.num_groups);
  for (std::size_t g = 0; g < p.num_groups; ++g) {
    double n = 0, hat = 0, pos = 0, tp = 0, neg = 0, fp = 0;
    for (std::size_t i = 0; i < p.scores.size(); ++i) {
      if (p.groups[i] != g) continue;
      const bool yhat = p.scores[i] >= p.threshold;
      n += 1;
      hat += yhat;
      if (p.labels[i]) {
        pos += 1;
        tp += yhat;
      } else {
        neg += 1;
        fp += yhat;
      }
    }
    rate[g] = hat / n;
    tpr[g] = tp / pos;
    fpr[g] = fp / neg;
  }
  for (std::size_t i = 0; i < p.num_groups; ++i)
    for (std::size_t j = 0; j < p.num_groups; ++j) {
      out.dp = std::max(out.dp, rate[i] - rate[j]);
    }
  double tg = 0, fg = 0;
  for (std::size_t i = 0; i < p.num_groups; ++i)
    for (std::size_t j = 0; j < p.num_groups; ++j) {
      tg = std::max(tg, tpr[i] - tpr[j]);
      fg = std::max(fg, fpr[i] - fpr[j]);
    }
  out.eo = tg + fg;
  return out;
}

// Pairwise AUROC: fraction of (positive, negative) pairs ordered correctly, ties half.
inline double brute_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        den += 1;
        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return num / den;
}

// Average precision by sweeping every distinct score as a threshold.
inline double brute_auprc(const std::vector<double>& s, const std::vector<int>& y) {
  std::vector<double> thresholds(s.begin(), s.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  double pos = 0;
  for (int v : y) pos += v;
  double ap = 0, prev_recall = 0;
  for (double t : thresholds) {
    double tp = 0, predicted = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) {
        predicted += 1;
        tp += y[i];
      }
    const double recall = tp / pos;
    ap += (recall - prev_recall) * (tp / predicted);
    prev_recall = recall;
  }
  return ap;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("feri_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace feri::testing
