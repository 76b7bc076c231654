#pragma once

// Group fairness (demographic parity, equalized odds) and ranking accuracy
// (AUROC, AUPRC) for binary predictions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "feri/errors.hpp"

namespace feri {

struct ScoredPredictions {
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<std::size_t> groups;
  std::size_t num_groups = 0;
  double threshold = 0.5;

  void validate() const {
    if (scores.size() != labels.size() || scores.size() != groups.size())
      throw ContractError("predictions: scores, labels and groups differ in length");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ContractError("predictions: threshold must lie in (0, 1)");
    for (std::size_t i = 0; i < groups.size(); ++i) {
      if (groups[i] >= num_groups) throw ContractError("predictions: group id " + std::to_string(groups[i]) + " undeclared");
      if (labels[i] != 0 && labels[i] != 1) throw ContractError("predictions: labels must be 0 or 1");
    }
  }

  bool predicted_positive(std::size_t i) const { return scores[i] >= threshold; }
};

struct FairnessReport {
  double demographic_parity = 0.0;
  double equalized_odds = 0.0;
  std::vector<double> positive_rates;
  std::vector<double> tprs;
  std::vector<double> fprs;
};

namespace detail {
struct GroupCounts {
  std::size_t n = 0, predicted = 0;
  std::size_t pos = 0, true_pos = 0;
  std::size_t neg = 0, false_pos = 0;
};

inline std::vector<GroupCounts> count_groups(const ScoredPredictions& p) {
  p.validate();
  std::vector<GroupCounts> c(p.num_groups);
  for (std::size_t i = 0; i < p.scores.size(); ++i) {
    GroupCounts& g = c[p.groups[i]];
    const bool hat = p.predicted_positive(i);
    ++g.n;
    g.predicted += hat;
    if (p.labels[i] == 1) {
      ++g.pos;
      g.true_pos += hat;
    } else {
      ++g.neg;
      g.false_pos += hat;
    }
  }
  return c;
}

inline double spread(std::span<const double> v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return *hi - *lo;
}

inline double ratio(std::size_t a, std::size_t b) { return static_cast<double>(a) / static_cast<double>(b); }
}  // namespace detail

inline std::vector<double> positive_rates(const ScoredPredictions& p) {
  const auto counts = detail::count_groups(p);
  std::vector<double> rates;
  for (std::size_t g = 0; g < counts.size(); ++g) {
    if (counts[g].n == 0) throw UndefinedMetricError("group " + std::to_string(g) + " has no samples");
    rates.push_back(detail::ratio(counts[g].predicted, counts[g].n));
  }
  return rates;
}

// max_{i,j} P(Yhat=1|S=i) - P(Yhat=1|S=j)
inline double demographic_parity(const ScoredPredictions& p) {
  const auto rates = positive_rates(p);
  return detail::spread(rates);
}

// TPR spread + FPR spread across groups.
inline double equalized_odds(const ScoredPredictions& p, std::vector<double>* tprs_out = nullptr,
                             std::vector<double>* fprs_out = nullptr) {
  const auto counts = detail::count_groups(p);
  std::vector<double> tprs, fprs;
  for (std::size_t g = 0; g < counts.size(); ++g) {
    if (counts[g].pos == 0 || counts[g].neg == 0)
      throw UndefinedMetricError("group " + std::to_string(g) + " lacks a " + (counts[g].pos == 0 ? "positive" : "negative") +
                                 " sample; TPR/FPR undefined");
    tprs.push_back(detail::ratio(counts[g].true_pos, counts[g].pos));
    fprs.push_back(detail::ratio(counts[g].false_pos, counts[g].neg));
  }
  const double eo = detail::spread(tprs) + detail::spread(fprs);
  if (tprs_out) *tprs_out = tprs;
  if (fprs_out) *fprs_out = fprs;
  return eo;
}

inline FairnessReport fairness_report(const ScoredPredictions& p) {
  FairnessReport r;
  r.positive_rates = positive_rates(p);
  r.demographic_parity = detail::spread(r.positive_rates);
  r.equalized_odds = equalized_odds(p, &r.tprs, &r.fprs);
  return r;
}

namespace detail {
inline void check_scores(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ContractError("scores and labels differ in length");
  for (int y : labels)
    if (y != 0 && y != 1) throw ContractError("labels must be 0 or 1");
}

// Indices sorted by descending score.
inline std::vector<std::size_t> descending(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}
}  // namespace detail

// P(score of a random positive > score of a random negative), ties count one half.
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  detail::check_scores(scores, labels);
  const std::size_t pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw UndefinedMetricError("auroc: labels contain a single class");

  // Walk tie blocks from the top; each positive beats all negatives strictly below it.
  const auto idx = detail::descending(scores);
  double concordant = 0.0;
  std::size_t neg_above = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i, p_blk = 0, n_blk = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] == 1 ? p_blk : n_blk) += 1;
      ++j;
    }
    const std::size_t neg_below = neg - neg_above - n_blk;
    concordant += static_cast<double>(p_blk) * (static_cast<double>(neg_below) + 0.5 * static_cast<double>(n_blk));
    neg_above += n_blk;
    i = j;
  }
  return concordant / (static_cast<double>(pos) * static_cast<double>(neg));
}

// Average precision: sum over distinct descending thresholds of (R_k - R_{k-1}) * P_k.
inline double auprc(std::span<const double> scores, std::span<const int> labels) {
  detail::check_scores(scores, labels);
  const std::size_t pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (pos == 0) throw UndefinedMetricError("auprc: no positive labels");

  const auto idx = detail::descending(scores);
  double ap = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i, tp_blk = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      tp_blk += labels[idx[j]] == 1;
      ++j;
    }
    tp += tp_blk;
    seen = j;
    if (tp_blk > 0)
      ap += (static_cast<double>(tp_blk) / static_cast<double>(pos)) * (static_cast<double>(tp) / static_cast<double>(seen));
    i = j;
  }
  return ap;
}

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation; 0 for a single value
};

inline MeanSd mean_sd(std::span<const double> v) {
  if (v.empty()) throw ContractError("mean_sd: no values");
  MeanSd out;
  out.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - out.mean) * (x - out.mean);
    out.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return out;
}

// (baseline - candidate) / baseline, as a fraction.
inline double percent_reduction(double baseline, double candidate) {
  if (baseline == 0.0) throw UndefinedMetricError("percent reduction: baseline value is zero");
  return (baseline - candidate) / baseline;
}

// 0.717391 -> "71.74%"
inline std::string format_percent(double fraction) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f%%", fraction * 100.0);
  return buf;
}

}  // namespace feri
