#pragma once

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "feri/schema.hpp"

namespace feri {

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace csv {

// Splits one record. Quoted fields may contain commas and doubled quotes.
inline std::vector<std::string> split(const std::string& line, std::size_t row = 0) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (quoted) throw DataError("unterminated quoted field on line " + std::to_string(row));
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string quote(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char ch : field) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

// Reads all non-empty lines; strips a trailing CR and a leading UTF-8 BOM.
inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lines.empty() && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    lines.push_back(line);
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

inline std::optional<double> parse_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (errno == ERANGE || end != s.c_str() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

// Shortest round-tripping representation by default; `digits` caps precision instead.
inline std::string format_double(double v, int digits = 0) {
  char buf[64];
  if (digits > 0) {
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
  }
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace csv

// ---------------------------------------------------------------------------
// Vocabulary sidecar: header `feature,category,index`, one row per non-missing category.
// ---------------------------------------------------------------------------

inline void write_vocabulary(const Vocabulary& vocab, const FeatureSchema& schema, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << "feature,category,index\n";
  for (std::size_t j = 0; j < schema.num_categorical(); ++j)
    for (std::size_t k = 1; k < vocab.categories.at(j).size(); ++k)
      out << csv::quote(schema.categorical[j].name) << ',' << csv::quote(vocab.categories[j][k]) << ',' << k << '\n';
  if (!out) throw DataError("failed writing '" + path + "'");
}

inline Vocabulary read_vocabulary(const std::string& path, const FeatureSchema& schema) {
  const auto lines = csv::read_lines(path);
  if (lines.empty() || csv::split(lines[0]) != std::vector<std::string>{"feature", "category", "index"})
    throw DataError("vocabulary '" + path + "': expected header feature,category,index");
  std::map<std::string, std::size_t> feature_pos;
  for (std::size_t j = 0; j < schema.num_categorical(); ++j) feature_pos[schema.categorical[j].name] = j;
  Vocabulary vocab;
  vocab.categories.resize(schema.num_categorical());
  std::vector<std::map<std::size_t, std::string>> entries(schema.num_categorical());
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const auto f = csv::split(lines[r], r + 1);
    if (f.size() != 3) throw DataError("vocabulary line " + std::to_string(r + 1) + ": expected 3 fields");
    auto it = feature_pos.find(f[0]);
    if (it == feature_pos.end()) throw DataError("vocabulary line " + std::to_string(r + 1) + ": unknown feature '" + f[0] + "'");
    const auto idx = csv::parse_double(f[2]);
    if (!idx || *idx < 1 || *idx != std::floor(*idx) || *idx >= static_cast<double>(schema.categorical[it->second].cardinality))
      throw DataError("vocabulary line " + std::to_string(r + 1) + ": bad index '" + f[2] + "'");
    if (!entries[it->second].emplace(static_cast<std::size_t>(*idx), f[1]).second)
      throw DataError("vocabulary line " + std::to_string(r + 1) + ": duplicate index");
  }
  for (std::size_t j = 0; j < entries.size(); ++j) {
    vocab.categories[j].push_back("");
    for (const auto& [k, name] : entries[j]) {
      if (k != vocab.categories[j].size())
        throw DataError("vocabulary '" + path + "': indices of '" + schema.categorical[j].name + "' are not contiguous");
      vocab.categories[j].push_back(name);
    }
  }
  return vocab;
}

// ---------------------------------------------------------------------------
// Dataset CSV
// ---------------------------------------------------------------------------

inline constexpr const char* kLabelColumn = "label";

struct LoadOptions {
  std::optional<Vocabulary> vocabulary;   // built from the file (sorted) when absent
  bool strict = false;                    // unknown category under a given vocabulary -> error
  std::vector<std::string> group_names;   // fixes group order; sorted unique values when empty
};

inline Dataset load_csv(const std::string& path, const FeatureSchema& schema, const std::string& attribute_name,
                        const LoadOptions& options = {}) {
  schema.validate();
  const auto lines = csv::read_lines(path);
  if (lines.empty()) throw DataError("'" + path + "' is empty");
  const auto header = csv::split(lines[0], 1);

  std::map<std::string, std::size_t> col;
  for (std::size_t c = 0; c < header.size(); ++c)
    if (!col.emplace(header[c], c).second) throw DataError("duplicate column '" + header[c] + "'");
  auto column = [&](const std::string& name) {
    auto it = col.find(name);
    if (it == col.end()) throw DataError("'" + path + "' has no column '" + name + "'");
    return it->second;
  };
  std::vector<std::size_t> cat_col, cont_col;
  for (const auto& f : schema.categorical) cat_col.push_back(column(f.name));
  for (const auto& n : schema.continuous) cont_col.push_back(column(n));
  const std::size_t label_col = column(kLabelColumn);
  const std::size_t attr_col = column(attribute_name);
  if (header.size() != cat_col.size() + cont_col.size() + 2)
    throw DataError("'" + path + "' has columns not described by the schema");

  std::vector<std::vector<std::string>> rows;
  for (std::size_t r = 1; r < lines.size(); ++r) {
    auto f = csv::split(lines[r], r + 1);
    if (f.size() != header.size())
      throw DataError("row " + std::to_string(r + 1) + ": expected " + std::to_string(header.size()) + " fields, got " +
                      std::to_string(f.size()));
    rows.push_back(std::move(f));
  }

  Dataset ds;
  ds.schema = schema;
  ds.attribute_name = attribute_name;

  if (options.vocabulary) {
    ds.vocabulary = *options.vocabulary;
    if (ds.vocabulary.categories.size() != schema.num_categorical())
      throw DataError("vocabulary does not match the schema");
  } else {
    ds.vocabulary.categories.resize(schema.num_categorical());
    for (std::size_t j = 0; j < schema.num_categorical(); ++j) {
      std::set<std::string> values;
      for (const auto& row : rows)
        if (!row[cat_col[j]].empty()) values.insert(row[cat_col[j]]);
      auto& cats = ds.vocabulary.categories[j];
      cats.push_back("");
      cats.insert(cats.end(), values.begin(), values.end());
    }
  }
  std::vector<std::map<std::string, std::size_t>> lookup(schema.num_categorical());
  for (std::size_t j = 0; j < schema.num_categorical(); ++j) {
    const auto& cats = ds.vocabulary.categories[j];
    if (cats.size() > schema.categorical[j].cardinality)
      throw DataError("feature '" + schema.categorical[j].name + "' has " + std::to_string(cats.size() - 1) +
                      " categories, more than its cardinality allows");
    for (std::size_t k = 1; k < cats.size(); ++k) lookup[j][cats[k]] = k;
  }

  if (!options.group_names.empty()) {
    ds.group_names = options.group_names;
  } else {
    std::set<std::string> names;
    for (const auto& row : rows) names.insert(row[attr_col]);
    ds.group_names.assign(names.begin(), names.end());
  }
  std::map<std::string, std::size_t> group_id;
  for (std::size_t g = 0; g < ds.group_names.size(); ++g) group_id[ds.group_names[g]] = g;

  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    const std::string where = "row " + std::to_string(r + 2);
    Sample s;
    for (std::size_t j = 0; j < cat_col.size(); ++j) {
      const std::string& v = row[cat_col[j]];
      if (v.empty()) {
        s.cat.push_back(kMissingIndex);
        continue;
      }
      auto it = lookup[j].find(v);
      if (it == lookup[j].end()) {
        if (options.strict)
          throw DataError(where + ": unknown category '" + v + "' for '" + schema.categorical[j].name + "'");
        s.cat.push_back(kMissingIndex);
      } else {
        s.cat.push_back(it->second);
      }
    }
    for (std::size_t j = 0; j < cont_col.size(); ++j) {
      const auto v = csv::parse_double(row[cont_col[j]]);
      if (!v) throw DataError(where + ": cannot parse '" + row[cont_col[j]] + "' as a number for '" + schema.continuous[j] + "'");
      s.cont.push_back(*v);
    }
    const std::string& lab = row[label_col];
    if (lab != "0" && lab != "1") throw DataError(where + ": label must be 0 or 1, got '" + lab + "'");
    s.label = lab == "1";
    auto g = group_id.find(row[attr_col]);
    if (g == group_id.end()) throw DataError(where + ": unknown group '" + row[attr_col] + "'");
    s.group = g->second;
    ds.samples.push_back(std::move(s));
  }
  ds.validate();
  return ds;
}

inline void write_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  std::vector<std::string> header;
  for (const auto& f : ds.schema.categorical) header.push_back(f.name);
  for (const auto& n : ds.schema.continuous) header.push_back(n);
  header.push_back(kLabelColumn);
  header.push_back(ds.attribute_name);
  for (std::size_t c = 0; c < header.size(); ++c) out << (c ? "," : "") << csv::quote(header[c]);
  out << '\n';
  for (const auto& s : ds.samples) {
    for (std::size_t j = 0; j < s.cat.size(); ++j)
      out << (s.cat[j] == kMissingIndex ? std::string() : csv::quote(ds.vocabulary.categories.at(j).at(s.cat[j]))) << ',';
    for (double v : s.cont) out << csv::format_double(v) << ',';
    out << s.label << ',' << csv::quote(ds.group_names.at(s.group)) << '\n';
  }
  if (!out) throw DataError("failed writing '" + path + "'");
}

inline std::string vocabulary_path(const std::string& csv_path) { return csv_path + ".vocab.csv"; }

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

struct SynthGroup {
  std::string name;
  std::size_t count = 0;
  double positive_rate = 0.5;
  double signal = 0.0;  // label-dependent mean shift of continuous features
  double tilt = 0.0;    // label-dependent tilt of category probabilities
  double offset = 0.0;  // label-independent mean shift of continuous features and categories
  double twist = 0.0;   // 0 = shared label direction, 1 = a direction specific to this group
};

struct SynthSpec {
  std::string attribute_name = "age_group";
  std::vector<SynthGroup> groups;
  std::vector<std::size_t> cat_cardinalities{3, 4, 5, 6, 4, 5};  // including the missing slot
  std::size_t num_continuous = 6;
  double noise = 1.0;
  double missing_rate = 0.05;
  std::uint64_t seed = 42;

  void validate() const {
    if (groups.empty()) throw ConfigError("synth: no groups");
    for (const auto& g : groups) {
      if (g.count < 1) throw ConfigError("synth: group '" + g.name + "' needs count >= 1");
      if (!(g.positive_rate > 0.0 && g.positive_rate < 1.0))
        throw ConfigError("synth: group '" + g.name + "' rate must lie in (0, 1)");
      if (!(g.twist >= 0.0 && g.twist <= 1.0)) throw ConfigError("synth: group '" + g.name + "' twist must lie in [0, 1]");
    }
    for (std::size_t c : cat_cardinalities)
      if (c < 2) throw ConfigError("synth: categorical cardinality must be >= 2");
    if (!(noise >= 0.0)) throw ConfigError("synth: noise must be >= 0");
    if (!(missing_rate >= 0.0 && missing_rate < 1.0)) throw ConfigError("synth: missing_rate must lie in [0, 1)");
  }

  FeatureSchema schema() const {
    FeatureSchema s;
    for (std::size_t j = 0; j < cat_cardinalities.size(); ++j)
      s.categorical.push_back({"cat" + std::to_string(j + 1), cat_cardinalities[j]});
    for (std::size_t j = 0; j < num_continuous; ++j) s.continuous.push_back("num" + std::to_string(j + 1));
    return s;
  }
};

// Two age groups sized 80/20 with graft-failure rates from the adult/pediatric
// registry split. The minority's features are shifted and carry a weaker signal
// along a direction of its own, so a trunk fit to the majority serves it poorly.
inline SynthSpec default_synth_spec(std::size_t total = 2000) {
  SynthSpec spec;
  const std::size_t minority = total / 5;
  spec.groups = {
      {"Adult", total - minority, 0.4283, 0.8, 0.6, 0.0, 0.0},
      {"Pediatric", minority, 0.3399, 0.5, 0.4, 0.5, 1.0},
  };
  return spec;
}

namespace detail {
// Feature directions shared by every generated dataset, independent of the seed.
struct SynthStructure {
  std::vector<double> cont_label_dir;                 // per continuous feature
  std::vector<double> cont_offset_dir;
  std::vector<std::vector<double>> cat_label_dir;     // per feature, per real category
  std::vector<std::vector<double>> cat_offset_dir;
  std::vector<std::vector<double>> group_cont_dir;    // per group, per continuous feature
  std::vector<std::vector<std::vector<double>>> group_cat_dir;

  explicit SynthStructure(const SynthSpec& spec) {
    std::mt19937_64 rng(0x5EED5EEDULL);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (std::size_t j = 0; j < spec.num_continuous; ++j) {
      cont_label_dir.push_back(n01(rng));
      cont_offset_dir.push_back(n01(rng));
    }
    for (std::size_t c : spec.cat_cardinalities) {
      std::vector<double> a, b;
      for (std::size_t k = 1; k < c; ++k) {
        a.push_back(n01(rng));
        b.push_back(n01(rng));
      }
      cat_label_dir.push_back(std::move(a));
      cat_offset_dir.push_back(std::move(b));
    }
    for (std::size_t g = 0; g < spec.groups.size(); ++g) {
      std::vector<double> cont;
      for (std::size_t j = 0; j < spec.num_continuous; ++j) cont.push_back(n01(rng));
      std::vector<std::vector<double>> cats;
      for (std::size_t c : spec.cat_cardinalities) {
        std::vector<double> a;
        for (std::size_t k = 1; k < c; ++k) a.push_back(n01(rng));
        cats.push_back(std::move(a));
      }
      group_cont_dir.push_back(std::move(cont));
      group_cat_dir.push_back(std::move(cats));
    }
  }
};
}  // namespace detail

inline Dataset synth_generate(const SynthSpec& spec) {
  spec.validate();
  const detail::SynthStructure st(spec);
  Dataset ds;
  ds.schema = spec.schema();
  ds.attribute_name = spec.attribute_name;
  for (const auto& g : spec.groups) ds.group_names.push_back(g.name);
  ds.vocabulary.categories.resize(spec.cat_cardinalities.size());
  for (std::size_t j = 0; j < spec.cat_cardinalities.size(); ++j) {
    ds.vocabulary.categories[j].push_back("");
    for (std::size_t k = 1; k < spec.cat_cardinalities[j]; ++k)
      ds.vocabulary.categories[j].push_back(ds.schema.categorical[j].name + "_" + std::to_string(k));
  }

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (std::size_t gi = 0; gi < spec.groups.size(); ++gi) {
    const SynthGroup& g = spec.groups[gi];
    for (std::size_t i = 0; i < g.count; ++i) {
      Sample s;
      s.group = gi;
      s.label = u01(rng) < g.positive_rate;
      const double sign = s.label ? 1.0 : -1.0;
      for (std::size_t j = 0; j < spec.num_continuous; ++j)
        s.cont.push_back(g.offset * st.cont_offset_dir[j] +
                         g.signal * sign * ((1.0 - g.twist) * st.cont_label_dir[j] + g.twist * st.group_cont_dir[gi][j]) +
                         spec.noise * n01(rng));
      for (std::size_t j = 0; j < spec.cat_cardinalities.size(); ++j) {
        const double u_missing = u01(rng);
        const double u_pick = u01(rng);
        if (u_missing < spec.missing_rate) {
          s.cat.push_back(kMissingIndex);
          continue;
        }
        const auto& ldir = st.cat_label_dir[j];
        const auto& gdir = st.group_cat_dir[gi][j];
        const auto& odir = st.cat_offset_dir[j];
        std::vector<double> weight(ldir.size());
        double total = 0.0;
        for (std::size_t k = 0; k < ldir.size(); ++k) {
          const double dir = (1.0 - g.twist) * ldir[k] + g.twist * gdir[k];
          total += (weight[k] = std::exp(g.tilt * sign * dir + g.offset * odir[k]));
        }
        double acc = 0.0;
        std::size_t pick = ldir.size() - 1;
        for (std::size_t k = 0; k < ldir.size(); ++k) {
          acc += weight[k] / total;
          if (u_pick < acc) {
            pick = k;
            break;
          }
        }
        s.cat.push_back(pick + 1);
      }
      ds.samples.push_back(std::move(s));
    }
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Stratified folds
// ---------------------------------------------------------------------------

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

struct FoldPlan {
  std::size_t k = 0;
  std::vector<Fold> folds;
};

// Stratifies on (group, label) and deals samples round-robin into k chunks.
// Fold f tests on chunk f, validates on chunk f+1 (mod k) and trains on the rest,
// so the k test partitions tile the data.
inline FoldPlan kfold_split(const Dataset& data, std::size_t k, std::uint64_t seed) {
  if (k < 3) throw ConfigError("kfold_split: k must be >= 3 for disjoint train/validation/test partitions");
  std::map<std::pair<std::size_t, int>, std::vector<std::size_t>> strata;
  for (std::size_t g = 0; g < data.num_groups(); ++g)
    for (int y : {0, 1}) strata[{g, y}];
  for (std::size_t i = 0; i < data.samples.size(); ++i) strata[{data.samples[i].group, data.samples[i].label}].push_back(i);

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order;
  for (auto& [key, members] : strata) {
    if (members.size() < k)
      throw DataError("stratum (group '" + (key.first < data.group_names.size() ? data.group_names[key.first] : std::to_string(key.first)) +
                      "', label " + std::to_string(key.second) + ") has " + std::to_string(members.size()) +
                      " samples, fewer than k=" + std::to_string(k));
    std::shuffle(members.begin(), members.end(), rng);
    order.insert(order.end(), members.begin(), members.end());
  }
  std::vector<std::vector<std::size_t>> chunk(k);
  for (std::size_t pos = 0; pos < order.size(); ++pos) chunk[pos % k].push_back(order[pos]);
  for (auto& c : chunk) std::sort(c.begin(), c.end());

  FoldPlan plan;
  plan.k = k;
  for (std::size_t f = 0; f < k; ++f) {
    Fold fold;
    fold.test = chunk[f];
    fold.validation = chunk[(f + 1) % k];
    for (std::size_t c = 0; c < k; ++c)
      if (c != f && c != (f + 1) % k) fold.train.insert(fold.train.end(), chunk[c].begin(), chunk[c].end());
    std::sort(fold.train.begin(), fold.train.end());
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

struct StandardizationStats {
  std::vector<double> mean;
  std::vector<double> scale;  // population std, or 1 where the std is below 1e-12
};

inline StandardizationStats fit_standardization(const Dataset& data, std::span<const std::size_t> train_indices) {
  if (train_indices.empty()) throw ContractError("fit_standardization: no training indices");
  const std::size_t d = data.schema.num_continuous();
  StandardizationStats st{std::vector<double>(d, 0.0), std::vector<double>(d, 1.0)};
  const double n = static_cast<double>(train_indices.size());
  for (std::size_t i : train_indices)
    for (std::size_t j = 0; j < d; ++j) st.mean[j] += data.samples.at(i).cont[j];
  for (double& m : st.mean) m /= n;
  std::vector<double> var(d, 0.0);
  for (std::size_t i : train_indices)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = data.samples[i].cont[j] - st.mean[j];
      var[j] += c * c;
    }
  for (std::size_t j = 0; j < d; ++j) {
    const double sd = std::sqrt(var[j] / n);
    st.scale[j] = sd < 1e-12 ? 1.0 : sd;
  }
  return st;
}

inline Dataset standardize(Dataset data, const StandardizationStats& stats) {
  for (auto& s : data.samples)
    for (std::size_t j = 0; j < s.cont.size(); ++j) s.cont[j] = (s.cont[j] - stats.mean[j]) / stats.scale[j];
  return data;
}

}  // namespace feri
