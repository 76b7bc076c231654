#pragma once

#include <cstddef>
#include <set>
#include <string>
#include <vector>

#include "feri/errors.hpp"

namespace feri {

// Categorical index reserved for a missing value.
inline constexpr std::size_t kMissingIndex = 0;

struct CategoricalFeature {
  std::string name;
  std::size_t cardinality = 0;  // includes the missing slot

  friend bool operator==(const CategoricalFeature&, const CategoricalFeature&) = default;
};

struct FeatureSchema {
  std::vector<CategoricalFeature> categorical;
  std::vector<std::string> continuous;

  std::size_t num_categorical() const noexcept { return categorical.size(); }
  std::size_t num_continuous() const noexcept { return continuous.size(); }

  void validate() const {
    std::set<std::string> seen;
    for (const auto& f : categorical) {
      if (f.cardinality < 2)
        throw ConfigError("categorical feature '" + f.name + "' needs cardinality >= 2 (category + missing slot)");
      if (!seen.insert(f.name).second) throw ConfigError("duplicate feature name '" + f.name + "'");
    }
    for (const auto& name : continuous)
      if (!seen.insert(name).second) throw ConfigError("duplicate feature name '" + name + "'");
  }

  friend bool operator==(const FeatureSchema&, const FeatureSchema&) = default;
};

struct Sample {
  std::vector<std::size_t> cat;
  std::vector<double> cont;
  int label = 0;
  std::size_t group = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

// Per categorical feature, index -> category string. Entry 0 is the missing slot.
struct Vocabulary {
  std::vector<std::vector<std::string>> categories;

  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;
};

struct Dataset {
  FeatureSchema schema;
  std::vector<Sample> samples;
  std::string attribute_name;
  std::vector<std::string> group_names;
  Vocabulary vocabulary;

  std::size_t num_groups() const noexcept { return group_names.size(); }
  std::size_t size() const noexcept { return samples.size(); }

  void validate_sample(const Sample& s, std::size_t row) const {
    const auto where = [&] { return " (sample " + std::to_string(row) + ")"; };
    if (s.cat.size() != schema.num_categorical() || s.cont.size() != schema.num_continuous())
      throw DataError("sample does not match schema" + where());
    for (std::size_t j = 0; j < s.cat.size(); ++j)
      if (s.cat[j] >= schema.categorical[j].cardinality)
        throw DataError("category index out of range for '" + schema.categorical[j].name + "'" + where());
    if (s.label != 0 && s.label != 1) throw DataError("label must be 0 or 1" + where());
    if (s.group >= num_groups()) throw DataError("group id out of range" + where());
  }

  // Full invariant check, including that every group has at least one sample.
  void validate() const {
    schema.validate();
    if (group_names.empty()) throw DataError("dataset declares no groups");
    std::vector<std::size_t> counts(num_groups(), 0);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      validate_sample(samples[i], i);
      ++counts[samples[i].group];
    }
    for (std::size_t g = 0; g < counts.size(); ++g)
      if (counts[g] == 0) throw DataError("group '" + group_names[g] + "' has no samples");
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline Dataset subset(const Dataset& data, const std::vector<std::size_t>& indices) {
  Dataset out;
  out.schema = data.schema;
  out.attribute_name = data.attribute_name;
  out.group_names = data.group_names;
  out.vocabulary = data.vocabulary;
  out.samples.reserve(indices.size());
  for (std::size_t i : indices) out.samples.push_back(data.samples.at(i));
  return out;
}

}  // namespace feri
