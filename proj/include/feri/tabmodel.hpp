#pragma once

// Multitask tabular network with hard parameter sharing.
//
//   per categorical feature: embedding lookup (cardinality x embed_dim)
//   concat(embeddings, continuous) -> layer norm (gain, bias)
//   trunk: dense + ReLU for every entry of `hidden`
//   head m: dense + ReLU for every entry of `head`, then dense -> 1 logit -> sigmoid
//
// Every task owns one head; the embeddings, normalization and trunk are shared.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "feri/autodiff.hpp"
#include "feri/schema.hpp"

namespace feri {

struct ModelConfig {
  std::size_t embed_dim = 8;
  std::vector<std::size_t> hidden{64, 32};
  std::vector<std::size_t> head{16};
  std::size_t num_tasks = 2;

  void validate() const {
    if (embed_dim < 1) throw ConfigError("model: embed_dim must be >= 1");
    if (num_tasks < 1) throw ConfigError("model: need at least one task");
    if (hidden.empty()) throw ConfigError("model: trunk needs at least one hidden layer");
    for (std::size_t h : hidden)
      if (h < 1) throw ConfigError("model: hidden sizes must be >= 1");
    for (std::size_t h : head)
      if (h < 1) throw ConfigError("model: head sizes must be >= 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// All trainable arrays, addressed by ParamKey (the index into `tensors`).
class ModelParams {
 public:
  ModelParams() = default;

  ModelParams(const FeatureSchema& schema, const ModelConfig& config)
      : config_(config), num_categorical_(schema.num_categorical()), num_continuous_(schema.num_continuous()) {
    schema.validate();
    config.validate();
    for (const auto& f : schema.categorical) add(f.cardinality, config.embed_dim);
    norm_gain_ = add(1, trunk_input_dim(), 1.0);
    norm_bias_ = add(1, trunk_input_dim());
    std::size_t fan_in = trunk_input_dim();
    for (std::size_t h : config.hidden) {
      trunk_.push_back({add(fan_in, h), add(1, h)});
      fan_in = h;
    }
    const std::size_t head_in = fan_in;
    heads_.resize(config.num_tasks);
    for (auto& head : heads_) {
      std::size_t in = head_in;
      for (std::size_t h : config.head) {
        head.push_back({add(in, h), add(1, h)});
        in = h;
      }
      head.push_back({add(in, 1), add(1, 1)});
    }
  }

  struct Dense {
    ad::ParamKey weight;
    ad::ParamKey bias;
    friend bool operator==(const Dense&, const Dense&) = default;
  };

  const ModelConfig& config() const noexcept { return config_; }
  std::size_t num_tasks() const noexcept { return heads_.size(); }
  std::size_t num_categorical() const noexcept { return num_categorical_; }
  std::size_t num_continuous() const noexcept { return num_continuous_; }
  std::size_t trunk_input_dim() const noexcept { return num_categorical_ * config_.embed_dim + num_continuous_; }
  std::size_t trunk_output_dim() const noexcept { return config_.hidden.back(); }

  ad::ParamKey embedding(std::size_t feature) const noexcept { return feature; }
  ad::ParamKey norm_gain() const noexcept { return norm_gain_; }
  ad::ParamKey norm_bias() const noexcept { return norm_bias_; }
  const std::vector<Dense>& trunk() const noexcept { return trunk_; }
  const std::vector<Dense>& head(std::size_t task) const { return heads_.at(task); }

  // True when key belongs to the head of `task`.
  bool in_head(ad::ParamKey key, std::size_t task) const {
    for (const Dense& d : heads_.at(task))
      if (d.weight == key || d.bias == key) return true;
    return false;
  }
  // True when key belongs to any head.
  bool in_any_head(ad::ParamKey key) const {
    for (std::size_t m = 0; m < heads_.size(); ++m)
      if (in_head(key, m)) return true;
    return false;
  }

  std::size_t size() const noexcept { return tensors.size(); }
  ad::Array2D& operator[](ad::ParamKey key) { return tensors.at(key); }
  const ad::Array2D& operator[](ad::ParamKey key) const { return tensors.at(key); }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  // params -= step * direction, for every key present in direction.
  void apply(const ad::GradientSet& direction, double step) {
    for (const auto& [key, g] : direction) {
      ad::Array2D& p = tensors.at(key);
      if (!p.same_shape(g))
        throw ShapeError("apply: gradient " + g.shape_string() + " does not match parameter " + p.shape_string());
      for (std::size_t i = 0; i < p.data.size(); ++i) p.data[i] -= step * g.data[i];
    }
  }

  std::vector<ad::Array2D> tensors;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;

 private:
  ad::ParamKey add(std::size_t r, std::size_t c, double fill = 0.0) {
    tensors.emplace_back(r, c, fill);
    return tensors.size() - 1;
  }

  ModelConfig config_;
  std::size_t num_categorical_ = 0;
  std::size_t num_continuous_ = 0;
  ad::ParamKey norm_gain_ = 0;
  ad::ParamKey norm_bias_ = 0;
  std::vector<Dense> trunk_;
  std::vector<std::vector<Dense>> heads_;
};

// Dense weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), embeddings ~ U(-1/sqrt(embed_dim), ..),
// biases zero, layer-norm gain one. Deterministic for a fixed seed.
inline ModelParams init_params(const FeatureSchema& schema, const ModelConfig& config, std::uint64_t seed) {
  ModelParams params(schema, config);
  std::mt19937_64 rng(seed);
  auto fill_uniform = [&](ad::Array2D& a, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : a.data) v = dist(rng);
  };
  const double emb_bound = 1.0 / std::sqrt(static_cast<double>(config.embed_dim));
  for (std::size_t j = 0; j < params.num_categorical(); ++j) fill_uniform(params[params.embedding(j)], emb_bound);
  auto init_dense = [&](const ModelParams::Dense& d) {
    ad::Array2D& w = params[d.weight];
    fill_uniform(w, 1.0 / std::sqrt(static_cast<double>(w.rows)));
  };
  for (const auto& d : params.trunk()) init_dense(d);
  for (std::size_t m = 0; m < params.num_tasks(); ++m)
    for (const auto& d : params.head(m)) init_dense(d);
  return params;
}

// The computation graph for one task over a fixed batch. Built once, then
// re-evaluated with fresh parameter values on every call.
class TaskGraph {
 public:
  TaskGraph(const ModelParams& params, std::span<const Sample> samples, std::size_t task)
      : tape_(std::make_unique<ad::Tape>()), task_(task), batch_(samples.size()) {
    if (task >= params.num_tasks())
      throw ContractError("task " + std::to_string(task) + " out of range for a model with " +
                          std::to_string(params.num_tasks()) + " heads");
    if (samples.empty()) throw EmptyTaskError(task);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const Sample& s = samples[i];
      if (s.group != task)
        throw ContractError("sample " + std::to_string(i) + " belongs to group " + std::to_string(s.group) +
                            ", not task " + std::to_string(task));
      if (s.cat.size() != params.num_categorical() || s.cont.size() != params.num_continuous())
        throw ShapeError("sample " + std::to_string(i) + " does not match the model's feature layout");
    }

    ad::Tape& t = *tape_;
    auto param = [&](ad::ParamKey key) {
      ad::Var v = t.parameter(key, params[key]);
      leaves_.push_back({v, key});
      return v;
    };

    std::vector<ad::Var> parts;
    for (std::size_t j = 0; j < params.num_categorical(); ++j) {
      std::vector<std::size_t> idx(samples.size());
      for (std::size_t i = 0; i < samples.size(); ++i) idx[i] = samples[i].cat[j];
      parts.push_back(ad::embedding(param(params.embedding(j)), std::move(idx)));
    }
    if (params.num_continuous() > 0) {
      ad::Array2D cont(samples.size(), params.num_continuous());
      for (std::size_t i = 0; i < samples.size(); ++i)
        for (std::size_t j = 0; j < params.num_continuous(); ++j) cont(i, j) = samples[i].cont[j];
      parts.push_back(t.constant(std::move(cont)));
    }
    ad::Var h = t.concat(parts);
    h = ad::layer_norm(h) * param(params.norm_gain()) + param(params.norm_bias());
    for (const auto& d : params.trunk()) h = ad::relu(ad::matmul(h, param(d.weight)) + param(d.bias));
    const auto& head = params.head(task);
    for (std::size_t l = 0; l < head.size(); ++l) {
      h = ad::matmul(h, param(head[l].weight)) + param(head[l].bias);
      if (l + 1 < head.size()) h = ad::relu(h);
    }
    prob_ = ad::sigmoid(h);
    std::vector<double> labels(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) labels[i] = samples[i].label;
    loss_ = ad::bce(prob_, std::move(labels));
  }

  std::size_t task() const noexcept { return task_; }
  std::size_t batch_size() const noexcept { return batch_; }

  double loss(const ModelParams& params) {
    bind(params);
    return tape_->forward(loss_).data[0];
  }

  // Loss and its gradient w.r.t. every parameter the task touches.
  std::pair<double, ad::GradientSet> loss_and_gradient(const ModelParams& params) {
    const double l = loss(params);
    return {l, tape_->backward(loss_)};
  }

  std::vector<double> probabilities(const ModelParams& params) {
    bind(params);
    return tape_->forward(prob_).data;
  }

 private:
  // Rebinding invalidates the tape, so unchanged values are left alone and a
  // backward() right after a loss() at the same parameters reuses that forward.
  void bind(const ModelParams& params) {
    for (const auto& [var, key] : leaves_)
      if (tape_->value(var).data != params[key].data) tape_->bind(var, params[key]);
  }

  struct Leaf {
    ad::Var var;
    ad::ParamKey key;
  };

  std::unique_ptr<ad::Tape> tape_;
  std::size_t task_;
  std::size_t batch_;
  std::vector<Leaf> leaves_;
  ad::Var prob_;
  ad::Var loss_;
};

// Probabilities from head m for a batch whose samples all belong to group m.
inline std::vector<double> forward(const ModelParams& params, std::span<const Sample> batch, std::size_t task) {
  return TaskGraph(params, batch, task).probabilities(params);
}

inline std::vector<Sample> task_samples(const Dataset& data, std::size_t task) {
  std::vector<Sample> out;
  for (const auto& s : data.samples)
    if (s.group == task) out.push_back(s);
  return out;
}

// Mean BCE of head m over exactly the group-m samples of data.
inline double task_loss(const ModelParams& params, const Dataset& data, std::size_t task) {
  const auto samples = task_samples(data, task);
  if (samples.empty()) throw EmptyTaskError(task);
  return TaskGraph(params, samples, task).loss(params);
}

// One TaskGraph per task over a training set; what the optimizers consume.
class MultitaskObjective {
 public:
  MultitaskObjective(const ModelParams& params, const Dataset& data) {
    if (data.num_groups() != params.num_tasks())
      throw ContractError("dataset has " + std::to_string(data.num_groups()) + " groups but the model has " +
                          std::to_string(params.num_tasks()) + " heads");
    for (std::size_t m = 0; m < params.num_tasks(); ++m) {
      const auto samples = task_samples(data, m);
      if (samples.empty()) throw EmptyTaskError(m);
      graphs_.emplace_back(params, samples, m);
    }
  }

  std::size_t num_tasks() const noexcept { return graphs_.size(); }

  std::vector<double> losses(const ModelParams& params) {
    std::vector<double> out;
    out.reserve(graphs_.size());
    for (auto& g : graphs_) out.push_back(g.loss(params));
    return out;
  }

  struct Evaluation {
    std::vector<double> losses;
    std::vector<ad::GradientSet> gradients;
  };

  Evaluation losses_and_gradients(const ModelParams& params) {
    Evaluation e;
    for (auto& g : graphs_) {
      auto [l, grad] = g.loss_and_gradient(params);
      e.losses.push_back(l);
      e.gradients.push_back(std::move(grad));
    }
    return e;
  }

 private:
  std::vector<TaskGraph> graphs_;
};

}  // namespace feri
