#pragma once

// Dynamic task weighting by equal rate of improvement, and the
// averaged-loss baseline it is compared against.
//
// Per epoch t with task losses L_m and logits w:
//   delta_m = L_m + eps,  z = softmax(w),  r = sum_m z_m / delta_m
//   theta  <- theta - alpha * clip( sum_m c_m grad L_m ),  c_m = z_m / (delta_m * r)
//   d       = log delta(theta_t) - log delta(theta_{t+1})
//   w      <- w - beta * (J^T d + gamma * w),  J_ij = z_i (1{i=j} - z_j)

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "feri/autodiff.hpp"
#include "feri/tabmodel.hpp"

namespace feri {

struct FeriHyper {
  double alpha = 0.05;  // model-parameter step
  double beta = 10.0;   // logit step, applied once per full-batch epoch
  double gamma = 1e-6;  // logit decay
  double epsilon = 1e-8;
  double max_grad_norm = 1.0;

  void validate() const {
    if (!(alpha > 0.0)) throw ConfigError("alpha must be > 0");
    if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
    if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
    if (!(max_grad_norm > 0.0)) throw ConfigError("max_grad_norm must be > 0");
  }
};

struct FeriState {
  std::vector<double> logits;
  FeriHyper hyper;
  std::optional<std::vector<double>> cached_delta;  // delta at the current parameters
  std::size_t epoch = 0;

  FeriState(std::size_t num_tasks, const FeriHyper& h) : logits(num_tasks, 0.0), hyper(h) {
    if (num_tasks == 0) throw ConfigError("FeriState: need at least one task");
  }
};

struct EpochResult {
  std::vector<double> losses_before;  // L_m at the parameters the step started from
  std::vector<double> losses_after;   // L_m after the step (empty for the baseline)
  std::vector<double> weights_used;   // z_t, or 1/M for the baseline
  std::vector<double> coefficients;   // per-task multipliers of grad L_m in the step
  double combined_loss = 0.0;         // sum_m z_m L_m
};

inline std::vector<double> softmax_weights(std::span<const double> w) {
  if (w.empty()) throw ContractError("softmax_weights: empty logit vector");
  for (double v : w)
    if (!std::isfinite(v)) throw ContractError("softmax_weights: non-finite logit");
  const double mx = *std::max_element(w.begin(), w.end());
  std::vector<double> z(w.size());
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += (z[i] = std::exp(w[i] - mx));
  for (double& v : z) v /= s;
  return z;
}

// J_ij = dz_i / dw_j = z_i (1{i=j} - z_j)
inline ad::Array2D softmax_jacobian(std::span<const double> z) {
  ad::Array2D j(z.size(), z.size());
  for (std::size_t r = 0; r < z.size(); ++r)
    for (std::size_t c = 0; c < z.size(); ++c) j(r, c) = z[r] * ((r == c ? 1.0 : 0.0) - z[c]);
  return j;
}

inline std::vector<double> adjusted_losses(std::span<const double> losses, double epsilon) {
  std::vector<double> delta(losses.size());
  for (std::size_t m = 0; m < losses.size(); ++m) {
    if (!(losses[m] >= 0.0))
      throw ContractError("adjusted_losses: loss " + std::to_string(m) + " is negative or NaN");
    delta[m] = losses[m] + epsilon;
  }
  return delta;
}

namespace detail {
inline void check_delta(std::span<const double> delta, const char* who) {
  for (std::size_t m = 0; m < delta.size(); ++m)
    if (!(delta[m] > 0.0)) throw ContractError(std::string(who) + ": adjusted loss " + std::to_string(m) + " is not positive");
}
inline void check_lengths(std::size_t a, std::size_t b, const char* who) {
  if (a != b) throw ShapeError(std::string(who) + ": task vectors differ in length");
}
}  // namespace detail

inline double renorm_constant(std::span<const double> z, std::span<const double> delta) {
  detail::check_lengths(z.size(), delta.size(), "renorm_constant");
  detail::check_delta(delta, "renorm_constant");
  double r = 0.0;
  for (std::size_t m = 0; m < z.size(); ++m) r += z[m] / delta[m];
  return r;
}

// c_m = z_m / (delta_m r); grad log delta_m = grad L_m / delta_m folded in. Sums to one.
inline std::vector<double> step_coefficients(std::span<const double> z, std::span<const double> delta) {
  const double r = renorm_constant(z, delta);
  std::vector<double> c(z.size());
  for (std::size_t m = 0; m < z.size(); ++m) c[m] = z[m] / (delta[m] * r);
  return c;
}

// Weighted log-loss descent step. Returns the updated parameters.
inline ModelParams feri_param_step(ModelParams params, std::span<const ad::GradientSet> task_grads,
                                   std::span<const double> z, std::span<const double> delta, const FeriHyper& hyper,
                                   std::vector<double>* coefficients_out = nullptr) {
  detail::check_lengths(task_grads.size(), z.size(), "feri_param_step");
  const auto c = step_coefficients(z, delta);
  ad::GradientSet direction;
  for (std::size_t m = 0; m < c.size(); ++m) direction.accumulate(task_grads[m], c[m]);
  params.apply(ad::clip_global_norm(std::move(direction), hyper.max_grad_norm), hyper.alpha);
  if (coefficients_out) *coefficients_out = c;
  return params;
}

// Logit update given the per-task log-loss change d = log delta_t - log delta_{t+1}.
inline std::vector<double> logit_step_from_change(std::span<const double> w, std::span<const double> z,
                                                  std::span<const double> d, const FeriHyper& hyper) {
  detail::check_lengths(w.size(), z.size(), "logit_step");
  detail::check_lengths(w.size(), d.size(), "logit_step");
  const ad::Array2D jac = softmax_jacobian(z);
  std::vector<double> next(w.size());
  for (std::size_t j = 0; j < w.size(); ++j) {
    double grad = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) grad += jac(i, j) * d[i];
    next[j] = w[j] - hyper.beta * (grad + hyper.gamma * w[j]);
  }
  return next;
}

inline std::vector<double> logit_step(std::span<const double> w, std::span<const double> z,
                                      std::span<const double> delta_before, std::span<const double> delta_after,
                                      const FeriHyper& hyper) {
  detail::check_lengths(delta_before.size(), delta_after.size(), "logit_step");
  detail::check_delta(delta_before, "logit_step");
  detail::check_delta(delta_after, "logit_step");
  std::vector<double> d(delta_before.size());
  for (std::size_t m = 0; m < d.size(); ++m) d[m] = std::log(delta_before[m]) - std::log(delta_after[m]);
  return logit_step_from_change(w, z, d, hyper);
}

namespace detail {
inline void check_finite(std::span<const double> losses, std::size_t epoch) {
  for (std::size_t m = 0; m < losses.size(); ++m)
    if (!std::isfinite(losses[m])) throw DivergenceError(epoch, "loss of task " + std::to_string(m) + " is not finite");
}

template <typename F>
auto guard_divergence(std::size_t epoch, F&& f) {
  try {
    return f();
  } catch (const NonFiniteError& e) {
    throw DivergenceError(epoch, e.what());
  }
}
}  // namespace detail

// One full-batch epoch of the weighted optimizer. Mutates params and state.
inline EpochResult train_epoch_feri(ModelParams& params, FeriState& state, MultitaskObjective& data) {
  if (state.logits.size() != data.num_tasks())
    throw ContractError("FeriState has " + std::to_string(state.logits.size()) + " logits for " +
                        std::to_string(data.num_tasks()) + " tasks");
  const std::size_t epoch = state.epoch;
  const FeriHyper& h = state.hyper;
  return detail::guard_divergence(epoch, [&] {
    auto eval = data.losses_and_gradients(params);
    detail::check_finite(eval.losses, epoch);
    const auto delta = state.cached_delta ? *state.cached_delta : adjusted_losses(eval.losses, h.epsilon);

    EpochResult res;
    res.losses_before.resize(delta.size());
    for (std::size_t m = 0; m < delta.size(); ++m) res.losses_before[m] = delta[m] - h.epsilon;
    res.weights_used = softmax_weights(state.logits);
    for (std::size_t m = 0; m < delta.size(); ++m) res.combined_loss += res.weights_used[m] * res.losses_before[m];

    params = feri_param_step(std::move(params), eval.gradients, res.weights_used, delta, h, &res.coefficients);

    res.losses_after = data.losses(params);
    detail::check_finite(res.losses_after, epoch);
    auto delta_next = adjusted_losses(res.losses_after, h.epsilon);
    state.logits = logit_step(state.logits, res.weights_used, delta, delta_next, h);
    for (double w : state.logits)
      if (!std::isfinite(w)) throw DivergenceError(epoch, "task logits are not finite");
    state.cached_delta = std::move(delta_next);
    ++state.epoch;
    return res;
  });
}

// One full-batch clipped gradient step on the mean of the task losses.
inline EpochResult train_epoch_baseline(ModelParams& params, MultitaskObjective& data, double alpha,
                                        double max_grad_norm, std::size_t epoch = 0) {
  if (!(alpha > 0.0)) throw ConfigError("alpha must be > 0");
  return detail::guard_divergence(epoch, [&] {
    auto eval = data.losses_and_gradients(params);
    detail::check_finite(eval.losses, epoch);
    const std::size_t M = eval.losses.size();
    const double share = 1.0 / static_cast<double>(M);

    EpochResult res;
    res.losses_before = eval.losses;
    res.weights_used.assign(M, share);
    res.coefficients.assign(M, share);
    res.combined_loss = std::accumulate(eval.losses.begin(), eval.losses.end(), 0.0) * share;

    ad::GradientSet direction;
    for (const auto& g : eval.gradients) direction.accumulate(g, share);
    params.apply(ad::clip_global_norm(std::move(direction), max_grad_norm), alpha);
    return res;
  });
}

}  // namespace feri
