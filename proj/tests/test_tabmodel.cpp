#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace feri;
using feri::testing::relative_error;
using feri::testing::tiny_dataset;

namespace {
ModelConfig small_config(std::size_t tasks = 2) {
  ModelConfig c;
  c.embed_dim = 3;
  c.hidden = {6, 5};
  c.head = {4};
  c.num_tasks = tasks;
  return c;
}
}  // namespace

TEST(TabModel, ParameterLayout) {
  const Dataset ds = tiny_dataset(1);
  const ModelParams p(ds.schema, small_config());
  EXPECT_EQ(p.trunk_input_dim(), 2u * 3u + 3u);
  EXPECT_EQ(p[p.embedding(0)].rows, 3u);
  EXPECT_EQ(p[p.embedding(1)].rows, 4u);
  EXPECT_EQ(p[p.norm_gain()].cols, p.trunk_input_dim());
  EXPECT_EQ(p.trunk().size(), 2u);
  EXPECT_EQ(p.head(0).size(), 2u);
  EXPECT_EQ(p[p.head(1).back().weight].cols, 1u);
  EXPECT_TRUE(p.in_head(p.head(1)[0].bias, 1));
  EXPECT_FALSE(p.in_head(p.head(1)[0].bias, 0));
  EXPECT_FALSE(p.in_any_head(p.trunk()[0].weight));
}

TEST(TabModel, InitIsDeterministicAndBounded) {
  const Dataset ds = tiny_dataset(1);
  const auto a = init_params(ds.schema, small_config(), 7);
  const auto b = init_params(ds.schema, small_config(), 7);
  const auto c = init_params(ds.schema, small_config(), 8);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  for (double g : a[a.norm_gain()].data) EXPECT_EQ(g, 1.0);
  for (double v : a[a.trunk()[0].bias].data) EXPECT_EQ(v, 0.0);
  const double bound = 1.0 / std::sqrt(static_cast<double>(a.trunk_input_dim()));
  for (double v : a[a.trunk()[0].weight].data) EXPECT_LE(std::fabs(v), bound);
}

TEST(TabModel, ProbabilitiesAreInUnitInterval) {
  const Dataset ds = tiny_dataset(2);
  const auto p = init_params(ds.schema, small_config(), 1);
  for (std::size_t m = 0; m < 2; ++m)
    for (double v : forward(p, task_samples(ds, m), m)) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
}

TEST(TabModel, TaskGradientTouchesOnlyItsOwnHead) {
  const Dataset ds = tiny_dataset(3);
  const auto p = init_params(ds.schema, small_config(), 2);
  MultitaskObjective obj(p, ds);
  const auto e = obj.losses_and_gradients(p);
  for (std::size_t m = 0; m < 2; ++m)
    for (const auto& [key, g] : e.gradients[m]) EXPECT_TRUE(!p.in_any_head(key) || p.in_head(key, m));
  EXPECT_NE(e.gradients[0].find(p.trunk()[0].weight), nullptr);
}

TEST(TabModel, FullLossGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Dataset ds = tiny_dataset(seed, 2, 6);
    ModelParams p = init_params(ds.schema, small_config(), seed + 10);
    feri::testing::jitter(p, seed);
    for (std::size_t m = 0; m < 2; ++m) {
      const auto samples = task_samples(ds, m);
      TaskGraph graph(p, samples, m);
      const auto [loss, grad] = graph.loss_and_gradient(p);
      std::vector<double> analytic;
      for (ad::ParamKey k = 0; k < p.size(); ++k) {
        const auto* g = grad.find(k);
        for (std::size_t i = 0; i < p[k].size(); ++i) analytic.push_back(g ? g->data[i] : 0.0);
      }
      const auto numeric = feri::testing::central_difference(p.tensors, [&] { return graph.loss(p); });
      EXPECT_LT(relative_error(analytic, numeric), 1e-6) << "seed " << seed << " task " << m;
    }
  }
}

TEST(TabModel, TaskLossIsMeanBce) {
  const Dataset ds = tiny_dataset(4);
  const auto p = init_params(ds.schema, small_config(), 3);
  const auto samples = task_samples(ds, 1);
  const auto probs = forward(p, samples, 1);
  double bce = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i)
    bce -= samples[i].label ? std::log(probs[i]) : std::log(1.0 - probs[i]);
  EXPECT_NEAR(task_loss(p, ds, 1), bce / static_cast<double>(samples.size()), 1e-12);
}

TEST(TabModel, MissingCategoryUsesRowZero) {
  Dataset ds = tiny_dataset(5);
  ModelParams p = init_params(ds.schema, small_config(), 4);
  for (auto& s : ds.samples) s.cat[0] = kMissingIndex;
  const auto base = forward(p, task_samples(ds, 0), 0);
  p[p.embedding(0)](1, 0) += 5.0;  // a row no sample uses
  EXPECT_EQ(forward(p, task_samples(ds, 0), 0), base);
  p[p.embedding(0)](0, 0) += 5.0;
  EXPECT_NE(forward(p, task_samples(ds, 0), 0), base);
}

TEST(TabModel, Errors) {
  const Dataset ds = tiny_dataset(6);
  const auto p = init_params(ds.schema, small_config(), 5);
  EXPECT_THROW(TaskGraph(p, task_samples(ds, 0), 1), ContractError);
  EXPECT_THROW(TaskGraph(p, task_samples(ds, 0), 7), ContractError);
  EXPECT_THROW(TaskGraph(p, std::vector<Sample>{}, 0), EmptyTaskError);
  auto bad = task_samples(ds, 0);
  bad[0].cont.pop_back();
  EXPECT_THROW(TaskGraph(p, bad, 0), ShapeError);
  ModelConfig c = small_config(3);
  EXPECT_THROW(MultitaskObjective(init_params(ds.schema, c, 1), ds), ContractError);
  c.hidden.clear();
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TabModel, GraphReuseMatchesFreshGraph) {
  const Dataset ds = tiny_dataset(7);
  ModelParams p = init_params(ds.schema, small_config(), 6);
  MultitaskObjective obj(p, ds);
  obj.losses(p);
  p[p.trunk()[1].weight](0, 0) += 0.3;
  const auto reused = obj.losses(p);
  for (std::size_t m = 0; m < 2; ++m) EXPECT_EQ(reused[m], task_loss(p, ds, m));
}
