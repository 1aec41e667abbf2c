#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "depthlab/errors.hpp"
#include "depthlab/metrics.hpp"
#include "fixtures.hpp"
#include "oracle.hpp"

using namespace depthlab;

namespace {

struct Game {
  Model model = fixtures::random_model(fixtures::config(4, 16), 31);
  PackedDataset ds = fixtures::random_dataset(4, 16, 40, 6);
};

ShapleyOptions options(ShapleyEstimator e, ShapleyObjective o = ShapleyObjective::LmLoss) {
  ShapleyOptions opt;
  opt.estimator = e;
  opt.objective = o;
  return opt;
}

// Shapley values by enumerating every ordering of the units, with the
// coalition loss taken from the scalar oracle.
std::vector<double> oracle_shapley(const Model& model, const PackedDataset& ds) {
  const auto units = units_at(Granularity::Block, model.config.n_blocks);
  const std::size_t n = units.size();
  std::vector<double> value(std::size_t{1} << n);
  for (std::size_t c = 0; c < value.size(); ++c) {
    std::vector<UnitId> skipped;
    for (std::size_t i = 0; i < n; ++i) {
      if (!(c >> i & 1)) skipped.push_back(units[i]);
    }
    value[c] = oracle::mean_nll(model, ds, skipped);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> shap(n, 0.0);
  double n_orders = 0;
  do {
    std::size_t c = 0;
    for (auto i : order) {
      shap[i] += value[c | std::size_t{1} << i] - value[c];
      c |= std::size_t{1} << i;
    }
    ++n_orders;
  } while (std::next_permutation(order.begin(), order.end()));
  for (auto& s : shap) s /= n_orders;
  return shap;
}

}  // namespace

TEST(Shapley, ExhaustiveMatchesOrderingOracle) {
  Game g;
  const auto table = shapley_influence(g.model, g.ds, Granularity::Block, options(ShapleyEstimator::Exhaustive));
  const auto want = oracle_shapley(g.model, g.ds);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(-table.scores[i].score, want[i], 1e-4 * std::abs(want[i]) + 1e-7);
  EXPECT_EQ(table.meta.n_subsets, 16u);
}

TEST(Shapley, ExhaustiveIsEfficient) {
  Game g;
  const auto table = shapley_influence(g.model, g.ds, Granularity::Block, options(ShapleyEstimator::Exhaustive));
  const auto units = units_at(Granularity::Block, 4);
  const double full = oracle::mean_nll(g.model, g.ds);
  const double empty = oracle::mean_nll(g.model, g.ds, units);
  double sum = 0.0;
  for (const auto& s : table.scores) sum -= s.score;
  EXPECT_LE(fixtures::rel_err(sum, full - empty), 1e-4);
}

TEST(Shapley, PermutationMcWithinThreeStandardErrors) {
  Game g;
  const auto exact = shapley_influence(g.model, g.ds, Granularity::Block, options(ShapleyEstimator::Exhaustive));
  auto opt = options(ShapleyEstimator::PermutationMc);
  opt.n_permutations = 200;
  opt.seed = 3;
  const auto mc = shapley_influence(g.model, g.ds, Granularity::Block, opt);
  ASSERT_EQ(mc.meta.std_errors.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_LE(std::abs(mc.scores[i].score - exact.scores[i].score), 3.0 * mc.meta.std_errors[i] + 1e-12);
  }
  EXPECT_EQ(mc, shapley_influence(g.model, g.ds, Granularity::Block, opt));
}

TEST(Shapley, LeaveOneOutEqualsExhaustiveForOneUnit) {
  const auto model = fixtures::random_model(fixtures::config(1, 16), 4);
  const auto ds = fixtures::random_dataset(4, 16, 40, 2);
  for (auto o : {ShapleyObjective::LmLoss, ShapleyObjective::LogitDistance}) {
    const auto loo = shapley_influence(model, ds, Granularity::Block, options(ShapleyEstimator::LeaveOneOut, o));
    const auto ex = shapley_influence(model, ds, Granularity::Block, options(ShapleyEstimator::Exhaustive, o));
    EXPECT_EQ(loo.scores, ex.scores);
  }
}

TEST(Shapley, LeaveOneOutIsLossIncreaseFromDeletion) {
  Game g;
  const auto t = shapley_influence(g.model, g.ds, Granularity::Block, options(ShapleyEstimator::LeaveOneOut));
  const double full = oracle::mean_nll(g.model, g.ds);
  for (std::size_t i = 0; i < 4; ++i) {
    const double without = oracle::mean_nll(g.model, g.ds, {UnitId{i, UnitKind::Block}});
    EXPECT_NEAR(t.scores[i].score, without - full, 1e-5);
  }
}

TEST(Shapley, LogitDistanceOfFullCoalitionIsZero) {
  Game g;
  const auto units = units_at(Granularity::Block, 4);
  CoalitionGame game(g.model, g.ds, units, options(ShapleyEstimator::LeaveOneOut, ShapleyObjective::LogitDistance));
  EXPECT_EQ(game.value(15), 0.0);
  EXPECT_GT(game.value(0), 0.0);
  EXPECT_EQ(game.evaluations(), 2u);
}

TEST(Shapley, UniformWeightingDiffersFromShapley) {
  Game g;
  const auto shap = shapley_influence(g.model, g.ds, Granularity::Block, options(ShapleyEstimator::Exhaustive));
  const auto uni =
      shapley_influence(g.model, g.ds, Granularity::Block, options(ShapleyEstimator::ExhaustiveUniform));
  EXPECT_NE(shap.values(), uni.values());
  EXPECT_EQ(uni.meta.estimator, "exhaustive_uniform");
}

TEST(Shapley, TaskLossRequiresTask) {
  Game g;
  EXPECT_THROW(shapley_influence(g.model, g.ds, Granularity::Block,
                                 options(ShapleyEstimator::LeaveOneOut, ShapleyObjective::TaskLoss)),
               ContractError);
}

TEST(Shapley, TaskLossRunsOnByteVocabulary) {
  const auto model = fixtures::random_model(fixtures::config(2, 16, 2, kByteVocab, 64), 9);
  const auto task = gen_mc_task({}, 4, 1, 2);
  auto opt = options(ShapleyEstimator::Exhaustive, ShapleyObjective::TaskLoss);
  opt.task = &task;
  const auto t = shapley_influence(model, PackedDataset{}, Granularity::Block, opt);
  for (double v : t.values()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(t.metric, MetricId::ShapleyTaskLoss);
}

TEST(Shapley, ExhaustiveOverSixteenUnitsIsRefused) {
  const auto model = fixtures::random_model(fixtures::config(9, 8), 1);
  const auto ds = fixtures::random_dataset(2, 8, 40, 1);
  EXPECT_THROW(shapley_influence(model, ds, Granularity::JointSublayer, options(ShapleyEstimator::Exhaustive)),
               ResourceError);
}
