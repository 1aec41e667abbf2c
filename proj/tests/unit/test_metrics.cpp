#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "depthlab/errors.hpp"
#include "depthlab/metrics.hpp"
#include "depthlab/parallel.hpp"
#include "depthlab/rng.hpp"
#include "fixtures.hpp"
#include "oracle.hpp"

using namespace depthlab;

namespace {

Model zero_block(Model m, std::size_t block) {
  for (auto& v : m.weights.blocks[block].wo.mutable_data()) v = 0.0f;
  for (auto& v : m.weights.blocks[block].w2.mutable_data()) v = 0.0f;
  return m;
}

InfluenceTable table_of(std::vector<double> values, Granularity g = Granularity::Block) {
  InfluenceTable t;
  t.granularity = g;
  const auto units = units_at(g, values.size() / (g == Granularity::JointSublayer ? 2 : 1));
  for (std::size_t i = 0; i < values.size(); ++i) t.scores.push_back({units[i], values[i]});
  return t;
}

}  // namespace

TEST(StaticScores, MatchScalarOracle) {
  const auto model = fixtures::random_model(fixtures::config(4, 32, 4), 11);
  const auto ds = fixtures::random_dataset(8, 16, 40, 3);
  for (auto g : {Granularity::Block, Granularity::Attention, Granularity::FeedForward, Granularity::JointSublayer}) {
    const auto got = static_scores(model, ds, g);
    const auto want = oracle::static_scores(model, ds, got.units);
    ASSERT_EQ(got.units, units_at(g, 4));
    for (std::size_t u = 0; u < got.units.size(); ++u) {
      EXPECT_LE(fixtures::rel_err(got.cosine[u], want.cosine[u]), 1e-6) << to_string(got.units[u]);
      EXPECT_LE(fixtures::rel_err(got.rel_l1[u], want.rel_l1[u]), 1e-6) << to_string(got.units[u]);
      EXPECT_LE(fixtures::rel_err(got.rel_l2[u], want.rel_l2[u]), 1e-6) << to_string(got.units[u]);
      EXPECT_LE(fixtures::rel_err(got.update_l2[u], want.update_l2[u]), 1e-6) << to_string(got.units[u]);
    }
  }
}

TEST(StaticScores, TokenCountSkipsBoundaryPositions) {
  const auto model = fixtures::random_model(fixtures::config(2, 16), 1);
  const auto ds = fixtures::random_dataset(6, 16, 40, 9);
  const auto s = static_scores(model, ds, Granularity::Block);
  const auto masked = static_cast<std::size_t>(std::count(ds.boundary_mask.begin(), ds.boundary_mask.end(), 1));
  EXPECT_GT(masked, 0u);
  EXPECT_EQ(s.n_tokens, ds.rows() * ds.seq_len() - masked);
}

TEST(StaticScores, SameForAnyThreadCount) {
  const auto model = fixtures::random_model(fixtures::config(3, 16), 2);
  const auto ds = fixtures::random_dataset(10, 16, 40, 4);
  set_num_threads(1);
  const auto one = static_scores(model, ds, Granularity::JointSublayer);
  set_num_threads(4);
  const auto four = static_scores(model, ds, Granularity::JointSublayer);
  EXPECT_EQ(one.cosine, four.cosine);
  EXPECT_EQ(one.rel_l1, four.rel_l1);
  EXPECT_EQ(one.rel_l2, four.rel_l2);
}

TEST(NullPlayer, ZeroedBlockScoresZeroUnderEveryFamily) {
  const auto model = zero_block(fixtures::random_model(fixtures::config(4, 16), 5), 2);
  const auto ds = fixtures::random_dataset(6, 16, 40, 1);
  const UnitId unit{2, UnitKind::Block};
  const auto s = static_scores(model, ds, Granularity::Block);
  EXPECT_LE(std::abs(s.cosine[2]), 1e-6);
  EXPECT_LE(std::abs(s.rel_l1[2]), 1e-6);
  EXPECT_LE(std::abs(s.rel_l2[2]), 1e-6);
  for (auto objective : {ShapleyObjective::LogitDistance, ShapleyObjective::LmLoss}) {
    for (auto estimator : {ShapleyEstimator::LeaveOneOut, ShapleyEstimator::Exhaustive,
                           ShapleyEstimator::PermutationMc}) {
      ShapleyOptions o;
      o.objective = objective;
      o.estimator = estimator;
      o.n_permutations = 20;
      EXPECT_LE(std::abs(shapley_influence(model, ds, Granularity::Block, o).score(unit)), 1e-6)
          << to_string(objective) << "/" << to_string(estimator);
    }
  }
}

TEST(StaticScores, ZeroNormInputsAreExcluded) {
  auto model = fixtures::random_model(fixtures::config(1, 8, 2, 4), 3);
  // Embedding row 0 is zero: positions holding token 0 have a zero block input.
  for (std::size_t c = 0; c < 8; ++c) model.weights.embed.mutable_data()[c] = 0.0f;
  const std::vector<TokenSeq> docs{TokenSeq{0, 1, 0, 2, 0, 3, 0, 1, 2}};
  const auto ds = pack(docs, 8, 0);
  const auto s = static_scores(model, ds, Granularity::Block);
  EXPECT_EQ(s.excluded_cosine[0], 4u);
  EXPECT_EQ(s.excluded_rel_l2[0], 4u);
  EXPECT_TRUE(std::isfinite(s.cosine[0]));

  const std::vector<TokenSeq> zeros{TokenSeq(9, 0)};
  EXPECT_THROW(static_scores(model, pack(zeros, 8, 0), Granularity::Block), DegenerateInputError);
}

TEST(StaticScores, IterativeContextScoresRemainingUnits) {
  const auto model = fixtures::random_model(fixtures::config(3, 16), 7);
  const auto ds = fixtures::random_dataset(4, 16, 40, 2);
  const std::vector<UnitId> pruned{{1, UnitKind::Block}};
  const auto plan = ExecutionPlan::skipping(3, pruned);
  MetricContext ctx;
  ctx.base_plan = &plan;
  ctx.units = std::vector<UnitId>{{0, UnitKind::Block}, {2, UnitKind::Block}};
  const auto got = static_scores(model, ds, Granularity::Block, ctx);
  ASSERT_EQ(got.units.size(), 2u);
  // Oracle: a two-block model made of blocks 0 and 2.
  Model reduced = model;
  reduced.config.n_blocks = 2;
  reduced.weights.blocks = {model.weights.blocks[0], model.weights.blocks[2]};
  const auto want = oracle::static_scores(reduced, ds, units_at(Granularity::Block, 2));
  for (std::size_t u = 0; u < 2; ++u) EXPECT_LE(fixtures::rel_err(got.cosine[u], want.cosine[u]), 1e-6);
}

TEST(Ranking, AscendingWithDocumentedTieBreak) {
  const auto order = rank_units(table_of({0.3, 0.1, 0.3, 0.2}));
  const std::vector<UnitId> want{{1, UnitKind::Block}, {3, UnitKind::Block}, {2, UnitKind::Block},
                                 {0, UnitKind::Block}};
  EXPECT_EQ(order.units, want);
  EXPECT_EQ(order.tie_break_rule, kTieBreakRule);

  const auto joint = rank_units(table_of({0.5, 0.5, 0.1, 0.7}, Granularity::JointSublayer));
  const std::vector<UnitId> want_joint{{1, UnitKind::Attention}, {0, UnitKind::FeedForward},
                                       {0, UnitKind::Attention}, {1, UnitKind::FeedForward}};
  EXPECT_EQ(joint.units, want_joint);
  EXPECT_THROW(rank_units(table_of({0.1, std::nan("")})), ContractError);
}

TEST(Normalize, MinMaxRangeAndConstantTables) {
  const auto n = minmax_normalize(table_of({2.0, 4.0, 3.0}));
  EXPECT_EQ(n.values(), (std::vector<double>{0.0, 1.0, 0.5}));
  EXPECT_TRUE(n.normalized);
  EXPECT_EQ(minmax_normalize(table_of({7.0, 7.0})).values(), (std::vector<double>{0.5, 0.5}));
}

TEST(Normalize, NeverChangesRanking) {
  Rng rng(42);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(12);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.below(4) == 0 ? static_cast<double>(rng.below(3)) : rng.normal(0.0, 10.0);
    const auto t = table_of(v);
    ASSERT_EQ(rank_units(t).units, rank_units(minmax_normalize(t)).units) << "trial " << trial;
  }
}

TEST(InfluenceTable, JsonRoundTrip) {
  auto t = table_of({0.25, -1.5, 3.0}, Granularity::Block);
  t.metric = MetricId::ShapleyLmLoss;
  t.meta.estimator = "permutation_mc";
  t.meta.n_permutations = 8;
  t.meta.std_errors = {0.1, 0.2, 0.3};
  EXPECT_EQ(influence_table_from_json(to_json(t)), t);
  const auto dir = fixtures::temp_dir("influence_json");
  write_influence_table(t, dir / "t.json");
  EXPECT_EQ(read_influence_table(dir / "t.json"), t);
}

TEST(Dispatch, ComputeInfluenceMatchesDirectCalls) {
  const auto model = fixtures::random_model(fixtures::config(2, 16), 8);
  const auto ds = fixtures::random_dataset(4, 16, 40, 8);
  MetricRequest r;
  r.metric = MetricId::RelL2;
  EXPECT_EQ(compute_influence(model, ds, r), relative_lp_influence(model, ds, 2, Granularity::Block));
  r.metric = MetricId::AdapterLoss;
  EXPECT_THROW(compute_influence(model, ds, r), ContractError);
}

TEST(Evolution, LastTableEqualsFreshComputation) {
  const auto cfg = fixtures::config(2, 16);
  std::vector<Model> snaps;
  for (std::uint64_t s = 0; s < 5; ++s) snaps.push_back(fixtures::random_model(cfg, s));
  const auto ds = fixtures::random_dataset(4, 16, 40, 5);
  MetricRequest r;
  const auto tables = influence_evolution(snaps, ds, r);
  ASSERT_EQ(tables.size(), 5u);
  EXPECT_EQ(tables.back(), compute_influence(snaps.back(), ds, r));
  snaps.push_back(fixtures::random_model(fixtures::config(3, 16), 1));
  EXPECT_THROW(influence_evolution(snaps, ds, r), ContractError);
}
