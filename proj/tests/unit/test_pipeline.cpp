#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "depthlab/errors.hpp"
#include "depthlab/parallel.hpp"
#include "depthlab/pipeline.hpp"
#include "depthlab/plot_data.hpp"
#include "depthlab/scoring.hpp"
#include "fixtures.hpp"
#include "oracle.hpp"

using namespace depthlab;

namespace {

struct Toy {
  Model model = fixtures::random_model(fixtures::config(4, 16), 41);
  PackedDataset calib = fixtures::random_dataset(6, 16, 40, 1);
  PackedDataset val = fixtures::random_dataset(6, 16, 40, 2);
  PruneOrder order = rank_units(cosine_influence(model, calib, Granularity::Block));
};

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST(Evaluate, UniformLogitsGiveLogVocab) {
  auto model = fixtures::random_model(fixtures::config(2, 16, 2, kByteVocab), 1);
  model.weights.unembed = Tensor::zeros({16, kByteVocab});
  const auto ds = fixtures::random_dataset(4, 16, kByteVocab, 3);
  const auto r = evaluate(model, ExecutionPlan::all_execute(2), ds);
  EXPECT_NEAR(r.mean_nll, std::log(258.0), 1e-6);
  EXPECT_NEAR(r.perplexity, 258.0, 1e-3);
}

TEST(Evaluate, MatchesOracleAndCountsTokens) {
  Toy s;
  const std::vector<UnitId> skipped{{1, UnitKind::Attention}, {3, UnitKind::Block}};
  const auto r = evaluate(s.model, ExecutionPlan::skipping(4, skipped), s.val);
  EXPECT_NEAR(r.mean_nll, oracle::mean_nll(s.model, s.val, skipped), 1e-5);
  const auto b = make_batch(s.val, 0, s.val.rows());
  std::size_t n = 0;
  for (auto m : b.loss_mask) n += m;
  EXPECT_EQ(r.n_tokens, n);
  EXPECT_FALSE(r.mc_accuracy.has_value());
}

TEST(Evaluate, OptionScoresMatchOracleLogProbs) {
  const auto model = fixtures::random_model(fixtures::config(2, 16, 2, kByteVocab, 64), 5);
  const auto task = gen_mc_task({}, 3, 1, 4);
  for (const auto& item : task.items) {
    const auto got = option_log_probs(model, ExecutionPlan::all_execute(2), item);
    for (std::size_t o = 0; o < item.options.size(); ++o) {
      TokenSeq seq = item.prompt;
      seq.insert(seq.end(), item.options[o].begin(), item.options[o].end());
      const auto t = oracle::forward(model, seq);
      double want = 0.0;
      for (std::size_t j = 0; j < item.options[o].size(); ++j) {
        const std::size_t pos = item.prompt.size() + j - 1;
        want += std::log(oracle::softmax(t.logits[pos])[static_cast<std::size_t>(seq[pos + 1])]);
      }
      EXPECT_NEAR(got[o], want, 1e-4);
    }
  }
}

TEST(Evaluate, AccuracyAndTaskLossByHand) {
  McTask task;
  task.items.resize(2);
  task.items[0].correct = 1;
  task.items[1].correct = 0;
  const std::vector<std::vector<double>> scores{{-1.0, -0.5}, {-2.0, -1.0}};
  EXPECT_DOUBLE_EQ(mc_accuracy(task, scores), 0.5);
  const double l0 = -std::log(std::exp(-0.5) / (std::exp(-1.0) + std::exp(-0.5)));
  const double l1 = -std::log(std::exp(-2.0) / (std::exp(-2.0) + std::exp(-1.0)));
  EXPECT_NEAR(task_loss(task, scores), (l0 + l1) / 2, 1e-12);
  EXPECT_EQ(predict_option({1.0, 3.0, 3.0}), 1u);
}

TEST(Sweep, NestingBaselineAndCompression) {
  Toy s;
  SweepOptions opt;
  opt.max_k = 3;
  const auto sweep = prune_sweep(s.model, s.order, {}, s.calib, s.val, nullptr, opt);
  ASSERT_EQ(sweep.size(), 4u);
  const auto full = evaluate(s.model, ExecutionPlan::all_execute(4), s.val);
  EXPECT_EQ(sweep[0].eval, full);
  EXPECT_TRUE(sweep[0].pruned_units.empty());
  for (std::size_t k = 1; k < sweep.size(); ++k) {
    ASSERT_EQ(sweep[k].pruned_units.size(), k);
    EXPECT_TRUE(std::equal(sweep[k - 1].pruned_units.begin(), sweep[k - 1].pruned_units.end(),
                           sweep[k].pruned_units.begin()));
    EXPECT_EQ(sweep[k].pruned_units.back(), s.order.units[k - 1]);
    EXPECT_DOUBLE_EQ(sweep[k].compression_ratio, k / 4.0);
    const auto direct = evaluate(s.model, ExecutionPlan::skipping(4, sweep[k].pruned_units), s.val);
    EXPECT_EQ(sweep[k].eval, direct);
  }
}

TEST(Sweep, DeterministicAcrossRunsAndThreads) {
  Toy s;
  SweepOptions opt;
  opt.max_k = 2;
  RecoverySpec rec{RecoveryKind::EmulatedUpdate, {}};
  set_num_threads(1);
  const auto a = sweep_csv(prune_sweep(s.model, s.order, rec, s.calib, s.val, nullptr, opt));
  set_num_threads(4);
  const auto b = sweep_csv(prune_sweep(s.model, s.order, rec, s.calib, s.val, nullptr, opt));
  const auto c = sweep_csv(prune_sweep(s.model, s.order, rec, s.calib, s.val, nullptr, opt));
  EXPECT_EQ(a, b);
  EXPECT_EQ(b, c);
}

TEST(Sweep, RecoveryBaselineIsUntouchedModel) {
  Toy s;
  SweepOptions opt;
  opt.max_k = 2;
  const auto full = evaluate(s.model, ExecutionPlan::all_execute(4), s.val);
  for (auto kind : {RecoveryKind::EmulatedUpdate, RecoveryKind::Adapter}) {
    RecoverySpec rec{kind, {}};
    rec.adapter.rank = 2;
    rec.adapter.steps = 3;
    rec.adapter.effective_batch = 2;
    const auto sweep = prune_sweep(s.model, s.order, rec, s.calib, s.val, nullptr, opt);
    EXPECT_EQ(sweep[0].eval, full) << to_string(kind);
    EXPECT_EQ(sweep[1].recovery.label(), kind == RecoveryKind::Adapter ? "adapter_r2_mse_repr" : "emulated_update");
  }
}

TEST(Sweep, IterativeRescoringPicksLeastInfluentialRemaining) {
  Toy s;
  SweepOptions opt;
  opt.max_k = 2;
  opt.iterative = true;
  const auto sweep = prune_sweep(s.model, s.order, {}, s.calib, s.val, nullptr, opt);
  EXPECT_EQ(sweep[1].pruned_units.front(), s.order.units.front());
  const auto plan = ExecutionPlan::skipping(4, sweep[1].pruned_units);
  MetricContext ctx;
  ctx.base_plan = &plan;
  std::vector<UnitId> remaining;
  for (const auto& u : s.order.units) {
    if (u != sweep[1].pruned_units.front()) remaining.push_back(u);
  }
  ctx.units = remaining;
  const auto second = rank_units(compute_influence(s.model, s.calib, MetricRequest{}, ctx)).units.front();
  EXPECT_EQ(sweep[2].pruned_units.back(), second);
}

TEST(Sweep, Errors) {
  Toy s;
  SweepOptions opt;
  opt.max_k = 5;
  EXPECT_THROW(prune_sweep(s.model, s.order, {}, s.calib, s.val, nullptr, opt), ContractError);
  RecoveryBundle empty;
  EXPECT_THROW(recovery_plan(4, {UnitId{0, UnitKind::Block}}, RecoveryKind::Adapter, empty), PlanError);
}

TEST(Report, RelativeDeltasAndCsv) {
  Toy s;
  SweepOptions opt;
  opt.max_k = 2;
  const auto base = prune_sweep(s.model, s.order, {}, s.calib, s.val, nullptr, opt);
  const auto rec = prune_sweep(s.model, s.order, {RecoveryKind::EmulatedUpdate, {}}, s.calib, s.val, nullptr, opt);
  const auto rel = relative_report(rec, base);
  EXPECT_EQ(rel[0].relative->mean_nll, 0.0);
  EXPECT_DOUBLE_EQ(rel[2].relative->mean_nll, rec[2].eval.mean_nll - base[2].eval.mean_nll);
  EXPECT_THROW(relative_report(rec, std::vector<SweepRecord>(base.begin(), base.begin() + 2)), ContractError);

  const auto rows = lines(sweep_csv(base));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], "k,compression_ratio,pruned_units,mean_nll,perplexity");
  EXPECT_EQ(rows[1].substr(0, 5), "0,0,,");
  EXPECT_EQ(rows[3].substr(0, 7), "2,0.5," + to_string(s.order.units[0]).substr(0, 1));
  EXPECT_EQ(format_number(1.0 / 3.0), "0.333333");
  EXPECT_EQ(format_number(-0.0), "0");
  EXPECT_EQ(format_number(1234567.0), "1.23457e+06");
}

TEST(Report, PlotTablesFamilies) {
  Toy s;
  SweepOptions opt;
  opt.max_k = 1;
  PlotInputs in;
  in.sweeps.push_back({"cosine", Granularity::Block, prune_sweep(s.model, s.order, {}, s.calib, s.val, nullptr, opt)});
  auto t1 = plot_tables(in);
  EXPECT_EQ(t1.size(), 1u);
  EXPECT_EQ(lines(t1["metric_comparison"]).size(), 3u);
  EXPECT_EQ(lines(t1["metric_comparison"])[1].substr(0, 19), "cosine@block/none,0");

  const auto attn_order = rank_units(cosine_influence(s.model, s.calib, Granularity::Attention));
  in.sweeps.push_back(
      {"cosine", Granularity::Attention, prune_sweep(s.model, attn_order, {}, s.calib, s.val, nullptr, opt)});
  in.update_norms = UpdateNormSeries{units_at(Granularity::JointSublayer, 4),
                                     update_norm(s.model, s.calib, Granularity::JointSublayer)};
  in.evolution = EvolutionSeries{{100, 200}, {cosine_influence(s.model, s.calib, Granularity::Block),
                                              cosine_influence(s.model, s.calib, Granularity::Block)}};
  const auto t2 = plot_tables(in);
  EXPECT_EQ(t2.size(), 4u);
  EXPECT_EQ(lines(t2.at("attention_vs_ffn")).size(), 3u);
  EXPECT_EQ(lines(t2.at("update_norms")).size(), 9u);
  EXPECT_EQ(lines(t2.at("update_norms"))[1].substr(0, 12), "attn,0,updat");
  EXPECT_EQ(lines(t2.at("influence_evolution")).size(), 9u);
  EXPECT_THROW(plot_tables(PlotInputs{}), ContractError);

  const auto dir = fixtures::temp_dir("plots");
  const auto written = emit_plot_data(in, dir);
  EXPECT_EQ(written.size(), 4u);
  for (const auto& p : written) EXPECT_TRUE(std::filesystem::exists(p));
}
