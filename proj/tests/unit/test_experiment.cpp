#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "depthlab/errors.hpp"
#include "depthlab/experiment.hpp"
#include "depthlab/parallel.hpp"
#include "fixtures.hpp"

using namespace depthlab;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path toy_checkpoint(const fs::path& dir) {
  const auto model = fixtures::random_model(fixtures::config(4, 16, 2, kByteVocab, 64), 77, 0.1);
  save_checkpoint(model, dir / "toy.prlb");
  return dir / "toy.prlb";
}

std::string base_yaml(const std::string& out) {
  return "seed: 3\n"
         "checkpoint: toy.prlb\n"
         "data: {synthetic_docs: 40, seq_len: 32, calib_fraction: 0.5, calibration_rows: 6, validation_rows: 6}\n"
         "task: {rule: copy, n_items: 4, n_shots: 1}\n"
         "metrics: [cosine, rel_l2, shapley_lm_loss, random]\n"
         "granularities: [block, attention]\n"
         "recoveries: [none, emulated_update]\n"
         "max_k: 2\n"
         "output_dir: " + out + "\n";
}

std::map<std::string, std::string> csv_outputs(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".csv") out[e.path().filename().string()] = slurp(e.path());
  }
  return out;
}

}  // namespace

TEST(ExperimentConfig, ParsesAndResolvesPaths) {
  const auto c = parse_experiment_config(base_yaml("out"), "/base");
  EXPECT_EQ(c.checkpoint, fs::path("/base/toy.prlb"));
  EXPECT_EQ(c.output_dir, fs::path("/base/out"));
  EXPECT_EQ(c.synthetic_docs, 40u);
  EXPECT_EQ(c.metrics.size(), 4u);
  EXPECT_EQ(c.recoveries.size(), 2u);
  ASSERT_TRUE(c.task.has_value());
  EXPECT_EQ(c.task->n_items, 4u);
  EXPECT_EQ(to_json(c).at("max_k"), 2);
}

TEST(ExperimentConfig, RejectsBadConfigs) {
  const std::string ok = base_yaml("out");
  EXPECT_THROW(parse_experiment_config(ok + "bogus: 1\n", "/"), InputError);
  EXPECT_THROW(parse_experiment_config("seed: [1\n", "/"), InputError);
  EXPECT_THROW(parse_experiment_config("", "/"), InputError);
  EXPECT_THROW(parse_experiment_config("checkpoint: a\nmetrics: [cosine]\n", "/"), InputError);
  EXPECT_THROW(parse_experiment_config(ok + "iterative: true\n", "/"), InputError);
  EXPECT_THROW(parse_experiment_config("checkpoint: a\ndata: {synthetic_docs: 5}\nmetrics: [shapley_task_loss]\n", "/"),
               InputError);
  EXPECT_THROW(load_experiment_config("/nonexistent/config.yaml"), InputError);
}

TEST(Experiment, WritesReportAndIsDeterministicAcrossThreads) {
  const auto dir = fixtures::temp_dir("experiment");
  toy_checkpoint(dir);
  std::ofstream(dir / "a.yaml") << base_yaml("out_a") << "threads: 1\n";
  std::ofstream(dir / "b.yaml") << base_yaml("out_b") << "threads: 4\n";
  std::ofstream(dir / "c.yaml") << base_yaml("out_c") << "threads: 4\n";
  const auto a = run_experiment(load_experiment_config(dir / "a.yaml"));
  run_experiment(load_experiment_config(dir / "b.yaml"));
  run_experiment(load_experiment_config(dir / "c.yaml"));
  const auto ca = csv_outputs(dir / "out_a");
  EXPECT_EQ(ca, csv_outputs(dir / "out_b"));
  EXPECT_EQ(ca, csv_outputs(dir / "out_c"));
  EXPECT_TRUE(ca.count("sweep_cosine_block_none.csv"));
  EXPECT_TRUE(ca.count("sweep_random_attention_emulated_update.csv"));
  EXPECT_TRUE(ca.count("plot_metric_comparison.csv"));
  EXPECT_TRUE(ca.count("plot_attention_vs_ffn.csv"));
  EXPECT_TRUE(ca.count("plot_recovery_relative.csv"));

  const auto report = nlohmann::json::parse(slurp(dir / "out_a" / "report.json"));
  EXPECT_EQ(report.at("status"), "complete");
  EXPECT_EQ(report.at("version"), version_string());
  EXPECT_FALSE(a.files.empty());
  const auto header = slurp(dir / "out_a" / "sweep_cosine_block_none.csv").substr(0, 100);
  EXPECT_EQ(header.substr(0, header.find('\n')), "k,compression_ratio,pruned_units,mean_nll,perplexity,mc_accuracy");
}

TEST(Experiment, FailureLeavesIncompleteReport) {
  const auto dir = fixtures::temp_dir("experiment_fail");
  toy_checkpoint(dir);
  std::ofstream(dir / "big.yaml") << base_yaml("out") << "shapley: {estimator: exhaustive}\n";
  auto cfg = load_experiment_config(dir / "big.yaml");
  cfg.max_k = 9;
  try {
    run_experiment(cfg);
    FAIL() << "expected a PipelineError";
  } catch (const PipelineError& e) {
    EXPECT_EQ(e.stage(), "guard");
  }
  const auto report = nlohmann::json::parse(slurp(dir / "out" / "report.json"));
  EXPECT_EQ(report.at("status"), "incomplete");
  EXPECT_EQ(report.at("failed_stage"), "guard");

  cfg.max_k = 1;
  cfg.checkpoint = dir / "missing.prlb";
  try {
    run_experiment(cfg);
    FAIL() << "expected a PipelineError";
  } catch (const PipelineError& e) {
    EXPECT_EQ(e.stage(), "load");
  }
}

TEST(Experiment, ExhaustiveShapleyOverSixteenUnitsIsRefused) {
  const auto dir = fixtures::temp_dir("experiment_resource");
  const auto model = fixtures::random_model(fixtures::config(9, 8, 2, kByteVocab, 64), 1);
  save_checkpoint(model, dir / "toy.prlb");
  std::ofstream(dir / "c.yaml") << "checkpoint: toy.prlb\n"
                                   "data: {synthetic_docs: 20, seq_len: 16}\n"
                                   "metrics: [shapley_lm_loss]\n"
                                   "granularities: [joint_sublayer]\n"
                                   "shapley: {estimator: exhaustive}\n"
                                   "max_k: 1\n";
  try {
    run_experiment(load_experiment_config(dir / "c.yaml"));
    FAIL() << "expected a PipelineError";
  } catch (const PipelineError& e) {
    EXPECT_EQ(e.stage(), "guard");
    EXPECT_NE(std::string(e.what()).find("exceeds the limit"), std::string::npos);
  }
}
