#pragma once

#include <cstddef>
#include <vector>

#include "depthlab/data.hpp"
#include "depthlab/model.hpp"

// Plan-aware likelihood evaluation shared by the metrics, recovery and
// pipeline modules.
namespace depthlab {

// Rows per forward call in every streaming loop. Fixed so that per-chunk
// partial sums, merged in chunk order, do not depend on the thread count.
inline constexpr std::size_t kChunkRows = 4;

struct NllSum {
  double sum = 0.0;
  std::size_t count = 0;

  double mean() const;
};

// Summed next-token NLL over loss-masked positions of the whole dataset.
NllSum dataset_nll(const Model& model, const ExecutionPlan& plan, const PackedDataset& ds);

// Sum of log-probabilities of each option's tokens given the prompt.
std::vector<double> option_log_probs(const Model& model, const ExecutionPlan& plan, const McItem& item);

// Argmax, lowest index on ties.
std::size_t predict_option(const std::vector<double>& scores);

// Per-item option scores for the whole task (parallel over items).
std::vector<std::vector<double>> task_option_scores(const Model& model, const ExecutionPlan& plan, const McTask& task);

double mc_accuracy(const McTask& task, const std::vector<std::vector<double>>& scores);

// Mean over items of −log softmax(option scores)[correct].
double task_loss(const McTask& task, const std::vector<std::vector<double>>& scores);

}  // namespace depthlab
