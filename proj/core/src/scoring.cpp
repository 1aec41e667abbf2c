#include "depthlab/scoring.hpp"

#include <cmath>
#include <limits>

#include "depthlab/errors.hpp"
#include "depthlab/ops.hpp"
#include "depthlab/parallel.hpp"

namespace depthlab {

double NllSum::mean() const {
  if (count == 0) throw ContractError("mean NLL over zero positions");
  return sum / static_cast<double>(count);
}

NllSum dataset_nll(const Model& model, const ExecutionPlan& plan, const PackedDataset& ds) {
  if (ds.empty()) throw ContractError("dataset_nll: empty dataset");
  const auto chunks = row_chunks(ds.rows(), kChunkRows);
  std::vector<NllSum> parts(chunks.size());
  parallel_for(chunks.size(), [&](std::size_t c) {
    const Batch batch = make_batch(ds, chunks[c].first, chunks[c].second);
    const auto result = forward(model, batch.tokens, plan);
    const auto logp = ops::target_log_probs(result.logits, batch.targets);
    NllSum part;
    for (std::size_t i = 0; i < logp.size(); ++i) {
      if (!batch.loss_mask[i]) continue;
      part.sum -= logp[i];
      ++part.count;
    }
    parts[c] = part;
  });
  NllSum total;
  for (const auto& p : parts) {
    total.sum += p.sum;
    total.count += p.count;
  }
  if (total.count == 0) throw ContractError("dataset_nll: every position is masked");
  return total;
}

std::vector<double> option_log_probs(const Model& model, const ExecutionPlan& plan, const McItem& item) {
  if (item.options.empty()) throw ContractError("MC item without options");
  if (item.prompt.empty()) throw ContractError("MC item without a prompt");
  const std::size_t opt_len = item.options.front().size();
  for (const auto& o : item.options) {
    if (o.size() != opt_len || o.empty()) throw ContractError("MC options must be non-empty and equal-length");
  }
  const std::size_t p = item.prompt.size();
  const std::size_t T = p + opt_len;
  TokenMatrix tokens(item.options.size(), T);
  for (std::size_t r = 0; r < item.options.size(); ++r) {
    auto row = tokens.row(r);
    std::copy(item.prompt.begin(), item.prompt.end(), row.begin());
    std::copy(item.options[r].begin(), item.options[r].end(), row.begin() + static_cast<std::ptrdiff_t>(p));
  }
  const auto logits = forward(model, tokens, plan).logits;

  std::vector<std::int32_t> targets(tokens.size(), 0);
  for (std::size_t r = 0; r < tokens.rows; ++r) {
    for (std::size_t t = 0; t + 1 < T; ++t) targets[r * T + t] = tokens.ids[r * T + t + 1];
  }
  const auto logp = ops::target_log_probs(logits, targets);
  std::vector<double> scores(item.options.size(), 0.0);
  for (std::size_t r = 0; r < tokens.rows; ++r) {
    // Option token j sits at position p + j and is predicted at p + j − 1.
    for (std::size_t j = 0; j < opt_len; ++j) scores[r] += logp[r * T + p + j - 1];
  }
  return scores;
}

std::size_t predict_option(const std::vector<double>& scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

std::vector<std::vector<double>> task_option_scores(const Model& model, const ExecutionPlan& plan, const McTask& task) {
  std::vector<std::vector<double>> out(task.items.size());
  parallel_for(task.items.size(), [&](std::size_t i) { out[i] = option_log_probs(model, plan, task.items[i]); });
  return out;
}

double mc_accuracy(const McTask& task, const std::vector<std::vector<double>>& scores) {
  if (task.items.empty() || scores.size() != task.items.size()) throw ContractError("mc_accuracy: score count mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) hits += predict_option(scores[i]) == task.items[i].correct ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

double task_loss(const McTask& task, const std::vector<std::vector<double>>& scores) {
  if (task.items.empty() || scores.size() != task.items.size()) throw ContractError("task_loss: score count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto& s = scores[i];
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : s) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : s) z += std::exp(v - mx);
    total -= s[task.items[i].correct] - mx - std::log(z);
  }
  return total / static_cast<double>(scores.size());
}

}  // namespace depthlab
