#include <benchmark/benchmark.h>

#include "depthlab/autograd.hpp"
#include "depthlab/data.hpp"
#include "depthlab/metrics.hpp"
#include "depthlab/model.hpp"
#include "depthlab/ops.hpp"
#include "depthlab/rng.hpp"

namespace {

using namespace depthlab;

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.normal());
  return t;
}

TokenMatrix random_tokens(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  TokenMatrix m(rows, cols);
  Rng rng(seed);
  for (auto& id : m.ids) id = static_cast<std::int32_t>(rng.below(kByteVocab));
  return m;
}

ModelConfig desk_config() {
  ModelConfig c;
  c.max_seq_len = 256;
  return c;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor({n, n}, 1);
  const Tensor b = random_tensor({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256)->Arg(512);

void BM_Forward(benchmark::State& state) {
  const Model model = make_model(desk_config(), 3);
  const auto tokens = random_tokens(4, static_cast<std::size_t>(state.range(0)), 4);
  const auto plan = ExecutionPlan::all_execute(model.config.n_blocks);
  for (auto _ : state) benchmark::DoNotOptimize(forward(model, tokens, plan));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(tokens.size()));
}
BENCHMARK(BM_Forward)->Arg(64)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_AttentionSublayer(benchmark::State& state) {
  const ModelConfig config = desk_config();
  const auto weights = init_weights(config, 5);
  const auto t = static_cast<std::size_t>(state.range(0));
  const Tensor h = random_tensor({t, config.dim}, 6);
  for (auto _ : state) benchmark::DoNotOptimize(attention_sublayer(h, weights.blocks[0], config));
}
BENCHMARK(BM_AttentionSublayer)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  const ModelConfig config = desk_config();
  const auto weights = init_weights(config, 7);
  const auto tokens = random_tokens(16, static_cast<std::size_t>(state.range(0)), 8);
  std::vector<std::int32_t> targets(tokens.size());
  std::vector<std::uint8_t> mask(tokens.size(), 1);
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) targets[i] = tokens.ids[i + 1];
  const auto plan = ExecutionPlan::all_execute(config.n_blocks);
  for (auto _ : state) {
    ad::Tape<float> tape;
    const auto wv = bind_watched(tape, weights);
    const auto g = build_graph(tape, config, wv, tokens, plan);
    benchmark::DoNotOptimize(tape.backward(ad::masked_nll(g.logits, targets, mask)));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(tokens.size()));
}
BENCHMARK(BM_TrainStep)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_CosineInfluence(benchmark::State& state) {
  const Model model = make_model(desk_config(), 9);
  auto docs = synthetic_corpus({.n_docs = 60}, 10);
  const auto ds = pack_texts(docs, 128, 11).slice(0, 8);
  for (auto _ : state) benchmark::DoNotOptimize(static_scores(model, ds, Granularity::Block));
}
BENCHMARK(BM_CosineInfluence)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
