#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "depthlab/data.hpp"
#include "depthlab/model.hpp"
#include "depthlab/rng.hpp"

namespace fixtures {

inline depthlab::ModelConfig config(std::size_t blocks, std::size_t dim, std::size_t heads = 2,
                                    std::size_t vocab = 40, std::size_t max_seq_len = 32) {
  depthlab::ModelConfig c;
  c.vocab_size = vocab;
  c.dim = dim;
  c.n_blocks = blocks;
  c.n_heads = heads;
  c.ffn_hidden = dim * 2;
  c.max_seq_len = max_seq_len;
  return c;
}

// Random model with every weight drawn at a larger scale than init_weights,
// so residual updates are not negligible next to the stream.
inline depthlab::Model random_model(const depthlab::ModelConfig& c, std::uint64_t seed, double scale = 0.3) {
  depthlab::Model m{c, depthlab::init_weights(c, seed)};
  depthlab::Rng rng(seed ^ 0x5eedULL);
  depthlab::TransformerWeights::visit(m.weights, [&](const std::string& name, depthlab::Tensor& t) {
    const bool gain = name.find("norm") != std::string::npos;
    for (auto& v : t.mutable_data()) v = static_cast<float>(gain ? rng.uniform(0.5, 1.5) : rng.normal(0.0, scale));
  });
  return m;
}

// `rows` sequences of random tokens from documents of varying length.
inline depthlab::PackedDataset random_dataset(std::size_t rows, std::size_t seq_len, std::size_t vocab,
                                              std::uint64_t seed) {
  depthlab::Rng rng(seed);
  std::vector<depthlab::TokenSeq> docs;
  std::size_t total = 0;
  while (total < rows * seq_len + seq_len) {
    depthlab::TokenSeq d(seq_len / 2 + rng.below(seq_len * 2));
    for (auto& id : d) id = static_cast<std::int32_t>(rng.below(vocab));
    total += d.size();
    docs.push_back(std::move(d));
  }
  return depthlab::pack(docs, seq_len, seed).slice(0, rows);
}

inline double rel_err(double got, double want, double floor = 1e-12) {
  return std::abs(got - want) / std::max({std::abs(want), std::abs(got), floor});
}

inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "depthlab_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace fixtures
