#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "depthlab/model.hpp"

namespace depthlab {

inline constexpr std::int32_t kBos = 256;
inline constexpr std::int32_t kEos = 257;
inline constexpr std::size_t kByteVocab = 258;

using TokenSeq = std::vector<std::int32_t>;

// One id per byte, no framing.
TokenSeq tokenize_bytes(std::string_view text);
// [BOS, bytes..., EOS]
TokenSeq frame_document(std::string_view text);
std::string detokenize(std::span<const std::int32_t> ids);

enum class CorpusLayout { Directory, BlankLineSeparated };

// Directory: every regular file is one document (sorted by file name).
// BlankLineSeparated: a single file, documents separated by empty lines.
std::vector<std::string> load_corpus(const std::filesystem::path& path, CorpusLayout layout);

// Rows are consecutive, non-overlapping T-token chunks of the shuffled,
// framed, concatenated documents. Targets are taken within a row, so the
// last position of each row has no target. boundary_mask[i] is set when the
// target of position i belongs to a different document than position i.
struct PackedDataset {
  TokenMatrix sequences;
  std::vector<std::uint8_t> boundary_mask;  // one flag per position
  std::size_t doc_count = 0;

  std::size_t rows() const noexcept { return sequences.rows; }
  std::size_t seq_len() const noexcept { return sequences.cols; }
  bool empty() const noexcept { return sequences.rows == 0; }

  PackedDataset subset(std::span<const std::size_t> row_ids) const;
  PackedDataset slice(std::size_t begin, std::size_t end) const;

  friend bool operator==(const PackedDataset&, const PackedDataset&) = default;
};

PackedDataset pack(std::span<const TokenSeq> docs, std::size_t seq_len, std::uint64_t seed);
PackedDataset pack_texts(std::span<const std::string> docs, std::size_t seq_len, std::uint64_t seed);

struct DatasetSplit {
  PackedDataset calibration;
  PackedDataset validation;
};

DatasetSplit split(const PackedDataset& ds, double calib_fraction, std::uint64_t seed);

// Rows [begin, end) flattened for one forward call.
//   targets[i]     next token (0 where there is none)
//   loss_mask[i]   1 where a target exists and does not cross a document
//   token_mask[i]  1 where the position is not boundary-masked; used by
//                  representation statistics, which need no target
struct Batch {
  TokenMatrix tokens;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> loss_mask;
  std::vector<std::uint8_t> token_mask;
};

Batch make_batch(const PackedDataset& ds, std::size_t begin, std::size_t end);

// Row ranges of at most `rows_per_chunk` rows. The chunking only depends on
// the dataset size, never on the thread count.
std::vector<std::pair<std::size_t, std::size_t>> row_chunks(std::size_t rows, std::size_t rows_per_chunk);

void save_dataset(const PackedDataset& ds, const std::filesystem::path& path);
PackedDataset load_dataset(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Synthetic text

struct SyntheticCorpusSpec {
  std::size_t n_docs = 4000;
  std::size_t min_sentences = 3;
  std::size_t max_sentences = 9;
  // Chance that a sentence slot holds a pattern line instead of prose.
  double pattern_rate = 0.3;
};

// Short stories over a small vocabulary with recurring names, interleaved
// with "copy: abc -> abc." and "flip: abc -> cba." lines. Deterministic in
// `seed`.
std::vector<std::string> synthetic_corpus(const SyntheticCorpusSpec& spec, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Multiple-choice task

enum class McRule { Copy, Flip };

std::string to_string(McRule rule);
McRule parse_mc_rule(const std::string& text);

struct McItem {
  TokenSeq prompt;  // starts with BOS, ends right before the answer
  std::vector<TokenSeq> options;
  std::size_t correct = 0;

  friend bool operator==(const McItem&, const McItem&) = default;
};

struct McTask {
  McRule rule = McRule::Copy;
  std::vector<McItem> items;
  std::size_t n_shots = 0;

  friend bool operator==(const McTask&, const McTask&) = default;
};

struct McTaskSpec {
  McRule rule = McRule::Copy;
  std::size_t word_len = 3;
  std::size_t n_options = 4;
};

McTask gen_mc_task(const McTaskSpec& spec, std::size_t n_items, std::size_t n_shots, std::uint64_t seed);

}  // namespace depthlab

