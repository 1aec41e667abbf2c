#include "depthlab/data.hpp"

#include <algorithm>
#include <cmath>

#include "depthlab/container.hpp"
#include "depthlab/errors.hpp"
#include "depthlab/rng.hpp"

namespace depthlab {

TokenSeq tokenize_bytes(std::string_view text) {
  TokenSeq ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<std::int32_t>(c));
  return ids;
}

TokenSeq frame_document(std::string_view text) {
  TokenSeq ids;
  ids.reserve(text.size() + 2);
  ids.push_back(kBos);
  for (unsigned char c : text) ids.push_back(static_cast<std::int32_t>(c));
  ids.push_back(kEos);
  return ids;
}

std::string detokenize(std::span<const std::int32_t> ids) {
  std::string out;
  for (auto id : ids) {
    if (id == kBos) continue;
    if (id == kEos) {
      out += '\n';
      continue;
    }
    out += static_cast<char>(static_cast<unsigned char>(id));
  }
  return out;
}

std::vector<std::string> load_corpus(const std::filesystem::path& path, CorpusLayout layout) {
  std::vector<std::string> docs;
  if (layout == CorpusLayout::Directory) {
    if (!std::filesystem::is_directory(path)) throw InputError("corpus directory '" + path.string() + "' not found");
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(path)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      auto text = read_file(f);
      if (!text.empty()) docs.push_back(std::move(text));
    }
    return docs;
  }

  const std::string text = read_file(path);
  std::string current;
  std::size_t pos = 0;
  auto flush = [&] {
    while (!current.empty() && current.back() == '\n') current.pop_back();
    if (!current.empty()) docs.push_back(std::move(current));
    current.clear();
  };
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string_view line(text.data() + pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) {
      flush();
    } else {
      current.append(line);
      current += '\n';
    }
    pos = nl + 1;
  }
  flush();
  return docs;
}

PackedDataset pack(std::span<const TokenSeq> docs, std::size_t seq_len, std::uint64_t seed) {
  if (seq_len < 2) throw ContractError("pack: sequence length must be at least 2");
  std::vector<std::size_t> order(docs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  std::vector<std::int32_t> stream;
  std::vector<std::uint32_t> doc_of;  // document ordinal per stream position
  std::size_t doc_count = 0;
  for (std::size_t i : order) {
    if (docs[i].empty()) continue;
    for (auto id : docs[i]) {
      if (id < 0 || static_cast<std::size_t>(id) >= kByteVocab) throw InputError("pack: token id outside vocabulary");
      stream.push_back(id);
      doc_of.push_back(static_cast<std::uint32_t>(doc_count));
    }
    ++doc_count;
  }
  const std::size_t n_rows = stream.size() / seq_len;
  if (n_rows == 0) {
    throw EmptyDatasetError("pack: " + std::to_string(stream.size()) + " tokens do not fill one sequence of " +
                            std::to_string(seq_len));
  }

  PackedDataset ds;
  ds.doc_count = doc_count;
  stream.resize(n_rows * seq_len);
  ds.sequences = TokenMatrix(n_rows, seq_len, std::move(stream));
  ds.boundary_mask.assign(n_rows * seq_len, 0);
  for (std::size_t r = 0; r < n_rows; ++r) {
    for (std::size_t t = 0; t + 1 < seq_len; ++t) {
      const std::size_t i = r * seq_len + t;
      if (doc_of[i] != doc_of[i + 1]) ds.boundary_mask[i] = 1;
    }
  }
  return ds;
}

PackedDataset pack_texts(std::span<const std::string> docs, std::size_t seq_len, std::uint64_t seed) {
  std::vector<TokenSeq> framed;
  framed.reserve(docs.size());
  for (const auto& d : docs) framed.push_back(frame_document(d));
  return pack(framed, seq_len, seed);
}

PackedDataset PackedDataset::subset(std::span<const std::size_t> row_ids) const {
  PackedDataset out;
  out.doc_count = doc_count;
  const std::size_t T = seq_len();
  std::vector<std::int32_t> ids;
  ids.reserve(row_ids.size() * T);
  out.boundary_mask.reserve(row_ids.size() * T);
  for (std::size_t r : row_ids) {
    if (r >= rows()) throw ContractError("subset: row index out of range");
    const auto src = sequences.row(r);
    ids.insert(ids.end(), src.begin(), src.end());
    out.boundary_mask.insert(out.boundary_mask.end(), boundary_mask.begin() + static_cast<std::ptrdiff_t>(r * T),
                             boundary_mask.begin() + static_cast<std::ptrdiff_t>((r + 1) * T));
  }
  out.sequences = TokenMatrix(row_ids.size(), T, std::move(ids));
  return out;
}

PackedDataset PackedDataset::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > rows()) throw ContractError("slice: bad row range");
  std::vector<std::size_t> ids(end - begin);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = begin + i;
  return subset(ids);
}

DatasetSplit split(const PackedDataset& ds, double calib_fraction, std::uint64_t seed) {
  if (!(calib_fraction > 0.0 && calib_fraction < 1.0)) throw ContractError("split: fraction must lie in (0, 1)");
  const auto n = ds.rows();
  const auto n_calib = static_cast<std::size_t>(std::llround(calib_fraction * static_cast<double>(n)));
  if (n_calib == 0 || n_calib >= n) {
    throw ContractError("split: " + std::to_string(n) + " rows at fraction " + std::to_string(calib_fraction) +
                        " leaves one side empty");
  }
  Rng rng(seed);
  auto perm = random_permutation(n, rng);
  std::vector<std::size_t> calib(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_calib));
  std::vector<std::size_t> valid(perm.begin() + static_cast<std::ptrdiff_t>(n_calib), perm.end());
  std::sort(calib.begin(), calib.end());
  std::sort(valid.begin(), valid.end());
  return {ds.subset(calib), ds.subset(valid)};
}

Batch make_batch(const PackedDataset& ds, std::size_t begin, std::size_t end) {
  if (begin >= end || end > ds.rows()) throw ContractError("make_batch: bad row range");
  const std::size_t T = ds.seq_len();
  Batch b;
  const auto first = ds.sequences.ids.begin() + static_cast<std::ptrdiff_t>(begin * T);
  b.tokens = TokenMatrix(end - begin, T, std::vector<std::int32_t>(first, first + static_cast<std::ptrdiff_t>((end - begin) * T)));
  const std::size_t n = b.tokens.size();
  b.targets.assign(n, 0);
  b.loss_mask.assign(n, 0);
  b.token_mask.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const bool boundary = ds.boundary_mask[begin * T + i] != 0;
    b.token_mask[i] = boundary ? 0 : 1;
    if (i % T + 1 < T) {
      b.targets[i] = b.tokens.ids[i + 1];
      b.loss_mask[i] = boundary ? 0 : 1;
    }
  }
  return b;
}

std::vector<std::pair<std::size_t, std::size_t>> row_chunks(std::size_t rows, std::size_t rows_per_chunk) {
  if (rows_per_chunk == 0) throw ContractError("row_chunks: chunk size must be positive");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t b = 0; b < rows; b += rows_per_chunk) out.emplace_back(b, std::min(rows, b + rows_per_chunk));
  return out;
}

void save_dataset(const PackedDataset& ds, const std::filesystem::path& path) {
  Container c;
  c.meta = {{"kind", "packed_dataset"}, {"rows", ds.rows()}, {"seq_len", ds.seq_len()}, {"doc_count", ds.doc_count}};
  std::vector<float> ids(ds.sequences.ids.begin(), ds.sequences.ids.end());
  std::vector<float> mask(ds.boundary_mask.begin(), ds.boundary_mask.end());
  c.tensors.emplace_back("sequences", Tensor({ds.rows(), ds.seq_len()}, std::move(ids)));
  c.tensors.emplace_back("boundary_mask", Tensor({ds.rows(), ds.seq_len()}, std::move(mask)));
  write_container(path, "PRLD", c);
}

PackedDataset load_dataset(const std::filesystem::path& path) {
  const Container c = read_container(path, "PRLD");
  if (!c.has("sequences") || !c.has("boundary_mask")) throw FormatError("dataset file lacks sequences or mask");
  const Tensor& seq = c.tensor("sequences");
  const Tensor& mask = c.tensor("boundary_mask");
  if (seq.rank() != 2 || mask.shape() != seq.shape()) throw FormatError("dataset tensors have inconsistent shapes");
  PackedDataset ds;
  ds.doc_count = c.meta.value("doc_count", std::size_t{0});
  std::vector<std::int32_t> ids(seq.numel());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const float v = seq[i];
    if (!(v >= 0.0f && v < static_cast<float>(kByteVocab)) || v != std::floor(v)) {
      throw FormatError("dataset holds a token id outside the vocabulary");
    }
    ids[i] = static_cast<std::int32_t>(v);
  }
  ds.sequences = TokenMatrix(seq.dim(0), seq.dim(1), std::move(ids));
  ds.boundary_mask.resize(mask.numel());
  for (std::size_t i = 0; i < mask.numel(); ++i) ds.boundary_mask[i] = mask[i] != 0.0f ? 1 : 0;
  return ds;
}

}  // namespace depthlab
