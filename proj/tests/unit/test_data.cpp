#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "depthlab/data.hpp"
#include "depthlab/errors.hpp"

using namespace depthlab;
namespace fs = std::filesystem;

namespace {

TokenSeq doc_of_length(std::size_t n, std::int32_t fill) { return TokenSeq(n, fill); }

fs::path temp_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "depthlab_test_data" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Tokenize, EmptyAndAscii) {
  EXPECT_TRUE(tokenize_bytes("").empty());
  EXPECT_EQ(tokenize_bytes("AB"), (TokenSeq{65, 66}));
  EXPECT_EQ(tokenize_bytes("\xff"), (TokenSeq{255}));
}

TEST(Tokenize, FramingAddsBosAndEos) {
  const auto framed = frame_document("abc");
  EXPECT_EQ(framed, (TokenSeq{256, 97, 98, 99, 257}));
  EXPECT_EQ(detokenize(framed), "abc\n");
}

TEST(Pack, SingleDocumentOfTPlusOne) {
  const std::vector<TokenSeq> docs{doc_of_length(9, 5)};
  const auto ds = pack(docs, 8, 1);
  EXPECT_EQ(ds.rows(), 1u);
  EXPECT_EQ(ds.doc_count, 1u);
  EXPECT_EQ(std::count(ds.boundary_mask.begin(), ds.boundary_mask.end(), 1), 0);
}

TEST(Pack, HandEnumeratedTwoDocuments) {
  // T = 4, docs of 3 and 5 tokens. Either order fills exactly two rows:
  //   a a a b | b b b b  → crossing at position 2
  //   b b b b | b a a a  → crossing at position 4 (row 1, t = 0)
  const std::vector<TokenSeq> docs{doc_of_length(3, 1), doc_of_length(5, 2)};
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const auto ds = pack(docs, 4, seed);
    ASSERT_EQ(ds.rows(), 2u);
    std::vector<std::uint8_t> want(8, 0);
    want[ds.sequences.ids[0] == 1 ? 2 : 4] = 1;
    EXPECT_EQ(ds.boundary_mask, want) << "seed " << seed;
  }
}

TEST(Pack, BoundaryOnRowEdgeIsNotMasked) {
  // docs of exactly T tokens each: every crossing lands on a row edge.
  const std::vector<TokenSeq> docs{doc_of_length(4, 1), doc_of_length(4, 2), doc_of_length(4, 3)};
  const auto ds = pack(docs, 4, 3);
  EXPECT_EQ(ds.rows(), 3u);
  EXPECT_EQ(std::count(ds.boundary_mask.begin(), ds.boundary_mask.end(), 1), 0);
}

TEST(Pack, ConservesTokensAndCountsBoundaries) {
  std::vector<TokenSeq> docs;
  for (std::size_t i = 0; i < 40; ++i) docs.push_back(doc_of_length(3 + i % 11, static_cast<std::int32_t>(i)));
  std::size_t total = 0;
  for (const auto& d : docs) total += d.size();
  const std::size_t T = 7;
  const auto ds = pack(docs, T, 9);
  EXPECT_LE(ds.rows() * T, total);
  EXPECT_LT(total, (ds.rows() + 1) * T);
  // Brute force: a crossing between positions i and i+1 of the stream counts
  // unless i+1 starts a row; crossings beyond the kept rows are dropped.
  std::size_t expected = 0;
  const auto& ids = ds.sequences.ids;
  for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
    if (ids[i] != ids[i + 1] && (i + 1) % T != 0) ++expected;
  }
  EXPECT_EQ(static_cast<std::size_t>(std::count(ds.boundary_mask.begin(), ds.boundary_mask.end(), 1)), expected);
  EXPECT_LE(expected, ds.doc_count - 1);
  for (auto id : ids) EXPECT_LT(static_cast<std::size_t>(id), kByteVocab);
}

TEST(Pack, DeterministicUnderSeed) {
  std::vector<std::string> texts{"one doc", "another one", "third text here", "x", "fifth document"};
  EXPECT_EQ(pack_texts(texts, 6, 4), pack_texts(texts, 6, 4));
  EXPECT_NE(pack_texts(texts, 6, 4).sequences, pack_texts(texts, 6, 5).sequences);
}

TEST(Pack, Errors) {
  const std::vector<TokenSeq> docs{doc_of_length(3, 1)};
  EXPECT_THROW(pack(docs, 4, 0), EmptyDatasetError);
  EXPECT_THROW(pack(docs, 1, 0), ContractError);
}

TEST(Split, ArithmeticAndPartition) {
  std::vector<TokenSeq> docs;
  for (int i = 0; i < 10; ++i) docs.push_back(doc_of_length(4, i));
  const auto ds = pack(docs, 4, 0);
  ASSERT_EQ(ds.rows(), 10u);
  const auto s = split(ds, 0.9, 1);
  EXPECT_EQ(s.calibration.rows(), 9u);
  EXPECT_EQ(s.validation.rows(), 1u);
  std::vector<std::int32_t> got, want;
  for (std::size_t r = 0; r < 9; ++r) got.push_back(s.calibration.sequences.row(r)[0]);
  got.push_back(s.validation.sequences.row(0)[0]);
  for (std::size_t r = 0; r < 10; ++r) want.push_back(ds.sequences.row(r)[0]);
  std::sort(got.begin(), got.end());
  std::sort(want.begin(), want.end());
  EXPECT_EQ(got, want);
}

TEST(Split, SeedsChangePartition) {
  std::vector<TokenSeq> docs;
  for (int i = 0; i < 20; ++i) docs.push_back(doc_of_length(4, i));
  const auto ds = pack(docs, 4, 0);
  EXPECT_EQ(split(ds, 0.5, 1).calibration, split(ds, 0.5, 1).calibration);
  EXPECT_NE(split(ds, 0.5, 1).calibration, split(ds, 0.5, 2).calibration);
  EXPECT_THROW(split(ds, 0.0, 1), ContractError);
  EXPECT_THROW(split(ds, 0.99, 1), ContractError);
}

TEST(Batch, TargetsAndMasks) {
  const std::vector<TokenSeq> docs{TokenSeq{1, 2, 3}, TokenSeq{4, 5, 6, 7, 8}};
  const auto ds = pack(docs, 4, 0);
  const auto b = make_batch(ds, 0, ds.rows());
  const std::size_t T = 4;
  for (std::size_t i = 0; i < b.tokens.size(); ++i) {
    const bool last = i % T == T - 1;
    EXPECT_EQ(b.loss_mask[i], (!last && !ds.boundary_mask[i]) ? 1 : 0);
    EXPECT_EQ(b.token_mask[i], ds.boundary_mask[i] ? 0 : 1);
    if (!last) {
      EXPECT_EQ(b.targets[i], b.tokens.ids[i + 1]);
    }
  }
}

TEST(Dataset, SaveLoadRoundTrip) {
  const auto dir = temp_dir("roundtrip");
  std::vector<std::string> texts{"alpha beta", "gamma delta epsilon", "zeta"};
  const auto ds = pack_texts(texts, 5, 2);
  save_dataset(ds, dir / "d.prld");
  EXPECT_EQ(load_dataset(dir / "d.prld"), ds);
}

TEST(Corpus, DirectoryAndBlankLineLayouts) {
  const auto dir = temp_dir("corpus");
  std::ofstream(dir / "b.txt") << "second file";
  std::ofstream(dir / "a.txt") << "first file";
  const auto docs = load_corpus(dir, CorpusLayout::Directory);
  EXPECT_EQ(docs, (std::vector<std::string>{"first file", "second file"}));
  const auto file = temp_dir("blank") / "all.txt";
  std::ofstream(file) << "doc one\nline two\n\ndoc two\n\n\ndoc three\n";
  EXPECT_EQ(load_corpus(file, CorpusLayout::BlankLineSeparated).size(), 3u);
}

namespace {

// Independent checker: parse the final "rule: w -> " line of the prompt and
// compute the answer from the rule definition.
std::string expected_answer(const McItem& item) {
  const std::string text = detokenize(item.prompt);
  const auto line_start = text.rfind('\n') == std::string::npos ? 0 : text.rfind('\n') + 1;
  const std::string line = text.substr(line_start);
  const std::string rule = line.substr(0, 4);
  const auto arrow = line.find(" -> ");
  const std::string word = line.substr(6, arrow - 6);
  return (rule == "copy" ? word : std::string(word.rbegin(), word.rend())) + ".";
}

}  // namespace

TEST(McTask, ZeroShotHasNoExemplars) {
  const auto task = gen_mc_task({}, 4, 0, 1);
  ASSERT_EQ(task.items.size(), 4u);
  for (const auto& item : task.items) {
    EXPECT_EQ(std::count(item.prompt.begin(), item.prompt.end(), '\n'), 0);
    EXPECT_EQ(item.prompt.front(), kBos);
  }
}

TEST(McTask, DeterministicAndRuleConsistent) {
  for (auto rule : {McRule::Copy, McRule::Flip}) {
    McTaskSpec spec;
    spec.rule = rule;
    const auto task = gen_mc_task(spec, 50, 5, 7);
    EXPECT_EQ(task, gen_mc_task(spec, 50, 5, 7));
    std::vector<std::size_t> positions(spec.n_options, 0);
    for (const auto& item : task.items) {
      EXPECT_EQ(std::count(item.prompt.begin(), item.prompt.end(), '\n'), 5);
      ASSERT_EQ(item.options.size(), spec.n_options);
      EXPECT_EQ(detokenize(item.options[item.correct]), expected_answer(item));
      std::size_t matches = 0;
      for (const auto& o : item.options) {
        EXPECT_EQ(o.size(), item.options[0].size());
        matches += detokenize(o) == expected_answer(item);
      }
      EXPECT_EQ(matches, 1u);
      ++positions[item.correct];
    }
    for (auto p : positions) EXPECT_GT(p, 0u);
  }
}

TEST(Synthetic, CorpusIsDeterministic) {
  SyntheticCorpusSpec spec;
  spec.n_docs = 20;
  const auto a = synthetic_corpus(spec, 3);
  EXPECT_EQ(a.size(), 20u);
  EXPECT_EQ(a, synthetic_corpus(spec, 3));
  EXPECT_NE(a, synthetic_corpus(spec, 4));
}
