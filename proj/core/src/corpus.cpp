#include <array>
#include <string>
#include <vector>

#include "depthlab/data.hpp"
#include "depthlab/errors.hpp"
#include "depthlab/rng.hpp"

namespace depthlab {
namespace {

constexpr std::array kNames = {"Ada", "Bo", "Cleo", "Dov", "Eli", "Fay", "Gus", "Hana", "Ivo", "Juno", "Kai", "Lea"};
constexpr std::array kPlaces = {"market", "river", "garden", "school", "forest", "harbor", "library", "hill"};
constexpr std::array kThings = {"apple", "lamp", "book", "kite", "stone", "coin", "hat", "map", "bell", "cup"};
constexpr std::array kAnimals = {"cat", "dog", "fox", "owl", "frog", "goat", "crow", "mole"};
constexpr std::array kAdjectives = {"small", "red", "old", "quiet", "bright", "lazy", "green", "tall"};

template <typename A>
const char* pick(const A& options, Rng& rng) {
  return options[rng.below(options.size())];
}

std::string random_word(Rng& rng, std::size_t len) {
  std::string w;
  for (std::size_t i = 0; i < len; ++i) w += static_cast<char>('a' + rng.below(26));
  return w;
}

std::string pattern_line(Rng& rng) {
  const std::string w = random_word(rng, 3 + rng.below(3));
  if (rng.below(2) == 0) return "copy: " + w + " -> " + w + ".";
  return "flip: " + w + " -> " + std::string(w.rbegin(), w.rend()) + ".";
}

std::string sentence(Rng& rng, const std::string& a, const std::string& b) {
  const std::string place = pick(kPlaces, rng);
  const std::string thing = pick(kThings, rng);
  switch (rng.below(6)) {
    case 0: return a + " went to the " + place + ".";
    case 1: return a + " saw a " + pick(kAdjectives, rng) + " " + pick(kAnimals, rng) + " near the " + place + ".";
    case 2: return "Then " + a + " gave the " + thing + " to " + b + ".";
    case 3: return b + " found a " + pick(kAdjectives, rng) + " " + thing + ".";
    case 4: return a + " and " + b + " walked to the " + place + " together.";
    default: return "At the " + place + ", " + b + " asked " + a + " for the " + thing + ".";
  }
}

}  // namespace

std::vector<std::string> synthetic_corpus(const SyntheticCorpusSpec& spec, std::uint64_t seed) {
  if (spec.min_sentences == 0 || spec.max_sentences < spec.min_sentences) {
    throw ContractError("synthetic_corpus: bad sentence range");
  }
  Rng rng(seed);
  std::vector<std::string> docs;
  docs.reserve(spec.n_docs);
  for (std::size_t d = 0; d < spec.n_docs; ++d) {
    const std::string a = pick(kNames, rng);
    std::string b = pick(kNames, rng);
    while (b == a) b = pick(kNames, rng);
    const std::size_t n = spec.min_sentences + rng.below(spec.max_sentences - spec.min_sentences + 1);
    std::string doc;
    bool line_start = true;
    for (std::size_t s = 0; s < n; ++s) {
      if (rng.uniform() < spec.pattern_rate) {
        if (!line_start) doc += '\n';
        doc += pattern_line(rng);
        doc += '\n';
        line_start = true;
        continue;
      }
      if (!line_start) doc += ' ';
      doc += sentence(rng, a, b);
      line_start = false;
    }
    while (!doc.empty() && doc.back() == '\n') doc.pop_back();
    docs.push_back(std::move(doc));
  }
  return docs;
}

}  // namespace depthlab
