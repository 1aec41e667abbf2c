#include <set>
#include <string>

#include "depthlab/data.hpp"
#include "depthlab/errors.hpp"
#include "depthlab/rng.hpp"

namespace depthlab {
namespace {

std::string random_word(Rng& rng, std::size_t len) {
  std::string w;
  for (std::size_t i = 0; i < len; ++i) w += static_cast<char>('a' + rng.below(26));
  return w;
}

std::string answer_for(McRule rule, const std::string& word) {
  return rule == McRule::Copy ? word : std::string(word.rbegin(), word.rend());
}

std::string line_head(McRule rule, const std::string& word) {
  return std::string(rule == McRule::Copy ? "copy: " : "flip: ") + word + " -> ";
}

}  // namespace

std::string to_string(McRule rule) { return rule == McRule::Copy ? "copy" : "flip"; }

McRule parse_mc_rule(const std::string& text) {
  if (text == "copy") return McRule::Copy;
  if (text == "flip") return McRule::Flip;
  throw ContractError("unknown task rule '" + text + "'");
}

McTask gen_mc_task(const McTaskSpec& spec, std::size_t n_items, std::size_t n_shots, std::uint64_t seed) {
  if (n_items == 0) throw ContractError("gen_mc_task: need at least one item");
  if (spec.n_options < 2) throw ContractError("gen_mc_task: need at least two options");
  if (spec.word_len == 0) throw ContractError("gen_mc_task: word length must be positive");
  Rng rng(seed);
  McTask task;
  task.rule = spec.rule;
  task.n_shots = n_shots;
  for (std::size_t i = 0; i < n_items; ++i) {
    std::string prompt;
    for (std::size_t s = 0; s < n_shots; ++s) {
      const auto w = random_word(rng, spec.word_len);
      prompt += line_head(spec.rule, w) + answer_for(spec.rule, w) + ".\n";
    }
    const auto word = random_word(rng, spec.word_len);
    prompt += line_head(spec.rule, word);

    const auto answer = answer_for(spec.rule, word);
    std::set<std::string> used{answer};
    std::vector<std::string> options{answer};
    while (options.size() < spec.n_options) {
      // Distractors share the answer's letters where possible so the task
      // cannot be solved from unigram statistics alone.
      std::string d = answer;
      rng.shuffle(std::span<char>(d.data(), d.size()));
      if (used.count(d)) d = random_word(rng, spec.word_len);
      if (used.insert(d).second) options.push_back(d);
    }
    // Random position for the correct option.
    const std::size_t correct = rng.below(spec.n_options);
    std::swap(options[0], options[correct]);

    McItem item;
    item.prompt = tokenize_bytes(prompt);
    item.prompt.insert(item.prompt.begin(), kBos);
    for (const auto& o : options) item.options.push_back(tokenize_bytes(o + "."));
    item.correct = correct;
    task.items.push_back(std::move(item));
  }
  return task;
}

}  // namespace depthlab
