#include "depthlab/influence_table.hpp"

#include <algorithm>
#include <cmath>

#include "depthlab/container.hpp"
#include "depthlab/errors.hpp"

namespace depthlab {
namespace {

constexpr std::pair<MetricId, const char*> kMetricNames[] = {
    {MetricId::Cosine, "cosine"},
    {MetricId::RelL1, "rel_l1"},
    {MetricId::RelL2, "rel_l2"},
    {MetricId::ShapleyLogitDist, "shapley_logit_distance"},
    {MetricId::ShapleyLmLoss, "shapley_lm_loss"},
    {MetricId::ShapleyTaskLoss, "shapley_task_loss"},
    {MetricId::AdapterLoss, "adapter_loss"},
};

int kind_rank(UnitKind kind) {
  switch (kind) {
    case UnitKind::FeedForward: return 0;
    case UnitKind::Attention: return 1;
    case UnitKind::Block: return 2;
  }
  return 3;
}

}  // namespace

std::string to_string(MetricId metric) {
  for (const auto& [id, name] : kMetricNames) {
    if (id == metric) return name;
  }
  return "?";
}

MetricId parse_metric(const std::string& text) {
  for (const auto& [id, name] : kMetricNames) {
    if (text == name) return id;
  }
  throw ContractError("unknown metric '" + text + "'");
}

double InfluenceTable::score(const UnitId& unit) const {
  for (const auto& s : scores) {
    if (s.unit == unit) return s.score;
  }
  throw ContractError("influence table has no unit " + to_string(unit));
}

std::vector<double> InfluenceTable::values() const {
  std::vector<double> v;
  v.reserve(scores.size());
  for (const auto& s : scores) v.push_back(s.score);
  return v;
}

PruneOrder rank_units(const InfluenceTable& table) {
  for (const auto& s : table.scores) {
    if (std::isnan(s.score)) throw ContractError("rank_units: NaN score for " + to_string(s.unit));
  }
  std::vector<UnitScore> sorted = table.scores;
  std::sort(sorted.begin(), sorted.end(), [](const UnitScore& a, const UnitScore& b) {
    if (a.score != b.score) return a.score < b.score;
    if (a.unit.block != b.unit.block) return a.unit.block > b.unit.block;
    return kind_rank(a.unit.kind) < kind_rank(b.unit.kind);
  });
  PruneOrder order;
  for (const auto& s : sorted) order.units.push_back(s.unit);
  return order;
}

InfluenceTable minmax_normalize(const InfluenceTable& table) {
  if (table.scores.empty()) throw ContractError("minmax_normalize: empty table");
  InfluenceTable out = table;
  double lo = table.scores.front().score;
  double hi = lo;
  for (const auto& s : table.scores) {
    lo = std::min(lo, s.score);
    hi = std::max(hi, s.score);
  }
  for (auto& s : out.scores) s.score = hi > lo ? (s.score - lo) / (hi - lo) : 0.5;
  out.normalized = true;
  return out;
}

nlohmann::json to_json(const InfluenceTable& t) {
  nlohmann::json scores = nlohmann::json::array();
  for (const auto& s : t.scores) {
    scores.push_back({{"unit", to_string(s.unit)}, {"block", s.unit.block}, {"kind", to_string(s.unit.kind)},
                      {"score", s.score}});
  }
  nlohmann::json meta = {{"estimator", t.meta.estimator},
                         {"n_tokens", t.meta.n_tokens},
                         {"n_excluded", t.meta.n_excluded},
                         {"n_subsets", t.meta.n_subsets},
                         {"n_permutations", t.meta.n_permutations},
                         {"seed", t.meta.seed}};
  if (!t.meta.std_errors.empty()) meta["std_errors"] = t.meta.std_errors;
  return {{"metric_id", to_string(t.metric)},
          {"granularity", to_string(t.granularity)},
          {"normalized", t.normalized},
          {"scores", scores},
          {"estimator_meta", meta},
          {"tie_break_rule", kTieBreakRule}};
}

InfluenceTable influence_table_from_json(const nlohmann::json& j) {
  try {
    InfluenceTable t;
    t.metric = parse_metric(j.at("metric_id").get<std::string>());
    t.granularity = parse_granularity(j.at("granularity").get<std::string>());
    t.normalized = j.value("normalized", false);
    for (const auto& s : j.at("scores")) {
      t.scores.push_back({parse_unit(s.at("unit").get<std::string>()), s.at("score").get<double>()});
    }
    const auto& m = j.at("estimator_meta");
    t.meta.estimator = m.value("estimator", "");
    t.meta.n_tokens = m.value("n_tokens", std::size_t{0});
    t.meta.n_excluded = m.value("n_excluded", std::size_t{0});
    t.meta.n_subsets = m.value("n_subsets", std::size_t{0});
    t.meta.n_permutations = m.value("n_permutations", std::size_t{0});
    t.meta.seed = m.value("seed", std::uint64_t{0});
    if (m.contains("std_errors")) t.meta.std_errors = m["std_errors"].get<std::vector<double>>();
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("influence table JSON: ") + e.what());
  }
}

void write_influence_table(const InfluenceTable& table, const std::filesystem::path& path) {
  write_file_atomic(path, to_json(table).dump(2) + "\n");
}

InfluenceTable read_influence_table(const std::filesystem::path& path) {
  try {
    return influence_table_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("influence table JSON: ") + e.what());
  }
}

}  // namespace depthlab
