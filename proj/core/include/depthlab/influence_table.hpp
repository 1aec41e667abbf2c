#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "depthlab/units.hpp"

namespace depthlab {

enum class MetricId { Cosine, RelL1, RelL2, ShapleyLogitDist, ShapleyLmLoss, ShapleyTaskLoss, AdapterLoss };

std::string to_string(MetricId metric);
MetricId parse_metric(const std::string& text);

struct EstimatorMeta {
  std::string estimator;  // "token_mean", "leave_one_out", "permutation_mc", ...
  std::size_t n_tokens = 0;
  std::size_t n_excluded = 0;  // zero-norm tokens dropped from the mean
  std::size_t n_subsets = 0;   // distinct subset evaluations
  std::size_t n_permutations = 0;
  std::uint64_t seed = 0;
  std::vector<double> std_errors;  // per unit, sampled estimators only

  friend bool operator==(const EstimatorMeta&, const EstimatorMeta&) = default;
};

struct UnitScore {
  UnitId unit;
  double score = 0.0;

  friend bool operator==(const UnitScore&, const UnitScore&) = default;
};

struct InfluenceTable {
  MetricId metric = MetricId::Cosine;
  Granularity granularity = Granularity::Block;
  std::vector<UnitScore> scores;  // in units_at() order
  EstimatorMeta meta;
  bool normalized = false;

  double score(const UnitId& unit) const;
  std::vector<double> values() const;

  friend bool operator==(const InfluenceTable&, const InfluenceTable&) = default;
};

inline constexpr const char* kTieBreakRule =
    "ascending score; ties prune the higher block index first, then feed-forward before attention";

struct PruneOrder {
  std::vector<UnitId> units;  // least influential first
  std::string tie_break_rule = kTieBreakRule;
};

// Ascending by score; NaN scores raise ContractError.
PruneOrder rank_units(const InfluenceTable& table);

// (x − min)/(max − min); all-equal tables map to 0.5.
InfluenceTable minmax_normalize(const InfluenceTable& table);

nlohmann::json to_json(const InfluenceTable& table);
InfluenceTable influence_table_from_json(const nlohmann::json& j);
void write_influence_table(const InfluenceTable& table, const std::filesystem::path& path);
InfluenceTable read_influence_table(const std::filesystem::path& path);

}  // namespace depthlab
