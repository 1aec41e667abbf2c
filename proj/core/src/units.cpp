#include "depthlab/units.hpp"

#include <charconv>

#include "depthlab/errors.hpp"

namespace depthlab {

std::string to_string(UnitKind kind) {
  switch (kind) {
    case UnitKind::Block: return "block";
    case UnitKind::Attention: return "attn";
    case UnitKind::FeedForward: return "ffn";
  }
  return "?";
}

std::string to_string(Granularity granularity) {
  switch (granularity) {
    case Granularity::Block: return "block";
    case Granularity::Attention: return "attention";
    case Granularity::FeedForward: return "feedforward";
    case Granularity::JointSublayer: return "joint";
  }
  return "?";
}

std::string to_string(const UnitId& unit) { return to_string(unit.kind) + std::to_string(unit.block); }

UnitKind parse_unit_kind(std::string_view text) {
  if (text == "block") return UnitKind::Block;
  if (text == "attn" || text == "attention") return UnitKind::Attention;
  if (text == "ffn" || text == "feedforward") return UnitKind::FeedForward;
  throw ContractError("unknown unit kind '" + std::string(text) + "'");
}

Granularity parse_granularity(std::string_view text) {
  if (text == "block") return Granularity::Block;
  if (text == "attention" || text == "attn") return Granularity::Attention;
  if (text == "feedforward" || text == "ffn") return Granularity::FeedForward;
  if (text == "joint" || text == "joint_sublayer" || text == "sublayer") return Granularity::JointSublayer;
  throw ContractError("unknown granularity '" + std::string(text) + "'");
}

UnitId parse_unit(std::string_view text) {
  std::size_t split = 0;
  while (split < text.size() && !(text[split] >= '0' && text[split] <= '9')) ++split;
  if (split == 0 || split == text.size()) throw ContractError("malformed unit '" + std::string(text) + "'");
  UnitId unit;
  unit.kind = parse_unit_kind(text.substr(0, split));
  const auto digits = text.substr(split);
  auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), unit.block);
  if (ec != std::errc() || ptr != digits.data() + digits.size()) {
    throw ContractError("malformed unit '" + std::string(text) + "'");
  }
  return unit;
}

std::vector<UnitId> units_at(Granularity granularity, std::size_t n_blocks) {
  std::vector<UnitId> units;
  for (std::size_t l = 0; l < n_blocks; ++l) {
    switch (granularity) {
      case Granularity::Block: units.push_back({l, UnitKind::Block}); break;
      case Granularity::Attention: units.push_back({l, UnitKind::Attention}); break;
      case Granularity::FeedForward: units.push_back({l, UnitKind::FeedForward}); break;
      case Granularity::JointSublayer:
        units.push_back({l, UnitKind::Attention});
        units.push_back({l, UnitKind::FeedForward});
        break;
    }
  }
  return units;
}

UnitKind unit_kind_of(Granularity granularity) {
  switch (granularity) {
    case Granularity::Block: return UnitKind::Block;
    case Granularity::Attention: return UnitKind::Attention;
    case Granularity::FeedForward: return UnitKind::FeedForward;
    case Granularity::JointSublayer: break;
  }
  throw ContractError("joint sublayer granularity mixes unit kinds");
}

}  // namespace depthlab
