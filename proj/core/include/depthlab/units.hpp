#pragma once

#include <compare>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace depthlab {

enum class UnitKind { Block, Attention, FeedForward };

// A prunable unit: a whole block, or one of its two sublayers.
struct UnitId {
  std::size_t block = 0;
  UnitKind kind = UnitKind::Block;

  friend auto operator<=>(const UnitId&, const UnitId&) = default;
};

enum class Granularity { Block, Attention, FeedForward, JointSublayer };

std::string to_string(UnitKind kind);
std::string to_string(Granularity granularity);
std::string to_string(const UnitId& unit);  // e.g. "attn3", "ffn0", "block5"

UnitKind parse_unit_kind(std::string_view text);
Granularity parse_granularity(std::string_view text);
UnitId parse_unit(std::string_view text);

// Units addressed at `granularity` in a model with n_blocks blocks, ordered
// by block index (attention before feed-forward for JointSublayer).
std::vector<UnitId> units_at(Granularity granularity, std::size_t n_blocks);

// Kind of unit a granularity addresses (Attention/FeedForward/Block);
// JointSublayer has no single kind and throws ContractError.
UnitKind unit_kind_of(Granularity granularity);

}  // namespace depthlab
