#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "depthlab/tensor.hpp"

// Binary tensor container shared by checkpoints (PRLB), packed datasets
// (PRLD) and recovery artifacts (PRLR):
//
//   magic[4] | u32 version=1 | u64 header_len | header JSON (UTF-8)
//   | zero padding | tensor payloads
//
// The header is {"meta": {...}, "tensors": [{"name", "shape", "offset"}]}
// where offset is the absolute file offset of the tensor's little-endian
// float32 payload; every payload starts on a 64-byte boundary.
namespace depthlab {

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::size_t kContainerAlignment = 64;

struct Container {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

// Serialized bytes; write_container() is encode + atomic file replace.
std::string encode_container(std::string_view magic, const Container& container);
Container decode_container(std::string_view bytes, std::string_view expected_magic);

void write_container(const std::filesystem::path& path, std::string_view magic, const Container& container);
Container read_container(const std::filesystem::path& path, std::string_view expected_magic);

// Writes `bytes` to a sibling temporary then renames over `path`, so readers
// never observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace depthlab
