#include "depthlab/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "depthlab/errors.hpp"

namespace depthlab {
namespace {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

template <typename U>
void put(std::string& out, U value) {
  char buf[sizeof(U)];
  std::memcpy(buf, &value, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U get(std::string_view bytes, std::size_t offset) {
  U value;
  std::memcpy(&value, bytes.data() + offset, sizeof(U));
  return value;
}

std::size_t align_up(std::size_t n) { return (n + kContainerAlignment - 1) / kContainerAlignment * kContainerAlignment; }

constexpr std::size_t kPreamble = 4 + sizeof(std::uint32_t) + sizeof(std::uint64_t);

}  // namespace

const Tensor& Container::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw FormatError("container has no tensor '" + name + "'");
}

bool Container::has(const std::string& name) const {
  for (const auto& entry : tensors) {
    if (entry.first == name) return true;
  }
  return false;
}

std::string encode_container(std::string_view magic, const Container& container) {
  if (magic.size() != 4) throw ContractError("container magic must be 4 bytes");

  // Offsets depend on the header length, which depends on the offsets'
  // digits; iterate until the layout is stable.
  std::vector<std::size_t> offsets(container.tensors.size(), 0);
  std::string header;
  for (int pass = 0; pass < 8; ++pass) {
    nlohmann::json manifest = nlohmann::json::array();
    for (std::size_t i = 0; i < container.tensors.size(); ++i) {
      const auto& [name, t] = container.tensors[i];
      manifest.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offsets[i]}});
    }
    nlohmann::json doc = {{"meta", container.meta}, {"tensors", manifest}};
    header = doc.dump();
    std::size_t cursor = align_up(kPreamble + header.size());
    bool stable = true;
    for (std::size_t i = 0; i < container.tensors.size(); ++i) {
      if (offsets[i] != cursor) stable = false;
      offsets[i] = cursor;
      cursor = align_up(cursor + container.tensors[i].second.numel() * sizeof(float));
    }
    if (stable) break;
  }

  std::string out;
  out.append(magic.data(), 4);
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint64_t>(out, header.size());
  out += header;
  for (std::size_t i = 0; i < container.tensors.size(); ++i) {
    const Tensor& t = container.tensors[i].second;
    out.resize(offsets[i], '\0');
    out.append(reinterpret_cast<const char*>(t.data().data()), t.numel() * sizeof(float));
  }
  out.resize(align_up(out.size()), '\0');
  return out;
}

Container decode_container(std::string_view bytes, std::string_view expected_magic) {
  if (bytes.size() < kPreamble) throw FormatError("container truncated before header");
  if (bytes.substr(0, 4) != expected_magic) {
    throw FormatError("bad magic: expected '" + std::string(expected_magic) + "'");
  }
  const auto version = get<std::uint32_t>(bytes, 4);
  if (version != kContainerVersion) throw FormatError("unsupported container version " + std::to_string(version));
  const auto header_len = get<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - kPreamble) throw FormatError("container truncated inside header");

  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(bytes.substr(kPreamble, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container header is not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("tensors") || !doc["tensors"].is_array()) {
    throw FormatError("container header lacks a tensor manifest");
  }

  Container c;
  c.meta = doc.value("meta", nlohmann::json::object());
  std::set<std::string> seen;
  const std::size_t data_start = kPreamble + header_len;
  try {
    for (const auto& entry : doc["tensors"]) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      if (!seen.insert(name).second) throw FormatError("duplicate tensor '" + name + "'");
      const std::size_t n = shape_numel(shape);
      if (offset % kContainerAlignment != 0 || offset < data_start) {
        throw FormatError("tensor '" + name + "' has a misaligned offset");
      }
      if (offset > bytes.size() || n * sizeof(float) > bytes.size() - offset) {
        throw FormatError("container truncated inside tensor '" + name + "'");
      }
      std::vector<float> data(n);
      std::memcpy(data.data(), bytes.data() + offset, n * sizeof(float));
      c.tensors.emplace_back(name, Tensor(shape, std::move(data)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed tensor manifest: ") + e.what());
  }
  return c;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_container(const std::filesystem::path& path, std::string_view magic, const Container& container) {
  write_file_atomic(path, encode_container(magic, container));
}

Container read_container(const std::filesystem::path& path, std::string_view expected_magic) {
  return decode_container(read_file(path), expected_magic);
}

}  // namespace depthlab
