#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "disent/tensor.hpp"

namespace disent {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointBlob {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

/// In-memory checkpoint: free-form metadata plus named float64 blobs kept in manifest order.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<CheckpointBlob> blobs;

  const CheckpointBlob& blob(const std::string& name) const {
    for (const auto& b : blobs)
      if (b.name == name) return b;
    throw CheckpointError("checkpoint has no blob named " + name);
  }
  bool has_blob(const std::string& name) const {
    for (const auto& b : blobs)
      if (b.name == name) return true;
    return false;
  }
  void add(std::string name, Shape shape, std::vector<double> data) {
    if (numel(shape) != data.size()) throw CheckpointError("blob " + name + ": shape does not match data length");
    blobs.push_back({std::move(name), std::move(shape), std::move(data)});
  }
};

inline constexpr char kCheckpointMagic[8] = {'D', 'I', 'S', 'E', 'N', 'T', 'C', 'K'};

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace detail

/// Layout: 8-byte magic, u64 LE header length, JSON header, then every blob as LE float64
/// in manifest order. The header records each blob's name, shape and byte offset
/// (relative to the start of the blob section).
inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& b : ck.blobs) {
    manifest.push_back({{"name", b.name}, {"shape", b.shape}, {"offset", offset}, {"count", b.data.size()}});
    offset += 8 * b.data.size();
  }
  const std::string header = nlohmann::json{{"format", 1}, {"meta", ck.meta}, {"manifest", manifest}}.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u64_le(out, header.size());
  out += header;
  out.reserve(out.size() + offset);
  for (const auto& b : ck.blobs) {
    for (double v : b.data) detail::put_u64_le(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  auto data = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  const std::uint64_t hlen = detail::get_u64_le(data + 8);
  if (hlen > bytes.size() - 16) throw CheckpointError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  if (header.value("format", 0) != 1) throw CheckpointError("unsupported checkpoint format");
  const std::uint64_t base = 16 + hlen;
  Checkpoint ck;
  ck.meta = header.at("meta");
  for (const auto& m : header.at("manifest")) {
    CheckpointBlob b;
    b.name = m.at("name").get<std::string>();
    b.shape = m.at("shape").get<Shape>();
    const auto off = m.at("offset").get<std::uint64_t>();
    const auto count = m.at("count").get<std::uint64_t>();
    if (count != numel(b.shape)) throw CheckpointError("blob " + b.name + ": count does not match shape");
    if (base + off + 8 * count > bytes.size()) throw CheckpointError("blob " + b.name + " extends past end of file");
    b.data.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      b.data[i] = std::bit_cast<double>(detail::get_u64_le(data + base + off + 8 * i));
    }
    ck.blobs.push_back(std::move(b));
  }
  return ck;
}

/// Writes via a temporary file and rename, so an interrupted save never clobbers a good file.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    const std::string bytes = serialize_checkpoint(ck);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace disent
