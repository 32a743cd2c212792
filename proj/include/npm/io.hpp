#pragma once

// Versioned on-disk containers: a meta.json plus flat little-endian arrays,
// each array recorded in the meta with its byte size and CRC-32.

#include <zlib.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "npm/common.hpp"

namespace npm::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "on-disk arrays are little-endian; add byte swapping for this target");

inline std::uint32_t crc32_of(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw MissingArtifact("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw MissingArtifact("short write to " + path.string());
}

/// Writes `values` as raw bytes and records {bytes, crc32, count} under files[name].
template <typename T>
void write_array(const fs::path& dir, const std::string& name, const std::vector<T>& values,
                 json& files) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::string bytes(values.size() * sizeof(T), '\0');
  if (!values.empty()) std::memcpy(bytes.data(), values.data(), bytes.size());
  write_file(dir / name, bytes);
  files[name] = {{"bytes", bytes.size()}, {"crc32", crc32_of(bytes)}, {"count", values.size()}};
}

template <typename T>
std::vector<T> read_array(const fs::path& dir, const std::string& name, const json& files) {
  if (!files.contains(name)) throw IntegrityError("meta lists no file " + name);
  const auto& entry = files.at(name);
  const std::string bytes = read_file(dir / name);
  if (bytes.size() != entry.at("bytes").get<std::size_t>())
    throw IntegrityError("checksum failure: " + name + " has " + std::to_string(bytes.size()) +
                         " bytes, expected " + std::to_string(entry.at("bytes").get<std::size_t>()));
  if (crc32_of(bytes) != entry.at("crc32").get<std::uint32_t>())
    throw IntegrityError("checksum failure: " + name);
  if (bytes.size() % sizeof(T) != 0) throw IntegrityError("malformed array " + name);
  std::vector<T> values(bytes.size() / sizeof(T));
  if (!values.empty()) std::memcpy(values.data(), bytes.data(), bytes.size());
  return values;
}

inline void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

inline json read_json(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw IntegrityError("malformed " + path.string() + ": " + e.what());
  }
}

inline void check_format(const json& meta, const std::string& kind, int version) {
  if (!meta.contains("format") || meta.at("format") != kind)
    throw IntegrityError("not a " + kind + " container");
  if (meta.value("format_version", -1) != version)
    throw IntegrityError(kind + " format version mismatch: expected " + std::to_string(version) +
                         ", found " + meta.value("format_version", json(-1)).dump());
}

inline std::vector<float> to_f32(const std::vector<double>& v) {
  return std::vector<float>(v.begin(), v.end());
}

inline std::vector<double> to_f64(const std::vector<float>& v) {
  return std::vector<double>(v.begin(), v.end());
}

inline std::string hex64(std::uint64_t x) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << x;
  return ss.str();
}

/// FNV-1a, used for config and dataset content hashes (not for integrity).
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace npm::io
