#pragma once

// On-disk conventions shared by every module: raw little-endian float32
// arrays with a `<name>.shape.json` sidecar, and atomic file replacement.

#include "muteswap/autodiff.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace muteswap {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "float32 file format assumes a little-endian host");

/// Missing, unreadable or malformed data files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite losses or values during training/inference.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline fs::path shape_sidecar(const fs::path& array_path) {
  return fs::path(array_path.string() + ".shape.json");
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) {
  write_file_atomic(path, j.dump(2) + "\n");
}

/// Stores a matrix as float32 row-major plus `{"dims":[rows, cols]}`.
/// Vectors (one row) are stored with a single dim.
template <typename T>
void write_f32(const fs::path& path, const Matrix<T>& m, bool as_vector = false) {
  std::string bytes(static_cast<std::size_t>(m.size()) * sizeof(float), '\0');
  auto* out = reinterpret_cast<float*>(bytes.data());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) *out++ = static_cast<float>(m(r, c));
  }
  write_file_atomic(path, bytes);
  json dims = as_vector ? json::array({m.size()}) : json::array({m.rows(), m.cols()});
  write_file_atomic(shape_sidecar(path), json{{"dims", dims}}.dump() + "\n");
}

inline std::vector<std::int64_t> read_dims(const fs::path& path) {
  const json j = read_json(shape_sidecar(path));
  if (!j.contains("dims") || !j["dims"].is_array()) {
    throw DataError("shape sidecar lacks dims: " + shape_sidecar(path).string());
  }
  return j["dims"].get<std::vector<std::int64_t>>();
}

/// Reads a float32 array; 1-D arrays come back as a single row.
template <typename T>
Matrix<T> read_f32(const fs::path& path) {
  const auto dims = read_dims(path);
  if (dims.empty() || dims.size() > 2) throw DataError("unsupported rank in " + path.string());
  const Eigen::Index rows = dims.size() == 2 ? dims[0] : 1;
  const Eigen::Index cols = dims.size() == 2 ? dims[1] : dims[0];
  if (rows < 0 || cols < 0) throw DataError("negative dims in " + path.string());
  const std::string bytes = read_file(path);
  if (bytes.size() != static_cast<std::size_t>(rows * cols) * sizeof(float)) {
    throw DataError("size of " + path.string() + " (" + std::to_string(bytes.size()) +
                    " bytes) does not match dims " + shape_str(rows, cols));
  }
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < rows * cols; ++i) {
    float f;
    std::memcpy(&f, bytes.data() + i * sizeof(float), sizeof(float));
    m(i / cols, i % cols) = static_cast<T>(f);
  }
  return m;
}

/// 64-bit FNV-1a, used for stable cache keys.
inline std::uint64_t fnv1a64(std::string_view data, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

}  // namespace muteswap
