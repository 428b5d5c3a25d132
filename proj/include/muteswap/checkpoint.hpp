#pragma once

// Single-file container for named float32 blocks plus a JSON header.
//
//   bytes 0..7    magic "MUTESWAP"
//   bytes 8..11   container version (u32, little-endian)
//   bytes 12..19  header length H (u64)
//   next H bytes  UTF-8 JSON header; "blocks" lists {name, rows, cols, offset}
//   remainder     float32 payload, offsets in floats from payload start

#include "muteswap/io.hpp"

#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

namespace muteswap {

inline constexpr char kCheckpointMagic[8] = {'M', 'U', 'T', 'E', 'S', 'W', 'A', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointFile {
  json header = json::object();
  std::vector<std::pair<std::string, Matrix<float>>> blocks;

  const Matrix<float>* find(const std::string& name) const {
    for (const auto& [n, m] : blocks) {
      if (n == name) return &m;
    }
    return nullptr;
  }
};

inline std::string serialize_checkpoint(const CheckpointFile& ck) {
  json header = ck.header;
  json index = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : ck.blocks) {
    index.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size());
  }
  header["blocks"] = index;
  const std::string h = header.dump();

  std::string out;
  out.reserve(20 + h.size() + offset * sizeof(float));
  out.append(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::uint32_t version = kCheckpointVersion;
  out.append(reinterpret_cast<const char*>(&version), sizeof version);
  const std::uint64_t hlen = h.size();
  out.append(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  out.append(h);
  for (const auto& [name, m] : ck.blocks) {
    out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(float));
  }
  return out;
}

inline void save_checkpoint_file(const fs::path& path, const CheckpointFile& ck) {
  write_file_atomic(path, serialize_checkpoint(ck));
}

inline CheckpointFile load_checkpoint_file(const fs::path& path) {
  const std::string bytes = read_file(path);
  auto corrupt = [&](const std::string& why) {
    return DataError("corrupt checkpoint " + path.string() + ": " + why);
  };
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw corrupt("bad magic");
  }
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 8, sizeof version);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint " + path.string() + " has version " + std::to_string(version) +
                    ", expected " + std::to_string(kCheckpointVersion));
  }
  std::uint64_t hlen;
  std::memcpy(&hlen, bytes.data() + 12, sizeof hlen);
  if (hlen > bytes.size() - 20) throw corrupt("header length exceeds file");
  CheckpointFile ck;
  try {
    ck.header = json::parse(bytes.substr(20, hlen));
  } catch (const json::exception& e) {
    throw corrupt(e.what());
  }
  const std::size_t payload = 20 + hlen;
  const std::size_t payload_floats = (bytes.size() - payload) / sizeof(float);
  if ((bytes.size() - payload) % sizeof(float) != 0) throw corrupt("truncated payload");
  try {
    for (const auto& b : ck.header.at("blocks")) {
      const auto rows = b.at("rows").get<Eigen::Index>();
      const auto cols = b.at("cols").get<Eigen::Index>();
      const auto off = b.at("offset").get<std::uint64_t>();
      if (rows < 0 || cols < 0 || off + static_cast<std::uint64_t>(rows * cols) > payload_floats) {
        throw corrupt("block " + b.at("name").get<std::string>() + " out of bounds");
      }
      Matrix<float> m(rows, cols);
      std::memcpy(m.data(), bytes.data() + payload + off * sizeof(float),
                  static_cast<std::size_t>(rows * cols) * sizeof(float));
      ck.blocks.emplace_back(b.at("name").get<std::string>(), std::move(m));
    }
  } catch (const json::exception& e) {
    throw corrupt(e.what());
  }
  ck.header.erase("blocks");
  return ck;
}

}  // namespace muteswap
