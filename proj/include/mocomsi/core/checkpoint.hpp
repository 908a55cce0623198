#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mocomsi/core/error.hpp"
#include "mocomsi/core/hash.hpp"

namespace mocomsi {

// On-disk layout shared by every checkpoint kind:
//   line 1: "mocomsi-checkpoint v1"
//   line 2: compact JSON header (kind, config echoes, curves, value count)
//   rest:   little-endian float32 values
struct Checkpoint {
  nlohmann::json header;
  std::vector<float> values;

  // Identifies the weights independently of the header contents.
  std::string fingerprint() const { return Sha256().update_values(std::span<const float>(values)).hex(); }
};

inline constexpr std::string_view kCheckpointMagic = "mocomsi-checkpoint v1";

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write checkpoint: " + path.string());
  auto header = ckpt.header;
  header["value_count"] = ckpt.values.size();
  out << kCheckpointMagic << '\n' << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(ckpt.values.data()),
            static_cast<std::streamsize>(ckpt.values.size() * sizeof(float)));
  if (!out) throw IngestError("short write: " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("checkpoint not found: " + path.string());
  std::string magic, header;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw IntegrityError("not a checkpoint file: " + path.string());
  std::getline(in, header);
  Checkpoint ckpt;
  try {
    ckpt.header = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  const auto n = ckpt.header.at("value_count").get<std::size_t>();
  ckpt.values.resize(n);
  in.read(reinterpret_cast<char*>(ckpt.values.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != n * sizeof(float)) {
    throw IntegrityError("truncated checkpoint: " + path.string());
  }
  return ckpt;
}

}  // namespace mocomsi
