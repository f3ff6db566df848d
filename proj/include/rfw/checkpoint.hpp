#pragma once

// Versioned binary checkpoints: named tensors (weights, running statistics,
// optimizer velocities) plus named strings (serialized config, RNG state,
// counters). Explicit little-endian layout; a bad or mismatched header is
// refused with the expected version tag in the message.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include "rfw/io.hpp"
#include "rfw/tensor.hpp"

namespace rfw {

inline constexpr char kCheckpointMagic[8] = {'R', 'F', 'W', 'C', 'K', 'P', 'T', '1'};

struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> strings;
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path.string());
  os.write(kCheckpointMagic, 8);
  detail::write_u64_le(os, ckpt.tensors.size() + ckpt.strings.size());
  for (const auto& [name, t] : ckpt.tensors) {
    detail::write_u64_le(os, 0);  // entry kind: tensor
    detail::write_string(os, name);
    write_tensor(os, t);
  }
  for (const auto& [name, s] : ckpt.strings) {
    detail::write_u64_le(os, 1);  // entry kind: string
    detail::write_string(os, name);
    detail::write_string(os, s);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("checkpoint: unrecognized header in " + path.string() +
                             " (expected version tag RFWCKPT1)");
  Checkpoint ckpt;
  const std::uint64_t count = detail::read_u64_le(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t kind = detail::read_u64_le(is);
    const std::string name = detail::read_string(is);
    if (kind == 0)
      ckpt.tensors.emplace(name, read_tensor(is));
    else if (kind == 1)
      ckpt.strings.emplace(name, detail::read_string(is));
    else
      throw std::runtime_error("checkpoint: corrupt entry kind " + std::to_string(kind) +
                               " in " + path.string() + " (version tag RFWCKPT1)");
  }
  return ckpt;
}

}  // namespace rfw
