#pragma once

// Checkpoint container, little-endian:
//
//   bytes 0..7    magic "DINOCKPT"
//   u32           format version (1)
//   u64           header length in bytes
//   header        JSON text: {"meta": {...}, "tensors": [{"name", "shape", "offset"}]}
//   payload       raw float64 values; each tensor's offset is counted in bytes
//                 from the start of the payload
//
// Values are stored bit-exactly, so a save/load round trip is lossless.

#include "dino/tensor.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace dino {

struct NamedBuffer {
  std::string name;
  Shape shape;
  Buffer data;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedBuffer> tensors;

  const NamedBuffer* find(const std::string& name) const;
};

/// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dino
