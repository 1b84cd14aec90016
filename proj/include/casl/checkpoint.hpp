#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "casl/tensor.hpp"

namespace casl {

// One named tensor in the flat checkpoint archive. Values are stored as
// row-major 32-bit little-endian floats; each entry is preceded by a header
// of name length (u32), name bytes, rank (u32) and extents (u32 each).
struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

// Writes entries in order via a temp file + rename, so an interrupted run
// never leaves a torn archive behind.
void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<CheckpointEntry>& entries);

std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path);

CheckpointEntry entry_from_tensor(std::string name, const Tensor& tensor);

// Copies entry values into an existing tensor; shapes must agree exactly.
void load_into_tensor(const CheckpointEntry& entry, Tensor& tensor);

}  // namespace casl
