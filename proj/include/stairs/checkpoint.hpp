#pragma once

// Flat parameter archive. Layout (all integers little-endian):
//
//   magic      8 bytes  "STAIRSCK"
//   version    u32      1
//   meta_len   u32      length of the metadata blob
//   meta       bytes    UTF-8 JSON describing the model configuration
//   count      u32      number of tensors
//   count x {
//     name_len u32, name bytes (dotted parameter name)
//     ndim     u32, dims u64[ndim]
//     payload  f64[prod(dims)] little-endian IEEE-754
//   }

#include <filesystem>
#include <string>
#include <vector>

#include "stairs/nn.hpp"

namespace stairs {

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::string metadata;
  std::vector<CheckpointEntry> entries;
};

std::vector<unsigned char> encode_checkpoint(const ParamSet& params, const std::string& metadata);
Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes);

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params, const std::string& metadata);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies archived values into `params`. Every parameter must be present with
// an identical shape and the archive must not carry extra tensors.
void restore_parameters(const Checkpoint& ckpt, ParamSet& params);

}  // namespace stairs
