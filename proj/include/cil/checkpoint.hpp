#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cil/memory.hpp"
#include "cil/model.hpp"

namespace cil {

/// Model and replay memory after one completed step.
struct Checkpoint {
  std::uint32_t step = 0;
  ModelState model;
  ExemplarStore store;
  /// Image geometry of the stored exemplars.
  std::uint16_t channels = 3, height = 16, width = 16;

  bool operator==(const Checkpoint& other) const;
};

/// Layout (little-endian):
///   "CILM", version u16, step u32
///   spec: image_size u32, in_channels u32, stem u8, patch_size u32,
///         n_stem u32, stem_channels u32 * n_stem, embed_dim u32, num_blocks u32,
///         num_heads u32, mlp_ratio u32, num_classes u32, initial_temperature f64
///   params, then buffers: count u32, then per tensor
///         name_len u16, name, rank u8, dims u32 * rank, values f64 * size
///   store: policy u8, amount u32, channels u16, height u16, width u16,
///         n_classes u32, then per class: class id u16, count u32,
///         then count records of (label u16, pixels u8 * c*h*w)
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cil
