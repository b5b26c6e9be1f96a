#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cil/memory.hpp"
#include "cil/tensor.hpp"

namespace cil {

/// u8 CHW images with labels and a train/test split.
struct LabeledDataset {
  std::size_t height = 16, width = 16, channels = 3;
  std::size_t num_classes = 0;
  std::vector<Pixels> images;
  std::vector<std::uint16_t> labels;
  std::vector<std::uint32_t> train;
  std::vector<std::uint32_t> test;

  std::size_t pixel_count() const noexcept { return height * width * channels; }
  /// Labels in range, pixel sizes consistent, split disjoint and exhaustive.
  void validate() const;
  bool operator==(const LabeledDataset&) const = default;
};

/// Bytes to network input: (v / 255 - 0.5) / 0.25.
double normalize_pixel(std::uint8_t v) noexcept;

/// Stacks images into a [b, c, h, w] tensor.
Tensor to_tensor(std::span<const Pixels* const> images, std::size_t channels, std::size_t height,
                 std::size_t width);
Tensor to_tensor(const LabeledDataset& ds, std::span<const std::uint32_t> indices);

/// Fisher-Yates over [0, total) with SplitMix64(seed).
std::vector<std::uint16_t> shuffle_classes(std::size_t total_classes, std::uint64_t seed);

struct ProtocolConfig {
  std::size_t total_classes = 10;
  std::size_t initial_classes = 6;
  std::size_t increment = 2;
  BudgetPolicy budget = BudgetPolicy::total(200);
  std::size_t epochs_initial = 32;
  std::size_t epochs_step = 8;
  std::uint64_t shuffle_seed = 1993;

  void validate() const;
};

struct StepRange {
  std::size_t first = 0;  // position in the shuffled class order
  std::size_t count = 0;
  std::size_t end() const noexcept { return first + count; }
};

struct StepPlan {
  std::vector<std::uint16_t> order;  // shuffled class ids
  std::vector<StepRange> steps;

  std::size_t seen_after(std::size_t step) const { return steps.at(step).end(); }
  std::vector<std::size_t> sizes() const;
};

StepPlan build_protocol(const ProtocolConfig& cfg);

struct SyntheticConfig {
  std::size_t num_classes = 10;
  std::size_t per_class_train = 64;
  std::size_t per_class_test = 20;
  std::size_t image_size = 16;
  std::size_t channels = 3;
  double difficulty = 0.5;
  std::uint64_t seed = 7;
};

/// Low-frequency periodic prototype per class; samples add a circular shift
/// of up to round(3 * difficulty) pixels and Gaussian noise of std
/// 0.25 * difficulty. Samples are stored class-major, train before test.
LabeledDataset generate_synthetic(const SyntheticConfig& cfg);

/// Test accuracy of the nearest class mean computed on raw train pixels.
double nearest_mean_accuracy(const LabeledDataset& ds);

inline constexpr char kDatasetMagic[4] = {'C', 'I', 'L', 'D'};
inline constexpr std::uint16_t kDatasetVersion = 1;

std::vector<std::uint8_t> encode_dataset(const LabeledDataset& ds);
/// Throws ParseError with the byte offset (and record index for records).
LabeledDataset decode_dataset(const std::vector<std::uint8_t>& bytes);
void save_dataset(const LabeledDataset& ds, const std::filesystem::path& path);
LabeledDataset load_dataset(const std::filesystem::path& path);

}  // namespace cil
