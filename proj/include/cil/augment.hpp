#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cil/rng.hpp"
#include "cil/tensor.hpp"

namespace cil {

enum class MixKind { none, mixup, cutmix };

struct SoftBatch {
  Tensor images;   // [b, c, h, w]
  Tensor targets;  // [b, num_classes], rows sum to 1
  MixKind mix = MixKind::none;
  /// Weight on each sample's own label after mixing (1 when unmixed).
  double lambda = 1.0;
};

/// One-hot targets, optionally smoothed: (1 - s) on the label plus s/K everywhere.
Tensor one_hot(std::span<const std::size_t> labels, std::size_t num_classes, double smoothing = 0.0);

SoftBatch make_batch(Tensor images, std::span<const std::size_t> labels, std::size_t num_classes,
                     double smoothing = 0.0);

/// Partner of sample i is b - 1 - i.
std::vector<std::size_t> reversed_partners(std::size_t batch);

/// x_i <- lambda*x_i + (1-lambda)*x_j, same for targets. Batches of one pass
/// through unchanged.
SoftBatch mixup(const SoftBatch& batch, double lambda, std::span<const std::size_t> partners = {});

/// Half-open pixel rectangle [y0, y1) x [x0, x1).
struct Box {
  std::size_t y0 = 0, y1 = 0, x0 = 0, x1 = 0;
  std::size_t area() const noexcept { return (y1 - y0) * (x1 - x0); }
};

/// Box of side fraction sqrt(1 - lambda) centred at (cy, cx), clipped to the image.
Box cutmix_box(std::size_t h, std::size_t w, double lambda, std::size_t cy, std::size_t cx);

/// Pastes `box` from each partner. The partner's target weight is the clipped
/// box area over h*w.
SoftBatch cutmix(const SoftBatch& batch, const Box& box, std::span<const std::size_t> partners = {});

/// Draws a centre uniformly and pastes the resulting box.
SoftBatch cutmix(const SoftBatch& batch, double lambda, SplitMix64& rng,
                 std::span<const std::size_t> partners = {});

/// Mirrors each sample along the width axis with probability p.
Tensor random_hflip(const Tensor& images, double p, SplitMix64& rng);
Tensor hflip(const Tensor& images);

struct AugmentConfig {
  bool enabled = true;
  bool mixing = true;
  double apply_prob = 0.5;
  double mixup_prob = 0.5;
  double mixup_alpha = 0.8;
  double cutmix_alpha = 1.0;
  double flip_prob = 0.5;
  double label_smoothing = 0.1;

  static AugmentConfig none();
  void validate() const;
};

/// Flip, smooth, then mix with Mixup or CutMix. Disabled configs return exact one-hots.
SoftBatch augment(const Tensor& images, std::span<const std::size_t> labels,
                  std::size_t num_classes, const AugmentConfig& cfg, SplitMix64& rng);

}  // namespace cil
