#include "cil/augment.hpp"

#include <algorithm>
#include <cmath>

#include "cil/error.hpp"

namespace cil {

namespace {

void check_images(const Tensor& images) {
  if (images.rank() != 4) {
    throw DimensionError("augment: images must be [b, c, h, w], got " + to_string(images.shape()));
  }
}

std::vector<std::size_t> resolve_partners(std::size_t b, std::span<const std::size_t> partners) {
  if (partners.empty()) return reversed_partners(b);
  if (partners.size() != b) throw DimensionError("augment: partner list does not match batch size");
  for (auto j : partners)
    if (j >= b) throw DimensionError("augment: partner index out of range");
  return {partners.begin(), partners.end()};
}

}  // namespace

Tensor one_hot(std::span<const std::size_t> labels, std::size_t num_classes, double smoothing) {
  if (smoothing < 0.0 || smoothing >= 1.0) throw ConfigError("augment.label_smoothing", "must be in [0, 1)");
  Tensor t({labels.size(), num_classes}, smoothing / static_cast<double>(num_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw DimensionError("label " + std::to_string(labels[i]) + " outside " +
                           std::to_string(num_classes) + " classes");
    }
    t[i * num_classes + labels[i]] += 1.0 - smoothing;
  }
  return t;
}

SoftBatch make_batch(Tensor images, std::span<const std::size_t> labels, std::size_t num_classes,
                     double smoothing) {
  check_images(images);
  if (images.dim(0) != labels.size()) throw DimensionError("augment: label count does not match batch");
  return {std::move(images), one_hot(labels, num_classes, smoothing), MixKind::none, 1.0};
}

std::vector<std::size_t> reversed_partners(std::size_t batch) {
  std::vector<std::size_t> p(batch);
  for (std::size_t i = 0; i < batch; ++i) p[i] = batch - 1 - i;
  return p;
}

SoftBatch mixup(const SoftBatch& batch, double lambda, std::span<const std::size_t> partners) {
  check_images(batch.images);
  if (lambda < 0.0 || lambda > 1.0) throw ConfigError("augment.mixup", "lambda must lie in [0, 1]");
  const std::size_t b = batch.images.dim(0);
  if (b < 2) return batch;
  const auto partner = resolve_partners(b, partners);
  SoftBatch out = batch;
  const std::size_t px = batch.images.size() / b;
  const std::size_t k = batch.targets.dim(1);
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t j = partner[i];
    for (std::size_t e = 0; e < px; ++e) {
      out.images[i * px + e] = lambda * batch.images[i * px + e] + (1.0 - lambda) * batch.images[j * px + e];
    }
    for (std::size_t c = 0; c < k; ++c) {
      out.targets[i * k + c] = lambda * batch.targets[i * k + c] + (1.0 - lambda) * batch.targets[j * k + c];
    }
  }
  out.mix = MixKind::mixup;
  out.lambda = lambda;
  return out;
}

Box cutmix_box(std::size_t h, std::size_t w, double lambda, std::size_t cy, std::size_t cx) {
  if (lambda < 0.0 || lambda > 1.0) throw ConfigError("augment.cutmix", "lambda must lie in [0, 1]");
  const double ratio = std::sqrt(1.0 - lambda);
  const auto bh = static_cast<long>(std::floor(static_cast<double>(h) * ratio));
  const auto bw = static_cast<long>(std::floor(static_cast<double>(w) * ratio));
  auto clip = [](long v, std::size_t hi) {
    return static_cast<std::size_t>(std::clamp<long>(v, 0, static_cast<long>(hi)));
  };
  const long y = static_cast<long>(cy), x = static_cast<long>(cx);
  if (bh == static_cast<long>(h) && bw == static_cast<long>(w)) return {0, h, 0, w};
  return {clip(y - bh / 2, h), clip(y + bh / 2, h), clip(x - bw / 2, w), clip(x + bw / 2, w)};
}

SoftBatch cutmix(const SoftBatch& batch, const Box& box, std::span<const std::size_t> partners) {
  check_images(batch.images);
  const std::size_t b = batch.images.dim(0), c = batch.images.dim(1);
  const std::size_t h = batch.images.dim(2), w = batch.images.dim(3);
  if (box.y0 > box.y1 || box.x0 > box.x1 || box.y1 > h || box.x1 > w) {
    throw DimensionError("cutmix: box outside the image");
  }
  if (b < 2) return batch;
  const auto partner = resolve_partners(b, partners);
  const double pasted = static_cast<double>(box.area()) / static_cast<double>(h * w);
  const double lambda = 1.0 - pasted;
  SoftBatch out = batch;
  const std::size_t k = batch.targets.dim(1);
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t j = partner[i];
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = box.y0; y < box.y1; ++y)
        for (std::size_t x = box.x0; x < box.x1; ++x) {
          const std::size_t off = ((ch * h) + y) * w + x;
          out.images[i * c * h * w + off] = batch.images[j * c * h * w + off];
        }
    for (std::size_t cl = 0; cl < k; ++cl) {
      out.targets[i * k + cl] = lambda * batch.targets[i * k + cl] + pasted * batch.targets[j * k + cl];
    }
  }
  out.mix = MixKind::cutmix;
  out.lambda = lambda;
  return out;
}

SoftBatch cutmix(const SoftBatch& batch, double lambda, SplitMix64& rng,
                 std::span<const std::size_t> partners) {
  check_images(batch.images);
  const std::size_t h = batch.images.dim(2), w = batch.images.dim(3);
  const auto cy = static_cast<std::size_t>(rng.below(h));
  const auto cx = static_cast<std::size_t>(rng.below(w));
  return cutmix(batch, cutmix_box(h, w, lambda, cy, cx), partners);
}

Tensor hflip(const Tensor& images) {
  check_images(images);
  Tensor out = images;
  const std::size_t w = images.dim(3);
  const std::size_t rows = images.size() / w;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t x = 0; x < w; ++x) out[r * w + x] = images[r * w + (w - 1 - x)];
  return out;
}

Tensor random_hflip(const Tensor& images, double p, SplitMix64& rng) {
  check_images(images);
  Tensor out = images;
  const std::size_t b = images.dim(0), w = images.dim(3);
  const std::size_t per = images.size() / b;
  for (std::size_t i = 0; i < b; ++i) {
    if (!rng.bernoulli(p)) continue;
    for (std::size_t r = 0; r < per / w; ++r) {
      const std::size_t base = i * per + r * w;
      for (std::size_t x = 0; x < w; ++x) out[base + x] = images[base + (w - 1 - x)];
    }
  }
  return out;
}

AugmentConfig AugmentConfig::none() {
  AugmentConfig cfg;
  cfg.enabled = false;
  cfg.mixing = false;
  cfg.flip_prob = 0.0;
  cfg.label_smoothing = 0.0;
  return cfg;
}

void AugmentConfig::validate() const {
  auto prob = [](double v, const char* field) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(field, "must be a probability in [0, 1]");
  };
  prob(apply_prob, "augment.apply_prob");
  prob(mixup_prob, "augment.mixup_prob");
  prob(flip_prob, "augment.flip_prob");
  if (!(mixup_alpha > 0.0)) throw ConfigError("augment.mixup_alpha", "must be positive");
  if (!(cutmix_alpha > 0.0)) throw ConfigError("augment.cutmix_alpha", "must be positive");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
    throw ConfigError("augment.label_smoothing", "must be in [0, 1)");
  }
}

SoftBatch augment(const Tensor& images, std::span<const std::size_t> labels,
                  std::size_t num_classes, const AugmentConfig& cfg, SplitMix64& rng) {
  cfg.validate();
  if (!cfg.enabled) return make_batch(images, labels, num_classes, 0.0);
  SoftBatch batch = make_batch(random_hflip(images, cfg.flip_prob, rng), labels, num_classes,
                               cfg.label_smoothing);
  if (!cfg.mixing || images.dim(0) < 2 || !rng.bernoulli(cfg.apply_prob)) return batch;
  if (rng.bernoulli(cfg.mixup_prob)) {
    return mixup(batch, rng.beta(cfg.mixup_alpha, cfg.mixup_alpha));
  }
  return cutmix(batch, rng.beta(cfg.cutmix_alpha, cfg.cutmix_alpha), rng);
}

}  // namespace cil
