#include "cil/data.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "cil/binio.hpp"
#include "cil/error.hpp"
#include "cil/rng.hpp"

namespace cil {

void LabeledDataset::validate() const {
  if (images.size() != labels.size()) throw ContractError("dataset: image and label counts differ");
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].size() != pixel_count()) throw ContractError("dataset: image " + std::to_string(i) + " has the wrong size");
    if (labels[i] >= num_classes) throw ContractError("dataset: label out of range at " + std::to_string(i));
  }
  std::vector<int> seen(images.size(), 0);
  for (auto* split : {&train, &test})
    for (auto idx : *split) {
      if (idx >= images.size()) throw ContractError("dataset: split index out of range");
      if (seen[idx]++) throw ContractError("dataset: split index " + std::to_string(idx) + " used twice");
    }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) {
    throw ContractError("dataset: split does not cover every image");
  }
}

double normalize_pixel(std::uint8_t v) noexcept { return (static_cast<double>(v) / 255.0 - 0.5) / 0.25; }

Tensor to_tensor(std::span<const Pixels* const> images, std::size_t channels, std::size_t height,
                 std::size_t width) {
  const std::size_t px = channels * height * width;
  Tensor out({images.size(), channels, height, width});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->size() != px) throw DimensionError("to_tensor: image has the wrong size");
    for (std::size_t e = 0; e < px; ++e) out[i * px + e] = normalize_pixel((*images[i])[e]);
  }
  return out;
}

Tensor to_tensor(const LabeledDataset& ds, std::span<const std::uint32_t> indices) {
  std::vector<const Pixels*> ptrs;
  ptrs.reserve(indices.size());
  for (auto i : indices) ptrs.push_back(&ds.images.at(i));
  return to_tensor(ptrs, ds.channels, ds.height, ds.width);
}

std::vector<std::uint16_t> shuffle_classes(std::size_t total_classes, std::uint64_t seed) {
  if (total_classes == 0) throw ConfigError("protocol.total_classes", "must be at least 1");
  if (total_classes > std::numeric_limits<std::uint16_t>::max()) {
    throw ConfigError("protocol.total_classes", "too many classes");
  }
  std::vector<std::uint16_t> order(total_classes);
  std::iota(order.begin(), order.end(), std::uint16_t{0});
  SplitMix64 rng(seed);
  fisher_yates(order, rng);
  return order;
}

void ProtocolConfig::validate() const {
  if (total_classes == 0) throw ConfigError("protocol.total_classes", "must be at least 1");
  if (initial_classes == 0 || initial_classes > total_classes) {
    throw ConfigError("protocol.initial_classes", "must lie in [1, total_classes]");
  }
  if (initial_classes < total_classes && increment == 0) {
    throw ConfigError("protocol.increment", "must be at least 1");
  }
  if (increment > 0 && (total_classes - initial_classes) % increment != 0) {
    throw ConfigError("protocol.increment", std::to_string(total_classes - initial_classes) +
                                                " remaining classes are not divisible by " +
                                                std::to_string(increment));
  }
  if (budget.amount == 0) throw ConfigError("protocol.budget", "must be at least 1");
}

std::vector<std::size_t> StepPlan::sizes() const {
  std::vector<std::size_t> out;
  for (const auto& s : steps) out.push_back(s.count);
  return out;
}

StepPlan build_protocol(const ProtocolConfig& cfg) {
  cfg.validate();
  StepPlan plan;
  plan.order = shuffle_classes(cfg.total_classes, cfg.shuffle_seed);
  plan.steps.push_back({0, cfg.initial_classes});
  for (std::size_t first = cfg.initial_classes; first < cfg.total_classes; first += cfg.increment) {
    plan.steps.push_back({first, cfg.increment});
  }
  return plan;
}

LabeledDataset generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.num_classes == 0 || cfg.per_class_train == 0 || cfg.per_class_test == 0 ||
      cfg.image_size == 0 || cfg.channels == 0) {
    throw ConfigError("data", "counts and sizes must be at least 1");
  }
  if (cfg.difficulty < 0.0) throw ConfigError("data.difficulty", "must be non-negative");
  const std::size_t s = cfg.image_size, c = cfg.channels;
  constexpr int kComponents = 3;
  constexpr double kTwoPi = 2.0 * std::numbers::pi;

  SplitMix64 proto_rng = SplitMix64::stream(cfg.seed, "data.prototypes");
  std::vector<std::vector<double>> protos(cfg.num_classes, std::vector<double>(c * s * s, 0.5));
  for (auto& proto : protos) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (int k = 0; k < kComponents; ++k) {
        const double amp = 0.1 + 0.15 * proto_rng.uniform();
        std::uint64_t fy = proto_rng.below(3), fx = proto_rng.below(3);
        if (fx == 0 && fy == 0) fx = 1;
        const double phase = kTwoPi * proto_rng.uniform();
        for (std::size_t y = 0; y < s; ++y)
          for (std::size_t x = 0; x < s; ++x) {
            const double arg = kTwoPi * (static_cast<double>(fy * y) + static_cast<double>(fx * x)) /
                               static_cast<double>(s);
            proto[(ch * s + y) * s + x] += amp * std::sin(arg + phase);
          }
      }
    }
  }

  LabeledDataset ds;
  ds.height = ds.width = s;
  ds.channels = c;
  ds.num_classes = cfg.num_classes;
  SplitMix64 rng = SplitMix64::stream(cfg.seed, "data.samples");
  const auto max_shift = static_cast<long>(std::lround(3.0 * cfg.difficulty));
  const double noise = 0.25 * cfg.difficulty;
  const long size = static_cast<long>(s);
  for (std::size_t cls = 0; cls < cfg.num_classes; ++cls) {
    for (std::size_t n = 0; n < cfg.per_class_train + cfg.per_class_test; ++n) {
      const long dy = max_shift ? static_cast<long>(rng.below(2 * max_shift + 1)) - max_shift : 0;
      const long dx = max_shift ? static_cast<long>(rng.below(2 * max_shift + 1)) - max_shift : 0;
      Pixels img(c * s * s);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (long y = 0; y < size; ++y)
          for (long x = 0; x < size; ++x) {
            const auto sy = static_cast<std::size_t>(((y - dy) % size + size) % size);
            const auto sx = static_cast<std::size_t>(((x - dx) % size + size) % size);
            double v = protos[cls][(ch * s + sy) * s + sx];
            if (noise > 0.0) v += noise * rng.normal();
            v = std::clamp(v, 0.0, 1.0);
            img[(ch * s + static_cast<std::size_t>(y)) * s + static_cast<std::size_t>(x)] =
                static_cast<std::uint8_t>(std::lround(v * 255.0));
          }
      const auto idx = static_cast<std::uint32_t>(ds.images.size());
      ds.images.push_back(std::move(img));
      ds.labels.push_back(static_cast<std::uint16_t>(cls));
      (n < cfg.per_class_train ? ds.train : ds.test).push_back(idx);
    }
  }
  return ds;
}

double nearest_mean_accuracy(const LabeledDataset& ds) {
  const std::size_t px = ds.pixel_count();
  std::vector<std::vector<double>> mean(ds.num_classes, std::vector<double>(px, 0.0));
  std::vector<std::size_t> count(ds.num_classes, 0);
  for (auto i : ds.train) {
    ++count[ds.labels[i]];
    for (std::size_t e = 0; e < px; ++e) mean[ds.labels[i]][e] += ds.images[i][e];
  }
  for (std::size_t k = 0; k < ds.num_classes; ++k)
    for (auto& v : mean[k]) v /= static_cast<double>(std::max<std::size_t>(count[k], 1));
  std::size_t correct = 0;
  for (auto i : ds.test) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < ds.num_classes; ++k) {
      double d = 0.0;
      for (std::size_t e = 0; e < px; ++e) {
        const double diff = ds.images[i][e] - mean[k][e];
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    correct += best == ds.labels[i];
  }
  return ds.test.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(ds.test.size());
}

std::vector<std::uint8_t> encode_dataset(const LabeledDataset& ds) {
  ds.validate();
  binio::Writer w;
  w.put_bytes(reinterpret_cast<const std::uint8_t*>(kDatasetMagic), 4);
  w.put<std::uint16_t>(kDatasetVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.images.size()));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(ds.height));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(ds.width));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(ds.channels));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(ds.num_classes));
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    w.put<std::uint16_t>(ds.labels[i]);
    w.put_bytes(ds.images[i].data(), ds.images[i].size());
  }
  for (auto* split : {&ds.train, &ds.test}) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(split->size()));
    for (auto idx : *split) w.put<std::uint32_t>(idx);
  }
  return w.take();
}

LabeledDataset decode_dataset(const std::vector<std::uint8_t>& bytes) {
  binio::Reader r(bytes);
  const std::string magic = r.get_string(4, "magic");
  if (magic != std::string(kDatasetMagic, 4)) throw ParseError("bad magic", 0);
  const auto version = r.get<std::uint16_t>("version");
  if (version != kDatasetVersion) r.fail("unsupported version " + std::to_string(version));
  LabeledDataset ds;
  const auto n = r.get<std::uint32_t>("image count");
  ds.height = r.get<std::uint16_t>("height");
  ds.width = r.get<std::uint16_t>("width");
  ds.channels = r.get<std::uint16_t>("channels");
  ds.num_classes = r.get<std::uint16_t>("class count");
  const std::size_t px = ds.pixel_count();
  if (px == 0) r.fail("zero-sized images");
  ds.images.reserve(n);
  ds.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    r.set_record(i);
    const std::size_t at = r.offset();
    const auto label = r.get<std::uint16_t>("record label");
    if (label >= ds.num_classes) {
      throw ParseError("label " + std::to_string(label) + " out of range", at, i);
    }
    const auto* p = r.take(px, "record pixels");
    ds.labels.push_back(label);
    ds.images.emplace_back(p, p + px);
  }
  r.set_record(std::nullopt);
  for (auto* split : {&ds.train, &ds.test}) {
    const auto count = r.get<std::uint32_t>("split size");
    if (count > n) r.fail("split larger than the dataset");
    split->reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t at = r.offset();
      const auto idx = r.get<std::uint32_t>("split index");
      if (idx >= n) throw ParseError("split index out of range", at);
      split->push_back(idx);
    }
  }
  if (r.remaining() != 0) r.fail("trailing bytes");
  try {
    ds.validate();
  } catch (const ContractError& e) {
    throw ParseError(e.what(), r.offset());
  }
  return ds;
}

void save_dataset(const LabeledDataset& ds, const std::filesystem::path& path) {
  binio::write_file(path, encode_dataset(ds));
}

LabeledDataset load_dataset(const std::filesystem::path& path) {
  return decode_dataset(binio::read_file(path));
}

}  // namespace cil
