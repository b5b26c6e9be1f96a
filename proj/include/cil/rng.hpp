#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <string_view>
#include <utility>
#include <vector>

namespace cil {

// SplitMix64. Every random decision in a run flows through one of these,
// seeded from a logged value, so integer draws are reproducible across
// implementations.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit SplitMix64(std::uint64_t seed = 0) noexcept : state_(seed) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept {
    return std::numeric_limits<result_type>::max();
  }

  result_type operator()() noexcept { return next(); }

  std::uint64_t next() noexcept {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform() noexcept {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
  }

  /// Integer in [0, bound). Plain modulo so other implementations can match it.
  std::uint64_t below(std::uint64_t bound) noexcept { return next() % bound; }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Standard normal via Box-Muller (consumes two draws).
  double normal() noexcept;

  /// Beta(a, b) via two gamma draws (Marsaglia-Tsang).
  double beta(double a, double b) noexcept;

  double gamma(double shape) noexcept;

  /// Child stream for a named consumer. Seed = first output of
  /// SplitMix64(seed ^ fnv1a64(name)).
  static SplitMix64 stream(std::uint64_t seed, std::string_view name) noexcept;

  std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

std::uint64_t fnv1a64(std::string_view bytes) noexcept;

/// In-place Fisher-Yates: for i = n-1 down to 1, j = next() % (i+1), swap.
template <typename T>
void fisher_yates(std::vector<T>& values, SplitMix64& rng) {
  for (std::size_t i = values.size(); i-- > 1;) {
    const auto j = static_cast<std::size_t>(rng.below(i + 1));
    std::swap(values[i], values[j]);
  }
}

}  // namespace cil
