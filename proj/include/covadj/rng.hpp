#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <utility>

namespace covadj {

namespace detail {
// SplitMix64 finalizer (Steele, Lea, Flood 2014).
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
inline constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;
}  // namespace detail

/// Counter-based 64-bit generator: output j is mix64(key + (j + 1) * golden).
///
/// Every draw is a pure function of (seed, counter), so a trace can be
/// replayed on any platform. All distribution helpers below are written
/// against this generator instead of <random> distributions, whose
/// algorithms differ between standard libraries.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit CounterRng(std::uint64_t seed) noexcept : key_(detail::mix64(seed ^ 0x6a09e667f3bcc909ULL)) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept {
    ++counter_;
    return detail::mix64(key_ + counter_ * detail::kGolden);
  }

  std::uint64_t counter() const noexcept { return counter_; }

  /// Uniform on the open interval (0, 1).
  double uniform() noexcept { return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t x;
    do {
      x = (*this)();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Box-Muller; one normal per two uniforms, no cached state.
  double normal() noexcept {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double sd) noexcept { return mean + sd * normal(); }

  double exponential(double rate) noexcept { return -std::log(uniform()) / rate; }

  /// Poisson by sequential inversion in log space.
  std::int64_t poisson(double mean) noexcept {
    if (mean <= 0.0) return 0;
    const double u = uniform();
    double log_p = -mean;
    double cdf = std::exp(log_p);
    std::int64_t k = 0;
    while (u > cdf && k < 100000) {
      ++k;
      log_p += std::log(mean) - std::log(static_cast<double>(k));
      cdf += std::exp(log_p);
      if (cdf >= 1.0) break;
    }
    return k;
  }

  template <class T>
  void shuffle(std::span<T> values) noexcept {
    for (std::size_t i = values.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(values[i - 1], values[j]);
    }
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Seed for replicate `index` of a run with `master` seed. Depends only on
/// (master, index), so replicates can be evaluated in any order or in parallel.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) noexcept {
  return detail::mix64(detail::mix64(master) ^ detail::mix64(index + detail::kGolden));
}

}  // namespace covadj
