#pragma once

#include <cstdint>
#include <random>

namespace dgmr {

/// Seeded generator with platform-independent output.
///
/// std::normal_distribution and std::uniform_int_distribution are
/// implementation-defined, so sampling is done here on top of the raw
/// mt19937_64 stream, which the standard pins bit-for-bit.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n), unbiased (rejection sampling).
  std::uint64_t below(std::uint64_t n);

  /// Standard normal via Box-Muller; caches the second variate.
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Derive an independent stream for a sub-task.
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream);

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace dgmr
