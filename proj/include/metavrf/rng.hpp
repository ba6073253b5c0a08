#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "metavrf/tensor.hpp"

namespace metavrf {

/// Deterministic, serializable pseudo-random generator (xoshiro256++ seeded via
/// splitmix64). All stochastic behaviour in the toolkit flows through this type
/// so that runs are reproducible bit-for-bit from a single seed.
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n).
  int64_t uniform_int(int64_t n);

  /// Standard normal via Box-Muller (second draw cached).
  double normal();
  double normal(double mean, double stddev);
  /// Normal resampled until |z| <= 2 standard deviations.
  double truncated_normal(double stddev);

  void fill_normal(Tensor& t);
  void fill_uniform(Tensor& t, double lo, double hi);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      const int64_t j = uniform_int(i + 1);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

  /// Serializable state: 4 xoshiro words + Box-Muller spare.
  std::array<uint64_t, 6> save_state() const;
  void load_state(const std::array<uint64_t, 6>& state);

 private:
  uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Stable 64-bit mix of independent stream labels (seed, phase, iteration,
/// slot). Used to derive per-episode generators so that episode i is
/// reproducible regardless of evaluation order.
uint64_t derive_seed(uint64_t seed, uint64_t phase, uint64_t iteration, uint64_t slot);

}  // namespace metavrf
