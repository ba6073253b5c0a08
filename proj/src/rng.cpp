#include "metavrf/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace metavrf {

namespace {

uint64_t splitmix64(uint64_t& x) {
  x += 0x9E3779B97F4A7C15ULL;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(uint64_t seed) {
  uint64_t sm = seed;
  for (auto& word : s_) word = splitmix64(sm);
}

uint64_t Rng::next_u64() {
  const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
  const uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() {
  // 53 mantissa bits -> double in [0, 1).
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int64_t Rng::uniform_int(int64_t n) {
  if (n <= 0) throw std::invalid_argument("uniform_int requires n > 0");
  const uint64_t un = static_cast<uint64_t>(n);
  // Rejection sampling to avoid modulo bias.
  const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return static_cast<int64_t>(x % un);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

double Rng::normal(double mean, double stddev) { return mean + stddev * normal(); }

double Rng::truncated_normal(double stddev) {
  double z;
  do {
    z = normal();
  } while (std::abs(z) > 2.0);
  return stddev * z;
}

void Rng::fill_normal(Tensor& t) {
  for (double& v : t.data) v = normal();
}

void Rng::fill_uniform(Tensor& t, double lo, double hi) {
  for (double& v : t.data) v = uniform(lo, hi);
}

std::array<uint64_t, 6> Rng::save_state() const {
  std::array<uint64_t, 6> st{};
  for (int i = 0; i < 4; ++i) st[static_cast<size_t>(i)] = s_[i];
  st[4] = has_spare_ ? 1u : 0u;
  uint64_t bits;
  static_assert(sizeof(bits) == sizeof(spare_));
  __builtin_memcpy(&bits, &spare_, sizeof(bits));
  st[5] = bits;
  return st;
}

void Rng::load_state(const std::array<uint64_t, 6>& state) {
  for (int i = 0; i < 4; ++i) s_[i] = state[static_cast<size_t>(i)];
  has_spare_ = state[4] != 0;
  uint64_t bits = state[5];
  __builtin_memcpy(&spare_, &bits, sizeof(bits));
}

uint64_t derive_seed(uint64_t seed, uint64_t phase, uint64_t iteration, uint64_t slot) {
  uint64_t x = seed;
  auto mix = [&x](uint64_t v) {
    x ^= v + 0x9E3779B97F4A7C15ULL + (x << 6) + (x >> 2);
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    x ^= x >> 31;
  };
  mix(phase);
  mix(iteration);
  mix(slot);
  return x;
}

}  // namespace metavrf
