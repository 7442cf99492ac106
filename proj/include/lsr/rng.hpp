#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string_view>

namespace lsr {

/// Derive a child seed from a master seed, a purpose tag and up to a few
/// integer indices (subject, slice, draw, ...). Pure function; no global state.
std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose,
                          std::initializer_list<std::uint64_t> indices = {});

/// Random source with platform-stable distributions. The engine is
/// std::mt19937_64 (fully specified by the standard); the transforms below
/// are implemented here rather than taken from <random>, whose distribution
/// algorithms are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t master, std::string_view purpose, std::initializer_list<std::uint64_t> indices = {})
      : engine_(derive_seed(master, purpose, indices)) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), n > 0. Rejection sampling, no modulo bias.
  std::uint64_t uniform_int(std::uint64_t n);

  /// Standard normal via Box-Muller (both outputs used).
  double normal();

  bool bernoulli(double p) { return uniform() < p; }

  /// Draw an index from unnormalized non-negative weights.
  template <class T>
  int categorical(std::span<const T> weights);

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

template <class T>
int Rng::categorical(std::span<const T> weights) {
  double total = 0.0;
  for (T w : weights) total += static_cast<double>(w);
  const double u = uniform() * total;
  double acc = 0.0;
  int last_positive = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= T(0)) continue;
    acc += static_cast<double>(weights[i]);
    last_positive = static_cast<int>(i);
    if (u < acc) return static_cast<int>(i);
  }
  return last_positive;
}

}  // namespace lsr
