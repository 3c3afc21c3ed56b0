// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace latent_depth {

/// Seeded 64-bit Mersenne Twister with distribution transforms written out
/// explicitly, so draws are identical across standard libraries. The engine
/// state round-trips through a string for checkpointing.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform on the open interval (0, 1).
  double uniform();
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  /// Standard Gumbel(0, 1) draw.
  double gumbel();

  std::string state() const;
  void restore(const std::string& state);

  /// Deterministic child seed for stream `index` derived from `seed`.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t index);

 private:
  std::mt19937_64 engine_;
};

}  // namespace latent_depth
