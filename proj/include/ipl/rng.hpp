#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace ipl {

/// Seeded random source with platform-independent draws.
///
/// The standard distributions are implementation-defined, so every draw here
/// is derived directly from the raw 64-bit engine output. Identical seeds give
/// identical streams on every toolchain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t n);

  /// Exponential(1) draw; the building block of Dirichlet(1).
  double exponential();

  bool bernoulli(double p) { return uniform() < p; }

  /// Index drawn from an unnormalized non-negative weight vector.
  std::size_t categorical(std::span<const double> weights);

  /// Derives an independent child stream; used to give each pipeline stage
  /// its own generator so stages do not perturb each other.
  Rng split(std::uint64_t stream_id);

 private:
  std::mt19937_64 engine_;
};

}  // namespace ipl
