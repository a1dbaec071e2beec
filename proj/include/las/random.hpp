#pragma once

#include <cstdint>
#include <random>

#include "las/tensors.hpp"

namespace las {

// mt19937_64 is fully specified by the standard; the distributions below are
// spelled out so draws are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// SplitMix64 finaliser; derives independent child seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng);
Matrix random_uniform(std::size_t rows, std::size_t cols, double lo, double hi, Rng& rng);

}  // namespace las
