#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace pcnn {

/// Portable seeded generator. Everything here is defined bit-for-bit (no
/// std:: distributions), so sampled data is identical across standard
/// libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  /// Independent stream derived from (this seed, key). Used to give every
  /// query/class its own stream so results do not depend on visit order.
  static Rng stream(std::uint64_t seed, std::uint64_t key);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform in [lo, hi).
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();

  /// Uniformly chosen k-subset of [0, n), returned in draw order.
  std::vector<std::size_t> choose(std::size_t n, std::size_t k);
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& x);
std::uint64_t mix_keys(std::uint64_t a, std::uint64_t b);

}  // namespace pcnn
