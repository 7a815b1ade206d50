#ifndef CDSNAS_RNG_HPP_
#define CDSNAS_RNG_HPP_

#include <cstdint>
#include <random>

namespace cdsnas {

// Seeded RNG handed around explicitly; every randomized routine takes one so
// that runs are reproducible bit-for-bit under a fixed seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::mt19937_64& engine() { return engine_; }

  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> d(mean, stddev);
    return d(engine_);
  }

  double uniform(double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(engine_);
  }

  // Inclusive range.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    std::uniform_int_distribution<std::int64_t> d(lo, hi);
    return d(engine_);
  }

  // Derives an independent stream, e.g. one per parallel run.
  Rng fork() { return Rng(engine_()); }

  template <typename V>
  void shuffle(V& v) {
    std::shuffle(v.begin(), v.end(), engine_);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace cdsnas

#endif  // CDSNAS_RNG_HPP_
