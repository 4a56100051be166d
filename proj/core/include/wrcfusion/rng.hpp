#pragma once
#include <cmath>
#include <cstdint>
#include <random>

namespace wrc {

// Deterministic random source. Distributions are hand-rolled on top of the
// mt19937_64 bit stream so results do not depend on the standard library's
// distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t bits() { return gen_(); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(gen_() % n);
  }

  // Box-Muller; the spare value is discarded to keep the stream position
  // independent of call history.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  double rayleigh(double sigma) {
    double u = uniform();
    return sigma * std::sqrt(-2.0 * std::log1p(-u));
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace wrc
