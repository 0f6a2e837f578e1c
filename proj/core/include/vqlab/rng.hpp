#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>

namespace vqlab {

// SplitMix64 finalizer.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Counter-based random stream: every draw is a pure function of (key, counter),
// so results are independent of evaluation order and safe to compute in
// parallel. Sub-streams are derived with sub(tag).
class RngStream {
 public:
  RngStream() = default;
  explicit RngStream(std::uint64_t seed, std::uint64_t tag = 0)
      : key_(splitmix64(splitmix64(seed) + splitmix64(tag))) {}

  RngStream sub(std::uint64_t tag) const {
    RngStream s;
    s.key_ = splitmix64(key_ + splitmix64(tag));
    return s;
  }

  std::uint64_t bits(std::uint64_t counter) const {
    return splitmix64(key_ + counter * 0x9E3779B97F4A7C15ull);
  }

  // Uniform in [0, 1).
  double uniform(std::uint64_t counter) const {
    return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
  }

  // Uniform in (0, 1]; safe as a log() argument.
  double uniform_pos(std::uint64_t counter) const {
    return (static_cast<double>(bits(counter) >> 11) + 1.0) * 0x1.0p-53;
  }

  double uniform_in(std::uint64_t counter, double lo, double hi) const {
    return lo + (hi - lo) * uniform(counter);
  }

  // Integer in [0, n) via fixed-point multiply (no modulo bias to speak of).
  std::uint64_t below(std::uint64_t counter, std::uint64_t n) const {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(bits(counter)) * n) >> 64);
  }

  // Standard normal via Box-Muller; consumes counters 2c and 2c+1.
  double normal(std::uint64_t counter) const {
    const double u1 = uniform_pos(2 * counter);
    const double u2 = uniform(2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // Categorical draw by CDF walk. Entries with zero probability are never
  // returned; if the accumulated mass falls short of the draw due to rounding,
  // the last positive-probability index wins.
  int categorical(std::uint64_t counter, std::span<const double> probs) const {
    if (probs.empty()) throw std::invalid_argument("categorical: empty probability vector");
    const double u = uniform(counter);
    double cum = 0.0;
    int last_positive = -1;
    for (int i = 0; i < static_cast<int>(probs.size()); ++i) {
      if (probs[i] > 0.0) {
        last_positive = i;
        cum += probs[i];
        if (u < cum) return i;
      }
    }
    if (last_positive < 0) throw std::invalid_argument("categorical: all probabilities are zero");
    return last_positive;
  }

 private:
  std::uint64_t key_ = 0;
};

}  // namespace vqlab
