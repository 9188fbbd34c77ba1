#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "asyncfm/digest.hpp"

namespace asyncfm {

// Counter-based deterministic generator. Each named stream is an
// independent sequence keyed by (seed, name); the only mutable state is
// the draw counter, so a stream serializes as a single integer and two
// streams never interfere regardless of interleaving.
class RandomSource {
 public:
  RandomSource(uint64_t seed, std::string_view stream)
      : key_(mix(seed ^ fnv1a(stream))), name_(stream), counter_(0) {}

  const std::string& name() const { return name_; }
  uint64_t counter() const { return counter_; }
  void set_counter(uint64_t c) { counter_ = c; }

  uint64_t next_u64() { return mix(key_ + (++counter_) * 0x9e3779b97f4a7c15ull); }

  // Strictly inside (0,1).
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1p-53;
  }

  // Box-Muller; two uniforms per draw, no cached second value.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  uint64_t uniform_index(uint64_t n) { return next_u64() % n; }

 private:
  static uint64_t mix(uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
  }

  uint64_t key_;
  std::string name_;
  uint64_t counter_;
};

// The named streams one training/inference run draws from. Keeping the
// purposes separate is what makes seed-matched ablations possible: a run
// that never samples masks still consumes the noise stream identically.
struct RngSet {
  RandomSource data;
  RandomSource mask;
  RandomSource time;
  RandomSource noise;
  RandomSource init;

  explicit RngSet(uint64_t seed)
      : data(seed, "data"),
        mask(seed, "mask"),
        time(seed, "time"),
        noise(seed, "noise"),
        init(seed, "init") {}

  std::vector<std::pair<std::string, uint64_t>> states() const {
    return {{"data", data.counter()},
            {"mask", mask.counter()},
            {"time", time.counter()},
            {"noise", noise.counter()},
            {"init", init.counter()}};
  }
};

}  // namespace asyncfm
