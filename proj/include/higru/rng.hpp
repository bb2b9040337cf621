#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace higru {

// Named sub-streams derived from one root seed. Adding a stream keeps the
// draws of existing streams unchanged, so reproducibility survives
// refactoring.
enum class RngUse : std::uint64_t {
  kParamInit = 0,
  kDropout = 1,
  kShuffle = 2,
  kEmbeddingInit = 3,
  kData = 4,
};

// Deterministic random stream. All draws go through next_u64() so results
// do not depend on the standard library's distribution implementations.
class RngStream {
 public:
  RngStream(std::uint64_t root_seed, RngUse use)
      : RngStream(root_seed, static_cast<std::uint64_t>(use)) {}

  RngStream(std::uint64_t root_seed, std::uint64_t stream_id)
      : gen_(split(root_seed, stream_id)) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  bool bernoulli(double p) { return uniform() < p; }

  std::size_t next_below(std::size_t n) {
    return static_cast<std::size_t>(next_u64() % n);
  }

  // Fisher-Yates; std::shuffle is implementation-defined, this is not.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[next_below(i)]);
    }
  }

 private:
  static std::uint64_t split(std::uint64_t root, std::uint64_t stream_id) {
    // splitmix64 finalizer over a counter-mixed seed
    std::uint64_t z = root + 0x9E3779B97F4A7C15ULL * (stream_id + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::mt19937_64 gen_;
};

}  // namespace higru
