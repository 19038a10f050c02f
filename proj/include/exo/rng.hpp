#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace exo {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives a decorrelated stream seed from a base seed and stable work-item
// indices. Every parallel work item gets its own seed this way, so results
// do not depend on scheduling.
inline std::uint64_t mix_seed(std::uint64_t base) { return splitmix64(base); }

template <typename... Rest>
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t next, Rest... rest) {
  return mix_seed(splitmix64(base ^ (next + 0x9e3779b97f4a7c15ULL)), rest...);
}

// mt19937_64 with hand-rolled output transforms. The std:: distributions are
// implementation-defined, so all sampling goes through this class to keep
// runs reproducible from the recorded seeds.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform on [0, 1).
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform index in [0, bound), rejection-sampled to avoid modulo bias.
  std::size_t index(std::size_t bound) {
    const std::uint64_t b = static_cast<std::uint64_t>(bound);
    const std::uint64_t span = (std::numeric_limits<std::uint64_t>::max() / b) * b;
    std::uint64_t r = gen_();
    while (r >= span) r = gen_();
    return static_cast<std::size_t>(r % b);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace exo
