#pragma once
// ===== Deterministic random number generation =====
//
// All stochastic behaviour in the library flows through Rng so that a fixed
// seed reproduces runs bit-for-bit. The engine is std::mt19937_64, but every
// distribution transform is implemented here by hand: std:: distributions are
// implementation-defined and would tie outputs to a particular libstdc++.
//
// Per-sample streams are derived with splitmix64 from (seed, epoch, index),
// so augmentation draws for one sample never depend on batch composition or
// iteration order.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace ripeloc {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  // Decorrelated stream for sample `index` in `epoch` under a run seed.
  static Rng for_sample(uint64_t seed, uint64_t epoch, uint64_t index) {
    uint64_t s = splitmix64(seed ^ splitmix64(epoch + 0x517CC1B727220A95ULL));
    return Rng(splitmix64(s ^ splitmix64(index + 0x2545F4914F6CDD1DULL)));
  }

  uint64_t bits() { return eng_(); }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  // Uniform integer in [0, n), n >= 1.
  int uniform_int(int n) { return int(eng_() % uint64_t(n)); }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; the paired deviate is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mu, double sd) { return mu + sd * normal(); }

  // Marsaglia-Tsang gamma sampler.
  double gamma(double a) {
    if (a < 1.0) {
      double u = 1.0 - uniform();  // avoid 0
      return gamma(a + 1.0) * std::pow(u, 1.0 / a);
    }
    const double d = a - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      double u = 1.0 - uniform();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
    }
  }

  double beta(double a, double b) {
    double x = gamma(a), y = gamma(b);
    return x / (x + y);
  }

  // Fisher-Yates with our own uniform_int, for cross-platform determinism.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int i = int(v.size()) - 1; i > 0; --i) {
      int j = uniform_int(i + 1);
      std::swap(v[size_t(i)], v[size_t(j)]);
    }
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ripeloc
