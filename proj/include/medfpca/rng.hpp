#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include <Eigen/Core>

namespace medfpca {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

// Derive a child seed from (master seed, purpose string, index). All
// randomness in the library flows through named derivations of a single
// master seed, so concurrent work units own independent streams.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose,
                                 std::uint64_t index = 0) {
  std::uint64_t h = detail::fnv1a(purpose);
  h = detail::splitmix64(h ^ detail::splitmix64(seed));
  return detail::splitmix64(h ^ detail::splitmix64(index + 0x6a09e667f3bcc909ULL));
}

// A seeded generator stream with the handful of scalar draws the samplers use.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : eng_(seed), base_(seed) {}

  RngStream derived(std::string_view purpose, std::uint64_t index = 0) const {
    return RngStream(derive_seed(base_, purpose, index));
  }

  double uniform() { return unif_(eng_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * unif_(eng_); }
  double normal() { return norm_(eng_); }
  double normal(double mean, double sd) { return mean + sd * norm_(eng_); }

  // Gamma with shape/rate parameterization.
  double gamma(double shape, double rate) {
    std::gamma_distribution<double> d(shape, 1.0 / rate);
    return d(eng_);
  }

  int poisson(double mean) {
    std::poisson_distribution<int> d(mean);
    return d(eng_);
  }

  Eigen::VectorXd normal_vector(Eigen::Index n) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = norm_(eng_);
    return v;
  }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
  std::uint64_t base_ = 0;
  std::normal_distribution<double> norm_{0.0, 1.0};
  std::uniform_real_distribution<double> unif_{0.0, 1.0};
};

}  // namespace medfpca
