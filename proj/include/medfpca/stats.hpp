#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "medfpca/errors.hpp"
#include "medfpca/rng.hpp"

namespace medfpca {

// Regularized lower incomplete gamma P(a, x), series + continued fraction.
inline double reg_lower_gamma(double a, double x) {
  if (x < 0.0 || a <= 0.0) throw DomainError("reg_lower_gamma: bad arguments");
  if (x == 0.0) return 0.0;
  const double gln = std::lgamma(a);
  if (x < a + 1.0) {
    // series representation
    double ap = a, sum = 1.0 / a, del = sum;
    for (int n = 0; n < 500; ++n) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - gln);
  }
  // continued fraction for Q(a,x)
  const double fpmin = 1e-300;
  double b = x + 1.0 - a, c = 1.0 / fpmin, d = 1.0 / b, h = d;
  for (int i = 1; i <= 500; ++i) {
    double an = -static_cast<double>(i) * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < fpmin) d = fpmin;
    c = b + an / c;
    if (std::abs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  double q = std::exp(-x + a * std::log(x) - gln) * h;
  return 1.0 - q;
}

// Gamma(shape, rate) CDF.
inline double gamma_cdf(double x, double shape, double rate) {
  if (x <= 0.0) return 0.0;
  return reg_lower_gamma(shape, rate * x);
}

// Draw from Gamma(shape, rate) restricted to [lo, hi]. Inverse CDF by
// bisection; rejection fallback when the interval mass underflows, and the
// clamped mode as a last resort.
inline double truncated_gamma(RngStream& rng, double shape, double rate,
                              double lo, double hi) {
  if (!(shape > 0.0) || !(rate > 0.0) || !(hi > lo))
    throw DomainError("truncated_gamma: bad arguments");
  lo = std::max(lo, 0.0);
  const double flo = gamma_cdf(lo, shape, rate);
  const double fhi = gamma_cdf(hi, shape, rate);
  const double mass = fhi - flo;
  if (mass > 1e-12) {
    const double u = flo + rng.uniform() * mass;
    double a = lo, b = hi;
    for (int it = 0; it < 200; ++it) {
      double mid = 0.5 * (a + b);
      if (gamma_cdf(mid, shape, rate) < u)
        a = mid;
      else
        b = mid;
      if (b - a < 1e-14 * std::max(1.0, b)) break;
    }
    return 0.5 * (a + b);
  }
  for (int it = 0; it < 200; ++it) {
    double x = rng.gamma(shape, rate);
    if (x >= lo && x <= hi) return x;
  }
  const double mode = shape >= 1.0 ? (shape - 1.0) / rate : 0.0;
  return std::clamp(mode, lo, hi);
}

// Quantile with linear interpolation between order statistics.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw DomainError("quantile: empty sample");
  if (q < 0.0 || q > 1.0) throw DomainError("quantile: q outside [0,1]");
  std::sort(v.begin(), v.end());
  const double idx = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(idx));
  const auto hi = static_cast<std::size_t>(std::ceil(idx));
  if (lo == hi) return v[lo];
  const double w = idx - static_cast<double>(lo);
  return (1.0 - w) * v[lo] + w * v[hi];
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double variance_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

// log density of Gamma(shape, rate) at x.
inline double gamma_logpdf(double x, double shape, double rate) {
  if (x <= 0.0) return -std::numeric_limits<double>::infinity();
  return shape * std::log(rate) - std::lgamma(shape) + (shape - 1.0) * std::log(x) -
         rate * x;
}

constexpr double kZ975 = 1.959963984540054;

}  // namespace medfpca
