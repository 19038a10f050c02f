#include "exo/stats_util.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "exo/errors.hpp"

namespace exo::stats {

double mean(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean of empty vector");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty vector");
  const std::size_t n = v.size();
  const std::size_t mid = n / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double hi = v[mid];
  if (n % 2 == 1) return hi;
  std::nth_element(v.begin(), v.begin() + mid - 1, v.begin() + mid);
  return 0.5 * (v[mid - 1] + hi);
}

double pearson(const Eigen::VectorXd& x, const Eigen::VectorXd& y,
               bool zero_on_degenerate) {
  if (x.size() != y.size() || x.size() < 2) {
    throw DimensionMismatch("pearson: length mismatch or too short");
  }
  const Eigen::VectorXd xc = x.array() - x.mean();
  const Eigen::VectorXd yc = y.array() - y.mean();
  const double sx = xc.squaredNorm();
  const double sy = yc.squaredNorm();
  if (sx <= 0.0 || sy <= 0.0) {
    if (zero_on_degenerate) return 0.0;
    throw DegenerateSignal("pearson: zero-variance input");
  }
  return xc.dot(yc) / std::sqrt(sx * sy);
}

namespace {

// Series expansion, valid for x < a + 1.
double gamma_p_series(double a, double x) {
  const double gln = std::lgamma(a);
  double ap = a;
  double sum = 1.0 / a;
  double del = sum;
  for (int i = 0; i < 500; ++i) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * 1e-14) break;
  }
  return sum * std::exp(-x + a * std::log(x) - gln);
}

// Continued fraction for Q(a, x), valid for x >= a + 1.
double gamma_q_contfrac(double a, double x) {
  const double gln = std::lgamma(a);
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= 500; ++i) {
    const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-14) break;
  }
  return std::exp(-x + a * std::log(x) - gln) * h;
}

}  // namespace

double regularized_gamma_p(double a, double x) {
  if (a <= 0.0) throw std::invalid_argument("regularized_gamma_p: a <= 0");
  if (x <= 0.0) return 0.0;
  if (x < a + 1.0) return std::min(1.0, std::max(0.0, gamma_p_series(a, x)));
  return std::min(1.0, std::max(0.0, 1.0 - gamma_q_contfrac(a, x)));
}

double gamma_sf(double x, double shape, double scale) {
  if (x <= 0.0) return 1.0;
  return std::min(1.0, std::max(0.0, 1.0 - regularized_gamma_p(shape, x / scale)));
}

double kolmogorov_sf(double lambda) {
  if (lambda <= 0.0) return 1.0;
  if (lambda < 1.18) {
    // Dual theta-series form, accurate for small lambda where the direct
    // series alternates slowly.
    const double pi2 = 9.869604401089358;  // pi^2
    const double t = pi2 / (8.0 * lambda * lambda);
    const double cdf = std::sqrt(2.0 * 3.14159265358979323846) / lambda *
                       (std::exp(-t) + std::exp(-9.0 * t) + std::exp(-25.0 * t));
    return std::min(1.0, std::max(0.0, 1.0 - cdf));
  }
  const double e = std::exp(-2.0 * lambda * lambda);
  double sf = 0.0;
  double sign = 1.0;
  for (int k = 1; k <= 10; ++k) {
    const double term = std::pow(e, static_cast<double>(k) * k);
    sf += 2.0 * sign * term;
    if (term < 1e-16) break;
    sign = -sign;
  }
  return std::min(1.0, std::max(0.0, sf));
}

}  // namespace exo::stats
