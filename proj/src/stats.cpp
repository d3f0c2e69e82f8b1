#include "crt/stats.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "crt/error.hpp"

namespace crt::stats {
namespace {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t stream_key(std::uint64_t seed, std::uint64_t stream_id) {
  return splitmix64(seed ^ splitmix64(stream_id ^ 0xD1B54A32D192ED03ULL));
}

// Acklam's rational approximation, valid for p <= 0.5. Relative error of the
// raw approximation is about 1.2e-9; the Halley steps below take it to
// machine precision.
double icdf_lower_approx(double p) {
  static constexpr std::array<double, 6> a = {-3.969683028665376e+01, 2.209460984245205e+02,
                                              -2.759285104469687e+02, 1.383577518672690e+02,
                                              -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr std::array<double, 5> b = {-5.447609879822406e+01, 1.615858368580409e+02,
                                              -1.556989798598866e+02, 6.680131188771972e+01,
                                              -1.328068155288572e+01};
  static constexpr std::array<double, 6> c = {-7.784894002430293e-03, -3.223964580411365e-01,
                                              -2.400758277161838e+00, -2.549732539343734e+00,
                                              4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr std::array<double, 4> d = {7.784695709041462e-03, 3.224671290700398e-01,
                                              2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;

  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double q = p - 0.5;
  const double r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

double icdf_lower(double p) {
  double x = icdf_lower_approx(p);
  const double sqrt_2pi = std::sqrt(2.0 * std::numbers::pi);
  for (int step = 0; step < 2; ++step) {
    const double e = std_normal_cdf(x) - p;
    const double u = e * sqrt_2pi * std::exp(0.5 * x * x);
    x -= u / (1.0 + 0.5 * x * u);
  }
  return x;
}

// Modified Lentz evaluation of the incomplete beta continued fraction.
double beta_continued_fraction(double a, double b, double x) {
  constexpr int max_iter = 100000;
  constexpr double eps = 1e-16;
  constexpr double tiny = 1e-300;

  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= max_iter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < eps) return h;
  }
  throw NumericError("incomplete beta continued fraction did not converge");
}

double log_binomial_pmf(std::uint64_t i, std::uint64_t n, double p) {
  const double di = static_cast<double>(i);
  const double dn = static_cast<double>(n);
  return std::lgamma(dn + 1.0) - std::lgamma(di + 1.0) - std::lgamma(dn - di + 1.0) + di * std::log(p) +
         (dn - di) * std::log1p(-p);
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id), engine_(stream_key(seed, stream_id)) {}

double RngStream::uniform() {
  return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
}

std::uint64_t RngStream::uniform_index(std::uint64_t bound) {
  if (bound == 0) throw InvalidParameter("uniform_index: bound must be positive");
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const std::uint64_t r = engine_();
    if (r >= threshold) return r % bound;
  }
}

double RngStream::normal() {
  if (spare_) {
    const double z = *spare_;
    spare_.reset();
    return z;
  }
  double u = 0.0;
  double v = 0.0;
  double s = 0.0;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double m = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * m;
  return u * m;
}

ConfidenceSpec::ConfidenceSpec(double a) : alpha(a) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw InvalidParameter("alpha must lie in (0,1), got " + std::to_string(alpha));
  }
}

void add_gaussian(std::span<double> values, double sigma, RngStream& rng) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) {
    throw InvalidParameter("sigma must be finite and >= 0, got " + std::to_string(sigma));
  }
  for (double& v : values) {
    const double z = rng.normal();
    if (sigma != 0.0) v += sigma * z;
  }
}

Tensor sample_gaussian(const Shape& shape, double sigma, RngStream& rng) {
  if (shape.empty() || std::ranges::any_of(shape, [](std::size_t d) { return d == 0; })) {
    throw InvalidParameter("sample_gaussian: shape must be non-empty with positive dimensions, got " +
                           shape_string(shape));
  }
  Tensor out(shape, 0.0);
  add_gaussian(out.data(), sigma, rng);
  return out;
}

double std_normal_cdf(double x) {
  return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

double std_normal_icdf(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw DomainError("std_normal_icdf: p must lie in (0,1), got " + std::to_string(p));
  }
  // 1 - p is exact for p >= 0.5, which makes icdf(p) = -icdf(1 - p) hold bitwise.
  if (p > 0.5) return -icdf_lower(1.0 - p);
  return icdf_lower(p);
}

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw InvalidParameter("incomplete_beta: a and b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw DomainError("incomplete_beta: x must lie in [0,1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double clopper_pearson_lower(std::uint64_t k, std::uint64_t n, double alpha) {
  if (n == 0) throw InvalidParameter("clopper_pearson_lower: n must be >= 1");
  if (k > n) {
    throw InvalidParameter("clopper_pearson_lower: k=" + std::to_string(k) + " exceeds n=" + std::to_string(n));
  }
  const ConfidenceSpec spec(alpha);
  if (k == 0) return 0.0;
  if (k == n) return std::pow(spec.alpha, 1.0 / static_cast<double>(n));

  // The bound solves P(X >= k | p) = alpha, and P(X >= k | p) = I_p(k, n-k+1)
  // is increasing in p.
  const double a = static_cast<double>(k);
  const double b = static_cast<double>(n - k + 1);
  double lo = 0.0;
  double hi = 1.0;
  for (int iter = 0; iter < 200 && hi - lo > 1e-13; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (incomplete_beta(a, b, mid) < spec.alpha) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return lo;
}

double binomial_two_sided_pvalue(std::uint64_t k, std::uint64_t n, double p0) {
  if (k > n) {
    throw InvalidParameter("binomial_two_sided_pvalue: k=" + std::to_string(k) + " exceeds n=" +
                           std::to_string(n));
  }
  if (!(p0 >= 0.0 && p0 <= 1.0)) {
    throw InvalidParameter("binomial_two_sided_pvalue: p0 must lie in [0,1], got " + std::to_string(p0));
  }
  if (p0 == 0.0) return k == 0 ? 1.0 : 0.0;
  if (p0 == 1.0) return k == n ? 1.0 : 0.0;

  // Relative slack so that outcomes tied with the observation in exact
  // arithmetic are not lost to rounding in lgamma.
  const double cutoff = log_binomial_pmf(k, n, p0) + std::log1p(1e-7);
  double total = 0.0;
  for (std::uint64_t i = 0; i <= n; ++i) {
    const double lp = log_binomial_pmf(i, n, p0);
    if (lp <= cutoff) total += std::exp(lp);
  }
  return std::min(1.0, total);
}

}  // namespace crt::stats
