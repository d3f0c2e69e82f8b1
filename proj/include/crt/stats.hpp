#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>

#include "crt/tensor.hpp"

namespace crt::stats {

/// Reproducible random stream keyed by (seed, stream_id).
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard, and every distribution on top of it is implemented here rather
/// than taken from <random>, whose distributions are implementation-defined.
/// Distinct stream ids are decorrelated by a splitmix64 finalizer before
/// seeding, so per-worker and per-input streams can be derived from one
/// experiment seed.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t stream_id = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform double on the open interval (0, 1).
  double uniform();
  /// Uniform integer in [0, bound).
  std::uint64_t uniform_index(std::uint64_t bound);
  /// Standard normal draw (Marsaglia polar method).
  double normal();

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::mt19937_64 engine_;
  std::optional<double> spare_;
};

struct ConfidenceSpec {
  double alpha;

  explicit ConfidenceSpec(double alpha);
};

/// I.i.d. N(0, sigma^2) draws in the given shape.
Tensor sample_gaussian(const Shape& shape, double sigma, RngStream& rng);

/// Adds i.i.d. N(0, sigma^2) noise in place; consumes the stream exactly like
/// sample_gaussian over the same element count.
void add_gaussian(std::span<double> values, double sigma, RngStream& rng);

double std_normal_cdf(double x);

/// Inverse of the standard normal CDF. Throws DomainError outside (0, 1).
double std_normal_icdf(double p);

/// Regularized incomplete beta function I_x(a, b).
double incomplete_beta(double a, double b, double x);

/// One-sided exact (Clopper-Pearson) lower confidence bound on a binomial
/// success probability after k successes in n trials.
double clopper_pearson_lower(std::uint64_t k, std::uint64_t n, double alpha);

/// Two-sided exact binomial test p-value for H0: success probability = p0.
/// Outcomes at most as likely as the observed one are summed.
double binomial_two_sided_pvalue(std::uint64_t k, std::uint64_t n, double p0);

}  // namespace crt::stats
