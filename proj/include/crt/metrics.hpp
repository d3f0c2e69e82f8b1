#pragma once

#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "crt/smoothing.hpp"
#include "crt/train.hpp"

namespace crt::metrics {

using smoothing::CertificationRecord;

/// Fraction of records that are correct with radius >= r. Abstentions and
/// misclassifications fail at every r.
double certified_accuracy_at(std::span<const CertificationRecord> records, double r);

/// Average certified radius: mean over all records of (radius if correct else 0).
double acr(std::span<const CertificationRecord> records);

/// baseline / candidate.
double speedup_factor(double baseline_total_seconds, double candidate_total_seconds);

/// 1 - sum(candidate) / sum(baseline).
double cumulative_savings(std::span<const double> baseline_totals, std::span<const double> candidate_totals);

struct TimingSummary {
  std::size_t epochs = 0;
  double total_seconds = 0.0;
  double mean_epoch_seconds = 0.0;
  double ci_half_width = 0.0;  // 95% normal-approximation half-width
  bool degenerate = true;      // fewer than two epochs: no variance estimate

  friend bool operator==(const TimingSummary&, const TimingSummary&) = default;
};

TimingSummary summarize_timings(std::span<const train::EpochTiming> timings);

struct ReportMeta {
  std::string name;
  std::string method_tag;
  double sigma = 0.0;
  double radius_step = 0.25;
  bool sigma_mismatch = false;
};

struct MetricsReport {
  std::string name;
  std::string method_tag;
  double sigma = 0.0;
  std::size_t num_records = 0;
  double acr = 0.0;
  double clean_accuracy = 0.0;
  double abstain_rate = 0.0;
  double radius_step = 0.25;
  std::vector<std::pair<double, double>> curve;  // (radius, certified accuracy)
  TimingSummary timing;
  bool sigma_mismatch = false;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// The curve runs over multiples of the radius step, from 0 up to the last
/// grid point whose certified accuracy is non-zero (always including 0).
MetricsReport build_report(std::span<const CertificationRecord> records, std::span<const train::EpochTiming> timings,
                           const ReportMeta& meta);

/// Human-readable table: accuracies in percent (2 decimals), ACR (3 decimals),
/// total training hours and mean epoch seconds with their 95% half-width.
std::string format_table(std::span<const MetricsReport> reports);

// Machine-readable form: one "[report]" section per report followed by
// key=value lines in a fixed order (see docs/formats.md). Numbers use
// round-trip precision.
std::string to_structured(const MetricsReport& report);
std::vector<MetricsReport> parse_structured(std::string_view text);

struct Comparison {
  std::string baseline;
  std::string candidate;
  double speedup = 0.0;
  double savings = 0.0;  // 1 - candidate / baseline
};

std::string format_comparison(std::span<const Comparison> pairs, double cumulative_savings_fraction);

}  // namespace crt::metrics
