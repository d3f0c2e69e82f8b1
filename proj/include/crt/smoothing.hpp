#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "crt/data.hpp"
#include "crt/nn.hpp"
#include "crt/stats.hpp"

namespace crt::smoothing {

inline constexpr int kAbstain = -1;

struct SmoothingParams {
  double sigma = 0.25;
  std::size_t n0 = 100;        // selection samples
  std::size_t n = 100000;      // estimation samples
  double alpha = 0.001;
  std::size_t eval_batch = 1000;

  void validate() const;
};

struct CertificationRecord {
  std::size_t input_index = 0;
  int true_label = 0;
  int prediction = kAbstain;  // class index or kAbstain
  double radius = 0.0;
  bool correct = false;
  double wall_seconds = 0.0;

  bool abstained() const { return prediction == kAbstain; }
  friend bool operator==(const CertificationRecord&, const CertificationRecord&) = default;
};

/// Top-class votes of the base classifier under `num` Gaussian perturbations
/// of a single input `x` (sample shape, no batch dimension).
std::vector<std::uint64_t> class_counts(const nn::Model& model, const Tensor& x, double sigma, std::size_t num,
                                        std::size_t eval_batch, stats::RngStream& rng);

/// Abstaining prediction of the smoothed classifier from params.n samples:
/// the top class is returned only if a two-sided binomial test of top versus
/// runner-up counts rejects p = 1/2 at level alpha.
int predict_smoothed(const nn::Model& model, const Tensor& x, const SmoothingParams& params, stats::RngStream& rng);

/// Two-phase certification. n0 samples select the candidate class, n fresh
/// samples bound its probability from below with a Clopper-Pearson bound p_lo;
/// the certified radius is sigma * PhiInv(p_lo), or an abstention when
/// p_lo <= 1/2.
CertificationRecord certify(const nn::Model& model, const Tensor& x, int true_label, const SmoothingParams& params,
                            stats::RngStream& rng, std::size_t input_index = 0);

/// (sigma / 2) * (PhiInv(p_a) - PhiInv(p_b)) when p_a >= p_b, else 0.
double radius_from_probs(double p_a, double p_b, double sigma);

struct LinearOracleResult {
  double smoothed_prob = 0.0;  // probability of the positive side under noise
  double exact_radius = 0.0;   // distance to the decision boundary
};

/// Closed form for the binary linear classifier sign(w.x + b) smoothed with
/// N(0, sigma^2 I).
LinearOracleResult analytic_linear_oracle(std::span<const double> w, double b, std::span<const double> x, double sigma);

/// Two-class "linear" preset whose logit difference (class 1 minus class 0)
/// is w.x + b.
nn::Model make_linear_binary_model(std::span<const double> w, double b);

struct DatasetCertification {
  std::uint64_t seed = 0;
  std::size_t stride = 1;       // certify inputs 0, stride, 2*stride, ...
  std::size_t workers = 1;
  std::optional<std::size_t> resume_after;  // skip inputs with index <= this
  bool record_time = true;      // false reports wall_seconds = 0
};

/// Certifies a dataset. Input i uses RngStream(seed, i), so records are
/// independent of the worker count; `emit` sees them in index order.
void certify_dataset(const nn::Model& model, const data::Dataset& data, const SmoothingParams& params,
                     const DatasetCertification& job, const std::function<void(const CertificationRecord&)>& emit);

// ---------------------------------------------------------------------------
// Records CSV
// ---------------------------------------------------------------------------

inline constexpr std::string_view kRecordsHeader = "idx,label,predict,radius,correct,time_s";

std::string format_record(const CertificationRecord& record);
/// Parses a full records file. Throws FormatError naming the offending line.
std::vector<CertificationRecord> parse_records_csv(std::string_view text);

/// The longest prefix of `text` made of the header and complete, well-formed
/// rows; used to resume an interrupted run.
struct RecordsPrefix {
  std::string text;
  std::vector<CertificationRecord> records;
};
RecordsPrefix complete_records_prefix(std::string_view text);

}  // namespace crt::smoothing
