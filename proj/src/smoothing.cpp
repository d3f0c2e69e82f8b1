#include "crt/smoothing.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <thread>

#include "crt/error.hpp"
#include "crt/io.hpp"

namespace crt::smoothing {

void SmoothingParams::validate() const {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InvalidParameter("smoothing.sigma must be > 0");
  if (n0 < 1) throw InvalidParameter("smoothing.n0 must be >= 1");
  if (n < n0) throw InvalidParameter("smoothing.n must be >= n0");
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidParameter("smoothing.alpha must lie in (0,1)");
  if (eval_batch < 1) throw InvalidParameter("smoothing.eval_batch must be >= 1");
}

std::vector<std::uint64_t> class_counts(const nn::Model& model, const Tensor& x, double sigma, std::size_t num,
                                        std::size_t eval_batch, stats::RngStream& rng) {
  if (num < 1) throw InvalidParameter("class_counts: num must be >= 1");
  if (eval_batch < 1) throw InvalidParameter("class_counts: eval_batch must be >= 1");
  std::vector<std::uint64_t> counts(model.num_classes(), 0);
  const auto base = x.data();
  std::size_t remaining = num;
  while (remaining > 0) {
    const std::size_t b = std::min(eval_batch, remaining);
    Shape shape{b};
    shape.insert(shape.end(), x.shape().begin(), x.shape().end());
    Tensor batch(shape);
    for (std::size_t i = 0; i < b; ++i) std::copy(base.begin(), base.end(), batch.row(i).begin());
    stats::add_gaussian(batch.data(), sigma, rng);
    const Tensor logits = model.forward(batch);
    for (std::size_t i = 0; i < b; ++i) ++counts[nn::argmax(logits.row(i))];
    remaining -= b;
  }
  return counts;
}

int predict_smoothed(const nn::Model& model, const Tensor& x, const SmoothingParams& params, stats::RngStream& rng) {
  params.validate();
  const auto counts = class_counts(model, x, params.sigma, params.n, params.eval_batch, rng);
  std::size_t top = 0;
  for (std::size_t k = 1; k < counts.size(); ++k) {
    if (counts[k] > counts[top]) top = k;
  }
  std::uint64_t runner_up = 0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (k != top) runner_up = std::max(runner_up, counts[k]);
  }
  const double p = stats::binomial_two_sided_pvalue(counts[top], counts[top] + runner_up, 0.5);
  return p <= params.alpha ? static_cast<int>(top) : kAbstain;
}

CertificationRecord certify(const nn::Model& model, const Tensor& x, int true_label, const SmoothingParams& params,
                            stats::RngStream& rng, std::size_t input_index) {
  params.validate();
  const auto start = std::chrono::steady_clock::now();
  CertificationRecord rec;
  rec.input_index = input_index;
  rec.true_label = true_label;

  const auto selection = class_counts(model, x, params.sigma, params.n0, params.eval_batch, rng);
  std::size_t candidate = 0;
  for (std::size_t k = 1; k < selection.size(); ++k) {
    if (selection[k] > selection[candidate]) candidate = k;
  }
  const auto estimation = class_counts(model, x, params.sigma, params.n, params.eval_batch, rng);
  const double p_lo = stats::clopper_pearson_lower(estimation[candidate], params.n, params.alpha);
  if (p_lo > 0.5) {
    rec.prediction = static_cast<int>(candidate);
    rec.radius = params.sigma * stats::std_normal_icdf(p_lo);
    rec.correct = rec.prediction == true_label;
  }
  const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
  rec.wall_seconds = elapsed.count();
  return rec;
}

double radius_from_probs(double p_a, double p_b, double sigma) {
  if (!(p_a > 0.0 && p_a < 1.0) || !(p_b > 0.0 && p_b < 1.0)) {
    throw DomainError("radius_from_probs: probabilities must lie in (0,1)");
  }
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw DomainError("radius_from_probs: sigma must be >= 0");
  if (p_a < p_b) return 0.0;
  return 0.5 * sigma * (stats::std_normal_icdf(p_a) - stats::std_normal_icdf(p_b));
}

LinearOracleResult analytic_linear_oracle(std::span<const double> w, double b, std::span<const double> x,
                                          double sigma) {
  if (w.size() != x.size()) throw InvalidParameter("analytic_linear_oracle: w and x differ in length");
  if (!(sigma > 0.0)) throw InvalidParameter("analytic_linear_oracle: sigma must be > 0");
  double norm_sq = 0.0;
  double margin = b;
  for (std::size_t i = 0; i < w.size(); ++i) {
    norm_sq += w[i] * w[i];
    margin += w[i] * x[i];
  }
  if (!(norm_sq > 0.0)) throw InvalidParameter("analytic_linear_oracle: weight vector must be non-zero");
  const double norm = std::sqrt(norm_sq);
  return {stats::std_normal_cdf(margin / (sigma * norm)), std::fabs(margin) / norm};
}

nn::Model make_linear_binary_model(std::span<const double> w, double b) {
  nn::Model model = nn::make_preset("linear", {w.size()}, 2);
  Tensor& weight = model.param("0.weight");  // [d, 2]
  for (std::size_t i = 0; i < w.size(); ++i) {
    weight[i * 2] = 0.0;
    weight[i * 2 + 1] = w[i];
  }
  Tensor& bias = model.param("0.bias");
  bias[0] = 0.0;
  bias[1] = b;
  return model;
}

void certify_dataset(const nn::Model& model, const data::Dataset& data, const SmoothingParams& params,
                     const DatasetCertification& job, const std::function<void(const CertificationRecord&)>& emit) {
  params.validate();
  if (job.stride < 1) throw InvalidParameter("certification stride must be >= 1");
  std::vector<std::size_t> indices;
  for (std::size_t i = 0; i < data.size(); i += job.stride) {
    if (!job.resume_after || i > *job.resume_after) indices.push_back(i);
  }
  const std::size_t workers = std::max<std::size_t>(1, job.workers);
  const std::size_t block = workers * 4;

  for (std::size_t begin = 0; begin < indices.size(); begin += block) {
    const std::size_t end = std::min(indices.size(), begin + block);
    std::vector<CertificationRecord> results(end - begin);
    std::atomic<std::size_t> next{begin};
    std::exception_ptr failure;
    std::atomic<bool> failed{false};
    auto work = [&] {
      for (std::size_t pos = next++; pos < end; pos = next++) {
        try {
          const std::size_t idx = indices[pos];
          stats::RngStream rng(job.seed, idx);
          CertificationRecord r =
              certify(model, data.sample(idx), static_cast<int>(data.labels[idx]), params, rng, idx);
          if (!job.record_time) r.wall_seconds = 0.0;
          results[pos - begin] = r;
        } catch (...) {
          if (!failed.exchange(true)) failure = std::current_exception();
          return;
        }
      }
    };
    if (workers == 1) {
      work();
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work);
    }
    if (failure) std::rethrow_exception(failure);
    for (const auto& r : results) emit(r);
  }
}

std::string format_record(const CertificationRecord& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu,%d,%d,%.6f,%d,%.6f", r.input_index, r.true_label, r.prediction, r.radius,
                r.correct ? 1 : 0, r.wall_seconds);
  return buf;
}

namespace {

CertificationRecord parse_record(std::string_view line, const std::string& where) {
  const auto f = io::split(line, ',');
  if (f.size() != 6) throw FormatError(where + ": expected 6 fields, got " + std::to_string(f.size()));
  CertificationRecord r;
  r.input_index = io::parse_uint(f[0], where);
  r.true_label = static_cast<int>(io::parse_int(f[1], where));
  r.prediction = static_cast<int>(io::parse_int(f[2], where));
  r.radius = io::parse_double(f[3], where);
  const auto correct = io::parse_uint(f[4], where);
  r.wall_seconds = io::parse_double(f[5], where);
  if (correct > 1) throw FormatError(where + ": correct must be 0 or 1");
  r.correct = correct == 1;
  if (r.prediction < kAbstain) throw FormatError(where + ": predict must be a class index or -1");
  if (r.abstained() && (r.radius != 0.0 || r.correct)) {
    throw FormatError(where + ": abstained row must have radius 0 and correct 0");
  }
  if (r.correct && r.prediction != r.true_label) throw FormatError(where + ": correct row predicts the wrong label");
  if (!(r.radius >= 0.0)) throw FormatError(where + ": radius must be >= 0");
  return r;
}

}  // namespace

std::vector<CertificationRecord> parse_records_csv(std::string_view text) {
  const auto lines = io::split(text, '\n');
  if (lines.empty() || io::trim(lines[0]) != kRecordsHeader) {
    throw FormatError("records CSV line 1: expected header '" + std::string(kRecordsHeader) + "'");
  }
  std::vector<CertificationRecord> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto line = io::trim(lines[i]);
    if (line.empty()) continue;
    out.push_back(parse_record(line, "records CSV line " + std::to_string(i + 1)));
  }
  return out;
}

RecordsPrefix complete_records_prefix(std::string_view text) {
  RecordsPrefix prefix;
  prefix.text = std::string(kRecordsHeader) + "\n";
  const std::size_t header_end = text.find('\n');
  if (header_end == std::string_view::npos || io::trim(text.substr(0, header_end)) != kRecordsHeader) {
    return prefix;
  }
  std::size_t pos = header_end + 1;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) break;  // unterminated final row
    const std::string_view line = text.substr(pos, nl - pos);
    try {
      prefix.records.push_back(parse_record(io::trim(line), "partial row"));
    } catch (const FormatError&) {
      break;
    }
    prefix.text.append(line);
    prefix.text.push_back('\n');
    pos = nl + 1;
  }
  return prefix;
}

}  // namespace crt::smoothing
