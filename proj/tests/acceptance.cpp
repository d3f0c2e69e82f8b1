// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "crt/checkpoint.hpp"
#include "crt/cli.hpp"
#include "crt/data.hpp"
#include "crt/io.hpp"
#include "crt/metrics.hpp"
#include "crt/nn.hpp"
#include "crt/smoothing.hpp"
#include "crt/stats.hpp"
#include "crt/train.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "tmpdir.hpp"

using namespace crt;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const char* title, const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!o.pass) ++failures;
  std::printf("%s criterion %2d %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", id, title, o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double binomial_se(double p, double n) { return std::sqrt(p * (1.0 - p) / n); }

int crt_main(std::vector<std::string> args) {
  args.insert(args.begin(), "crt");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  return cli::run(static_cast<int>(args.size()), argv.data());
}

// ---------------------------------------------------------------------------

Outcome radius_formula() {
  const double r = smoothing::radius_from_probs(0.9, 0.05, 0.25);
  const double oracle_r =
      static_cast<double>(0.125L * (oracle::normal_icdf(0.9L) - oracle::normal_icdf(0.05L)));
  bool ok = std::fabs(r - 0.365801) <= 1e-5 && std::fabs(r - oracle_r) <= 1e-5;
  for (double p : {0.01, 0.2, 0.5, 0.7, 0.999}) {
    for (double s : {0.12, 0.25, 1.0}) ok = ok && smoothing::radius_from_probs(p, p, s) == 0.0;
  }
  double worst_linearity = 0.0;
  for (auto [pa, pb] : {std::pair{0.9, 0.05}, {0.6, 0.3}, {0.999, 0.0005}, {0.51, 0.49}}) {
    const double unit = smoothing::radius_from_probs(pa, pb, 1.0);
    for (double s : {0.12, 0.25, 0.5, 1.0, 2.0}) {
      worst_linearity = std::max(worst_linearity, std::fabs(smoothing::radius_from_probs(pa, pb, s) - s * unit));
    }
  }
  ok = ok && worst_linearity <= 1e-12;
  return {ok, fmt("radius=%.7f oracle=%.7f target 0.365801+-1e-5, equal probs give 0, linearity err %.1e", r, oracle_r,
                  worst_linearity)};
}

Outcome linear_oracle_soundness() {
  constexpr std::size_t kInputs = 1000;
  constexpr std::size_t kDim = 4;
  constexpr double kSigma = 0.25;
  smoothing::SmoothingParams params;
  params.sigma = kSigma;
  params.n0 = 100;
  params.n = 100000;
  params.alpha = 0.001;

  stats::RngStream gen(2024, 0);
  std::vector<double> w(kDim);
  for (auto& v : w) v = gen.normal();
  const double b = gen.normal();
  double norm = 0.0;
  for (double v : w) norm += v * v;
  norm = std::sqrt(norm);
  const nn::Model model = smoothing::make_linear_binary_model(w, b);

  std::size_t certified = 0, unsound = 0;
  double sum_certified = 0.0, sum_exact = 0.0;
  for (std::size_t i = 0; i < kInputs; ++i) {
    // Place x at a chosen signed distance (up to 2 sigma) from the boundary.
    std::vector<double> x(kDim);
    for (auto& v : x) v = gen.uniform();
    double margin = b;
    for (std::size_t j = 0; j < kDim; ++j) margin += w[j] * x[j];
    const double target = (gen.uniform() < 0.5 ? -1.0 : 1.0) * 2.0 * kSigma * gen.uniform();
    for (std::size_t j = 0; j < kDim; ++j) x[j] += (target - margin / norm) * w[j] / norm;
    double m = b;
    for (std::size_t j = 0; j < kDim; ++j) m += w[j] * x[j];
    const double exact = std::fabs(m) / norm;
    const int label = m > 0.0 ? 1 : 0;

    stats::RngStream rng(7, i);
    const auto rec = smoothing::certify(model, Tensor({kDim}, x), label, params, rng, i);
    sum_exact += exact;
    if (rec.abstained()) continue;
    ++certified;
    if (rec.prediction != label || rec.radius > exact) ++unsound;
    if (rec.correct) sum_certified += rec.radius;
  }
  const double frac = certified ? static_cast<double>(unsound) / static_cast<double>(certified) : 0.0;
  const double limit = 0.001 + 3.0 * binomial_se(0.001, static_cast<double>(certified));
  const double mean_cert = sum_certified / kInputs;
  const double mean_exact = sum_exact / kInputs;
  const bool ok = certified > 0 && frac <= limit && mean_cert >= 0.8 * mean_exact;
  return {ok, fmt("%zu/%zu certified, over-radius fraction %.5f (limit %.5f), mean radius %.4f vs analytic %.4f "
                  "(ratio %.3f, need >= 0.8)",
                  certified, kInputs, frac, limit, mean_cert, mean_exact, mean_exact > 0 ? mean_cert / mean_exact : 0.0)};
}

Outcome clopper_pearson_coverage() {
  constexpr std::size_t kTrials = 10000;
  bool ok = true;
  double worst_margin = 1.0;
  std::string worst;
  std::uint64_t stream = 0;
  for (std::uint64_t n : {100u, 1000u}) {
    for (double p : {0.6, 0.9, 0.99}) {
      // One set of simulated counts per (n, p), shared by both alphas.
      stats::RngStream rng(99, stream++);
      std::vector<std::uint64_t> ks(kTrials);
      for (auto& k : ks) {
        k = 0;
        for (std::uint64_t t = 0; t < n; ++t) k += rng.uniform() < p ? 1 : 0;
      }
      for (double alpha : {0.05, 0.001}) {
        std::size_t covered = 0;
        for (auto k : ks) covered += stats::clopper_pearson_lower(k, n, alpha) <= p ? 1 : 0;
        const double coverage = static_cast<double>(covered) / kTrials;
        const double need = 1.0 - alpha - 3.0 * binomial_se(alpha, kTrials);
        if (coverage < need) ok = false;
        if (coverage - need < worst_margin) {
          worst_margin = coverage - need;
          worst = fmt("n=%llu p=%.2f alpha=%.3f coverage %.4f >= %.4f", static_cast<unsigned long long>(n), p, alpha,
                      coverage, need);
        }
      }
    }
  }
  return {ok, "12 settings, tightest: " + worst};
}

Outcome gradient_check() {
  double worst = 0.0;
  std::string where;
  std::size_t checked = 0, skipped = 0;
  for (const auto& arch : nn::preset_names()) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      nn::Model m = nn::make_preset(arch, {16}, 3);
      stats::RngStream init(seed, 0);
      m.init_parameters(init);
      stats::RngStream draw(seed, 1);
      Tensor x({4, 16});
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = draw.uniform();
      std::vector<std::uint32_t> y(4);
      for (auto& v : y) v = static_cast<std::uint32_t>(draw.uniform_index(3));
      const auto r = gradcheck::check(m, x, y);
      checked += r.checked;
      skipped += r.skipped;
      if (r.max_rel_error >= worst) {
        worst = r.max_rel_error;
        where = arch + " seed " + std::to_string(seed) + " " + r.worst;
      }
    }
  }
  const bool ok = worst <= 1e-6 && skipped * 100 <= checked;
  return {ok, fmt("%zu presets x 3 seeds, %zu coordinates (%zu at kinks skipped), max rel err %.2e at %s",
                  nn::preset_names().size(), checked, skipped, worst, where.c_str())};
}

Outcome bound_gap_property() {
  constexpr std::size_t kPairs = 100000;
  stats::RngStream rng(5, 0);
  std::size_t violations = 0, mismatched = 0;
  for (std::size_t i = 0; i < kPairs; ++i) {
    const std::size_t k = 2 + rng.uniform_index(9);
    // Logit scales up to 800 drive some probabilities to exactly 0 or 1.
    const double st = std::pow(10.0, -1.0 + 3.9 * rng.uniform());
    const double ss = std::pow(10.0, -1.0 + 3.9 * rng.uniform());
    std::vector<double> zt(k), zs(k);
    for (auto& v : zt) v = st * rng.normal();
    for (auto& v : zs) v = ss * rng.normal();
    const auto t = nn::softmax(zt);
    const auto s = nn::softmax(zs);
    const std::size_t y = rng.uniform_index(k);
    const auto g = train::lower_bound_gap(t, s, y);
    if (!(g.lhs >= g.rhs)) ++violations;
    if (g.lhs != s.probs[y] || g.rhs != -(t.probs[y] - s.probs[y])) ++mismatched;
  }
  return {violations == 0 && mismatched == 0,
          fmt("%zu pairs, %zu violations, %zu sides differing from their definition", kPairs, violations, mismatched)};
}

// ---------------------------------------------------------------------------
// Desk-scale experiment shared by criteria 6, 7, 8 and 10

struct DeskRun {
  data::Dataset train_set, test_set;
  train::NoiseConfig noise;
  nn::TrainConfig config;
  smoothing::SmoothingParams params;
  nn::Checkpoint teacher;
  std::vector<smoothing::CertificationRecord> teacher_records;
  double teacher_acr = 0.0;
  std::vector<train::EpochTiming> crt_timing_large, crt_timing_cnn;
  double acr_large = 0.0, acr_cnn = 0.0;
};

std::vector<smoothing::CertificationRecord> certify_all(const nn::Model& model, const DeskRun& run) {
  std::vector<smoothing::CertificationRecord> out;
  smoothing::DatasetCertification job;
  job.seed = 0;
  smoothing::certify_dataset(model, run.test_set, run.params, job, [&](const auto& r) { out.push_back(r); });
  return out;
}

DeskRun& desk() {
  static DeskRun run = [] {
    DeskRun r;
    r.train_set = data::synth_blobs(3, 16, 500, 0.1, 1);
    r.test_set = data::synth_blobs(3, 16, 200, 0.1, 2);
    r.noise.sigma = 0.25;
    r.params.sigma = 0.25;
    r.params.n0 = 100;
    r.params.n = 10000;
    r.params.alpha = 0.001;
    auto teacher = train::train_gaussian_aug("small-mlp", r.train_set, r.config, r.noise);
    r.teacher.model = std::move(teacher.model);
    r.teacher.meta.sigma = r.noise.sigma;
    r.teacher.meta.method = std::string(train::kMethodGaussianAug);
    r.teacher_records = certify_all(r.teacher.model, r);
    r.teacher_acr = metrics::acr(r.teacher_records);
    return r;
  }();
  return run;
}

Outcome transfer_experiment() {
  auto& r = desk();
  const auto large = train::crt_transfer(r.teacher.model, "large-mlp", r.train_set, r.config, r.noise);
  const auto cnn = train::crt_transfer(r.teacher.model, "small-cnn", r.train_set, r.config, r.noise);
  r.crt_timing_large = large.timings;
  r.crt_timing_cnn = cnn.timings;
  r.acr_large = metrics::acr(certify_all(large.model, r));
  r.acr_cnn = metrics::acr(certify_all(cnn.model, r));
  const bool ok = r.teacher_acr > 0.0 && r.acr_large >= 0.9 * r.teacher_acr && r.acr_cnn >= 0.9 * r.teacher_acr;
  return {ok, fmt("teacher small-mlp ACR %.4f; large-mlp %.4f (%.3fx), small-cnn %.4f (%.3fx), need >= 0.90x",
                  r.teacher_acr, r.acr_large, r.acr_large / r.teacher_acr, r.acr_cnn, r.acr_cnn / r.teacher_acr)};
}

Outcome chain_experiment() {
  auto& r = desk();
  std::vector<train::ChainLink> links;
  for (const char* arch : {"large-mlp", "small-cnn", "large-mlp"}) links.push_back({arch, r.config});
  const auto steps = train::run_chain(links, r.teacher, r.train_set, r.noise);
  const auto& last = steps.back().checkpoint;
  const double a = metrics::acr(certify_all(last.model, r));
  const bool ok = last.meta.chain_length == 3 && a >= 0.85 * r.teacher_acr;
  return {ok, fmt("chain large-mlp -> small-cnn -> large-mlp, length %u, final ACR %.4f vs teacher %.4f (%.3fx, need "
                  ">= 0.85x)",
                  last.meta.chain_length, a, r.teacher_acr, a / r.teacher_acr)};
}

Outcome timing_bookkeeping() {
  auto& r = desk();
  if (r.crt_timing_large.empty() || r.crt_timing_cnn.empty()) return {false, "transfer runs missing"};
  const auto mean = [](const std::vector<train::EpochTiming>& t) { return metrics::summarize_timings(t).mean_epoch_seconds; };
  bool ok = true;
  std::string detail;
  for (const auto& [arch, crt_t] : {std::pair{"large-mlp", &r.crt_timing_large}, {"small-cnn", &r.crt_timing_cnn}}) {
    const double std_s = mean(train::train_standard(arch, r.train_set, r.config).timings);
    const double aug_s = mean(train::train_gaussian_aug(arch, r.train_set, r.config, r.noise).timings);
    const double crt_ratio = mean(*crt_t) / std_s;
    const double aug_ratio = aug_s / std_s;
    ok = ok && crt_ratio <= 2.5 && aug_ratio <= 1.3;
    detail += fmt("%s crt/std %.2f aug/std %.2f; ", arch, crt_ratio, aug_ratio);
  }
  const double speedup = metrics::speedup_factor(45.21, 4.80);
  const std::vector<double> base = {45.21, 35.60, 15.39}, cand = {4.80, 3.46, 3.44};
  const double savings = 100.0 * metrics::cumulative_savings(base, cand);
  const double savings_total = 100.0 * metrics::cumulative_savings(std::vector{96.21}, std::vector{11.70});
  ok = ok && std::fabs(speedup - 9.42) <= 0.01 && std::fabs(savings - 87.84) <= 0.01 &&
       std::fabs(savings_total - 87.84) <= 0.01;
  detail += fmt("speedup %.4f (9.42+-0.01), savings %.3f%% per-row / %.3f%% from totals (87.84+-0.01)", speedup, savings,
                savings_total);
  return {ok, detail};
}

Outcome determinism_and_formats() {
  const fs::path root = testing_tmp::fresh_dir("acceptance_determinism");
  const std::vector<std::string> common = {"--method", "gaussian-aug", "--epochs", "5", "--train-per-class", "60",
                                           "--test-per-class", "15", "--deterministic"};
  const auto with = [&](std::vector<std::string> extra) {
    std::vector<std::string> a = common;
    a.insert(a.end(), extra.begin(), extra.end());
    return a;
  };
  std::vector<std::string> args_a = with({"--output-dir", (root / "a").string()});
  args_a.insert(args_a.begin(), "train");
  std::vector<std::string> args_b = with({"--output-dir", (root / "b").string()});
  args_b.insert(args_b.begin(), "train");
  if (crt_main(args_a) != 0 || crt_main(args_b) != 0) return {false, "train command failed"};
  const bool same_ckpt = io::read_file(root / "a" / "model.ckpt") == io::read_file(root / "b" / "model.ckpt");

  const auto certify = [&](const fs::path& out) {
    std::vector<std::string> a = with({"--checkpoint", (root / "a" / "model.ckpt").string(), "--n", "2000", "--out",
                                       out.string(), "--output-dir", root.string()});
    a.insert(a.begin(), "certify");
    return crt_main(a);
  };
  if (certify(root / "c1.csv") != 0 || certify(root / "c2.csv") != 0) return {false, "certify command failed"};
  const std::string full = io::read_file(root / "c1.csv");
  const bool same_csv = full == io::read_file(root / "c2.csv");
  const bool header = full.substr(0, full.find('\n')) == "idx,label,predict,radius,correct,time_s";

  // Interrupt after 17 complete rows plus a torn one, then resume.
  std::size_t cut = 0;
  for (int line = 0; line < 18; ++line) cut = full.find('\n', cut) + 1;
  const std::string torn = full.substr(0, cut) + full.substr(cut, 7);
  io::write_file_atomic(root / "c3.csv.partial", torn);
  if (certify(root / "c3.csv") != 0) return {false, "resumed certify failed"};
  const auto resumed = smoothing::parse_records_csv(io::read_file(root / "c3.csv"));
  const auto expected = smoothing::parse_records_csv(full);
  bool sequence = resumed.size() == expected.size();
  for (std::size_t i = 0; sequence && i < resumed.size(); ++i) sequence = resumed[i].input_index == i;
  const bool same_resume = io::read_file(root / "c3.csv") == full;
  const bool ok = same_ckpt && same_csv && header && sequence && same_resume;
  return {ok, fmt("checkpoints identical %d, CSVs identical %d, header exact %d, resumed %zu rows after 17 (expected "
                  "%zu, no gaps or repeats %d, byte-identical %d)",
                  same_ckpt, same_csv, header, resumed.size(), expected.size(), sequence, same_resume)};
}

Outcome metric_fixtures() {
  using smoothing::CertificationRecord;
  const auto rec = [](double radius, bool correct, int prediction) {
    CertificationRecord r;
    r.prediction = prediction;
    r.true_label = 0;
    r.radius = radius;
    r.correct = correct;
    return r;
  };
  const CertificationRecord abstain = rec(0.0, false, smoothing::kAbstain);
  const std::vector<CertificationRecord> mix = {rec(0.5, true, 0), rec(0.25, true, 0), rec(0.0, true, 0), abstain};
  const std::vector<CertificationRecord> counting = {rec(0.5, true, 0), rec(0.25, true, 0), rec(0.1, true, 0), abstain};
  const std::vector<CertificationRecord> none(5, abstain);
  bool ok = metrics::acr(mix) == 0.1875 && metrics::certified_accuracy_at(counting, 0.25) == 0.5 &&
            metrics::acr(none) == 0.0;
  for (double r : {0.0, 0.25, 1.0}) ok = ok && metrics::certified_accuracy_at(none, r) == 0.0;

  // At r = 0 certified accuracy is the smoothed classifier's clean accuracy.
  const auto& records = desk().teacher_records;
  const auto hits = std::count_if(records.begin(), records.end(),
                                  [](const auto& r) { return r.prediction == r.true_label; });
  const double clean = static_cast<double>(hits) / static_cast<double>(records.size());
  const double at0 = metrics::certified_accuracy_at(records, 0.0);
  ok = ok && at0 == clean;
  return {ok, fmt("acr fixture %.4f (0.1875), all-abstain 0, accuracy at r=0 %.4f equals clean accuracy %.4f over %zu "
                  "inputs",
                  metrics::acr(mix), at0, clean, records.size())};
}

}  // namespace

int main() {
  report(1, "radius formula", radius_formula);
  report(2, "linear classifier soundness", linear_oracle_soundness);
  report(3, "Clopper-Pearson coverage", clopper_pearson_coverage);
  report(4, "gradient correctness", gradient_check);
  report(5, "lower bound gap", bound_gap_property);
  report(6, "transfer to larger students", transfer_experiment);
  report(7, "three-link chain", chain_experiment);
  report(8, "timing bookkeeping", timing_bookkeeping);
  report(9, "determinism and formats", determinism_and_formats);
  report(10, "metric definitions", metric_fixtures);
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
