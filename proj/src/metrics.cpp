#include "crt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

#include "crt/error.hpp"
#include "crt/io.hpp"

namespace crt::metrics {
namespace {

void require_records(std::span<const CertificationRecord> records, const char* who) {
  if (records.empty()) throw InvalidParameter(std::string(who) + ": no certification records");
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

std::string pad(std::string s, std::size_t width, bool left = false) {
  if (s.size() >= width) return s;
  return left ? s + std::string(width - s.size(), ' ') : std::string(width - s.size(), ' ') + s;
}

}  // namespace

double certified_accuracy_at(std::span<const CertificationRecord> records, double r) {
  require_records(records, "certified_accuracy_at");
  if (!(r >= 0.0)) throw InvalidParameter("certified_accuracy_at: radius must be >= 0");
  const auto hits = std::count_if(records.begin(), records.end(),
                                  [r](const CertificationRecord& rec) { return rec.correct && rec.radius >= r; });
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

double acr(std::span<const CertificationRecord> records) {
  require_records(records, "acr");
  double total = 0.0;
  for (const auto& rec : records) total += rec.correct ? rec.radius : 0.0;
  return total / static_cast<double>(records.size());
}

double speedup_factor(double baseline_total_seconds, double candidate_total_seconds) {
  if (!(baseline_total_seconds > 0.0) || !(candidate_total_seconds > 0.0)) {
    throw InvalidParameter("speedup_factor: both totals must be positive");
  }
  return baseline_total_seconds / candidate_total_seconds;
}

double cumulative_savings(std::span<const double> baseline_totals, std::span<const double> candidate_totals) {
  const double base = std::accumulate(baseline_totals.begin(), baseline_totals.end(), 0.0);
  const double cand = std::accumulate(candidate_totals.begin(), candidate_totals.end(), 0.0);
  if (!(base > 0.0) || !(cand >= 0.0)) throw InvalidParameter("cumulative_savings: totals must be positive");
  return 1.0 - cand / base;
}

TimingSummary summarize_timings(std::span<const train::EpochTiming> timings) {
  TimingSummary s;
  s.epochs = timings.size();
  for (const auto& t : timings) s.total_seconds += t.wall_seconds;
  if (timings.empty()) return s;
  s.mean_epoch_seconds = s.total_seconds / static_cast<double>(timings.size());
  if (timings.size() < 2) return s;
  double ss = 0.0;
  for (const auto& t : timings) ss += (t.wall_seconds - s.mean_epoch_seconds) * (t.wall_seconds - s.mean_epoch_seconds);
  const double sd = std::sqrt(ss / static_cast<double>(timings.size() - 1));
  s.ci_half_width = 1.96 * sd / std::sqrt(static_cast<double>(timings.size()));
  s.degenerate = false;
  return s;
}

MetricsReport build_report(std::span<const CertificationRecord> records, std::span<const train::EpochTiming> timings,
                           const ReportMeta& meta) {
  require_records(records, "build_report");
  if (!(meta.radius_step > 0.0)) throw InvalidParameter("build_report: radius step must be > 0");
  MetricsReport rep;
  rep.name = meta.name;
  rep.method_tag = meta.method_tag;
  rep.sigma = meta.sigma;
  rep.radius_step = meta.radius_step;
  rep.sigma_mismatch = meta.sigma_mismatch;
  rep.num_records = records.size();
  rep.acr = acr(records);
  rep.clean_accuracy = certified_accuracy_at(records, 0.0);
  rep.abstain_rate = static_cast<double>(std::count_if(records.begin(), records.end(),
                                                       [](const auto& r) { return r.abstained(); })) /
                     static_cast<double>(records.size());
  rep.curve.emplace_back(0.0, rep.clean_accuracy);
  for (std::size_t j = 1;; ++j) {
    const double r = static_cast<double>(j) * meta.radius_step;
    const double a = certified_accuracy_at(records, r);
    if (a <= 0.0) break;
    rep.curve.emplace_back(r, a);
  }
  rep.timing = summarize_timings(timings);
  return rep;
}

std::string format_table(std::span<const MetricsReport> reports) {
  std::size_t columns = 1;
  double step = 0.25;
  for (const auto& r : reports) {
    columns = std::max(columns, r.curve.size());
    step = r.radius_step;
  }
  std::string out = pad("model", 20, true) + " " + pad("method", 14, true) + pad("sigma", 6);
  for (std::size_t j = 0; j < columns; ++j) out += pad(fixed(static_cast<double>(j) * step, 2), 8);
  out += pad("ACR", 8) + pad("abstain", 9) + pad("train_h", 10) + pad("epoch_s", 22) + "\n";
  for (const auto& r : reports) {
    out += pad(r.name, 20, true) + " " + pad(r.method_tag, 14, true) + " " + pad(fixed(r.sigma, 2), 5);
    for (std::size_t j = 0; j < columns; ++j) {
      const double acc = j < r.curve.size() ? r.curve[j].second : 0.0;
      out += pad(fixed(100.0 * acc, 2), 8);
    }
    out += pad(fixed(r.acr, 3), 8) + pad(fixed(100.0 * r.abstain_rate, 2), 9);
    if (r.timing.epochs == 0) {
      out += pad("-", 10) + pad("-", 22);
    } else {
      std::string epoch = fixed(r.timing.mean_epoch_seconds, 4) + " +/- " + fixed(r.timing.ci_half_width, 4);
      if (r.timing.degenerate) epoch += "*";
      out += pad(fixed(r.timing.total_seconds / 3600.0, 4), 10) + pad(epoch, 22);
    }
    if (r.sigma_mismatch) out += "  [sigma mismatch with teacher]";
    out += "\n";
  }
  if (std::any_of(reports.begin(), reports.end(), [](const auto& r) { return r.timing.epochs == 1; })) {
    out += "* single epoch: no interval estimate\n";
  }
  return out;
}

std::string to_structured(const MetricsReport& r) {
  std::string out = "[report]\n";
  const auto kv = [&](const char* key, const std::string& value) { out += std::string(key) + "=" + value + "\n"; };
  kv("name", r.name);
  kv("method", r.method_tag);
  kv("sigma", num(r.sigma));
  kv("num_records", std::to_string(r.num_records));
  kv("acr", num(r.acr));
  kv("clean_accuracy", num(r.clean_accuracy));
  kv("abstain_rate", num(r.abstain_rate));
  kv("radius_step", num(r.radius_step));
  std::string radii;
  std::string accs;
  for (std::size_t j = 0; j < r.curve.size(); ++j) {
    if (j) {
      radii += ",";
      accs += ",";
    }
    radii += num(r.curve[j].first);
    accs += num(r.curve[j].second);
  }
  kv("curve_radii", radii);
  kv("curve_accuracy", accs);
  kv("epochs", std::to_string(r.timing.epochs));
  kv("total_train_seconds", num(r.timing.total_seconds));
  kv("epoch_mean_seconds", num(r.timing.mean_epoch_seconds));
  kv("epoch_ci_half_width", num(r.timing.ci_half_width));
  kv("epoch_ci_degenerate", r.timing.degenerate ? "1" : "0");
  kv("sigma_mismatch", r.sigma_mismatch ? "1" : "0");
  return out;
}

std::vector<MetricsReport> parse_structured(std::string_view text) {
  std::vector<MetricsReport> out;
  std::vector<std::map<std::string, std::string>> sections;
  const auto lines = io::split(text, '\n');
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto line = io::trim(lines[i]);
    if (line.empty() || line.front() == '#') continue;
    if (line == "[report]") {
      sections.emplace_back();
      continue;
    }
    const auto eq = line.find('=');
    if (sections.empty() || eq == std::string_view::npos) {
      throw FormatError("report line " + std::to_string(i + 1) + ": expected key=value inside a [report] section");
    }
    sections.back()[std::string(line.substr(0, eq))] = std::string(line.substr(eq + 1));
  }
  for (auto& s : sections) {
    const auto get = [&](const char* key) -> const std::string& {
      auto it = s.find(key);
      if (it == s.end()) throw FormatError(std::string("report is missing key '") + key + "'");
      return it->second;
    };
    MetricsReport r;
    r.name = get("name");
    r.method_tag = get("method");
    r.sigma = io::parse_double(get("sigma"), "sigma");
    r.num_records = io::parse_uint(get("num_records"), "num_records");
    r.acr = io::parse_double(get("acr"), "acr");
    r.clean_accuracy = io::parse_double(get("clean_accuracy"), "clean_accuracy");
    r.abstain_rate = io::parse_double(get("abstain_rate"), "abstain_rate");
    r.radius_step = io::parse_double(get("radius_step"), "radius_step");
    const auto radii = io::split(get("curve_radii"), ',');
    const auto accs = io::split(get("curve_accuracy"), ',');
    if (radii.size() != accs.size()) throw FormatError("report curve_radii and curve_accuracy differ in length");
    for (std::size_t j = 0; j < radii.size(); ++j) {
      r.curve.emplace_back(io::parse_double(radii[j], "curve_radii"), io::parse_double(accs[j], "curve_accuracy"));
    }
    r.timing.epochs = io::parse_uint(get("epochs"), "epochs");
    r.timing.total_seconds = io::parse_double(get("total_train_seconds"), "total_train_seconds");
    r.timing.mean_epoch_seconds = io::parse_double(get("epoch_mean_seconds"), "epoch_mean_seconds");
    r.timing.ci_half_width = io::parse_double(get("epoch_ci_half_width"), "epoch_ci_half_width");
    r.timing.degenerate = get("epoch_ci_degenerate") == "1";
    r.sigma_mismatch = get("sigma_mismatch") == "1";
    out.push_back(std::move(r));
  }
  return out;
}

std::string format_comparison(std::span<const Comparison> pairs, double cumulative_savings_fraction) {
  std::string out = "comparison (baseline -> candidate)\n";
  for (const auto& c : pairs) {
    out += "  " + c.baseline + " -> " + c.candidate + ": speedup " + fixed(c.speedup, 2) + "x, savings " +
           fixed(100.0 * c.savings, 2) + "%\n";
  }
  out += "  cumulative savings: " + fixed(100.0 * cumulative_savings_fraction, 2) + "%\n";
  return out;
}

}  // namespace crt::metrics
