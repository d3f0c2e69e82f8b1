#include "crt/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "crt/checkpoint.hpp"
#include "crt/config.hpp"
#include "crt/error.hpp"
#include "crt/io.hpp"
#include "crt/metrics.hpp"
#include "crt/smoothing.hpp"
#include "crt/train.hpp"

namespace crt::cli {
namespace {

namespace fs = std::filesystem;

/// Bad input detected before any work starts (exit 2).
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Runs `f`, reporting any failure other than a ConfigError as an input error
// about `what`.
template <class F>
auto input_step(const std::string& what, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const InputError&) {
    throw;
  } catch (const std::exception& e) {
    throw InputError(what + ": " + e.what());
  }
}

struct ConfigOptions {
  std::string config_path;
  std::vector<std::string> values;
  std::vector<CLI::Option*> options;
  bool deterministic = false;
};

void add_config_options(CLI::App* cmd, ConfigOptions& o) {
  cmd->add_option("--config", o.config_path, "experiment configuration file (a run manifest also works)");
  const auto schema = config_schema();
  o.values.resize(schema.size());
  o.options.assign(schema.size(), nullptr);
  for (std::size_t i = 0; i < schema.size(); ++i) {
    const auto& k = schema[i];
    if (k.flag.empty()) continue;
    const std::string help = std::string(k.help) + " [" + std::string(k.section) + "." + std::string(k.key) + "]";
    if (k.key == "deterministic") {
      o.options[i] = cmd->add_flag("--" + std::string(k.flag), o.deterministic, help);
    } else {
      o.options[i] = cmd->add_option("--" + std::string(k.flag), o.values[i], help);
    }
  }
}

// Precedence: flag > CRT_OUTPUT_DIR (output directory only) > config file > default.
ExperimentConfig resolve(const ConfigOptions& o) {
  ConfigFile file;
  if (!o.config_path.empty()) {
    const std::string text = input_step("--config", [&] { return io::read_file(o.config_path); });
    file = ConfigFile::parse(text);
  }
  if (const char* env = std::getenv("CRT_OUTPUT_DIR"); env != nullptr && *env != '\0') {
    file.section("run").set("output_dir", env);
  }
  const auto schema = config_schema();
  for (std::size_t i = 0; i < schema.size(); ++i) {
    if (o.options[i] == nullptr || o.options[i]->count() == 0) continue;
    const auto& k = schema[i];
    file.section(k.section).set(k.key, k.key == "deterministic" ? (o.deterministic ? "true" : "false") : o.values[i]);
  }
  return ExperimentConfig::from_file(file);
}

std::string fmt_seconds(double s) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6f", s);
  return buf;
}

std::string manifest_text(const ExperimentConfig& cfg, const std::vector<std::pair<std::string, std::string>>& fields) {
  ConfigFile f;
  auto& m = f.section("manifest");
  for (const auto& [k, v] : fields) m.set(k, v);
  return "# run manifest; rerun with --config <this file>\n" + f.to_text() + "\n" + cfg.to_file().to_text();
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
}

data::Dataset load_data(const ExperimentConfig& cfg, Split split) {
  return input_step(split == Split::kTrain ? "training data" : "test data",
                    [&] { return load_split(cfg.dataset, split); });
}

nn::Checkpoint load_teacher(const ExperimentConfig& cfg) {
  if (cfg.teacher.empty()) throw ConfigError("model.teacher", "required when model.method = crt");
  if (!fs::is_regular_file(cfg.teacher)) throw ConfigError("model.teacher", "file not found: " + cfg.teacher);
  return input_step("model.teacher", [&] { return nn::load_checkpoint(cfg.teacher); });
}

void check_compatible(const nn::Model& model, const data::Dataset& data, const std::string& field) {
  if (model.num_classes() != data.num_classes) {
    throw ConfigError(field, "model has K=" + std::to_string(model.num_classes()) + " classes but the dataset has K=" +
                                 std::to_string(data.num_classes));
  }
  if (model.input_shape() != data.sample_shape()) {
    throw ConfigError(field, "model expects inputs " + shape_string(model.input_shape()) + " but the dataset has " +
                                 shape_string(data.sample_shape()));
  }
}

double total_seconds(std::span<const train::EpochTiming> timings) {
  double s = 0.0;
  for (const auto& t : timings) s += t.wall_seconds;
  return s;
}

// Writes model.ckpt, timing.csv and manifest.txt into `dir`.
void write_run(const fs::path& dir, const ExperimentConfig& cfg, const std::string& command, const nn::Checkpoint& ckpt,
               std::span<const train::EpochTiming> timings, std::vector<std::pair<std::string, std::string>> extra) {
  ensure_dir(dir);
  nn::save_checkpoint(dir / "model.ckpt", ckpt);
  train::write_timing_csv(dir / "timing.csv", timings);
  std::vector<std::pair<std::string, std::string>> fields = {
      {"command", command},
      {"config_hash", io::hex64(cfg.hash())},
      {"seed", std::to_string(cfg.train.seed)},
      {"wall_seconds", fmt_seconds(total_seconds(timings))},
      {"checkpoint", "model.ckpt"},
      {"checkpoint_checksum", io::hex64(nn::checkpoint_checksum(ckpt))},
      {"method", ckpt.meta.method},
      {"sigma", fmt_seconds(ckpt.meta.sigma)},
      {"chain_length", std::to_string(ckpt.meta.chain_length)},
  };
  if (ckpt.meta.parent_checksum) fields.emplace_back("teacher_checksum", io::hex64(*ckpt.meta.parent_checksum));
  fields.insert(fields.end(), extra.begin(), extra.end());
  io::write_file_atomic(dir / "manifest.txt", manifest_text(cfg, fields));
}

// Periodic checkpoints go to dir/checkpoints/epoch-NNNN.ckpt.
bool periodic_due(const ExperimentConfig& cfg, std::size_t epoch) {
  return cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
}

void save_periodic(const fs::path& dir, std::size_t epoch, const nn::Checkpoint& ckpt) {
  char name[32];
  std::snprintf(name, sizeof name, "epoch-%04zu.ckpt", epoch + 1);
  ensure_dir(dir / "checkpoints");
  nn::save_checkpoint(dir / "checkpoints" / name, ckpt);
}

std::string mismatch_warning(double teacher_sigma, double sigma) {
  return "teacher trained at sigma=" + fmt_seconds(teacher_sigma) + " but this run uses sigma=" + fmt_seconds(sigma);
}

// ---------------------------------------------------------------------------

int cmd_train(ExperimentConfig cfg) {
  if (cfg.method == train::kMethodCrt) {
    throw ConfigError("model.method", "crt runs use the transfer subcommand");
  }
  const data::Dataset data = load_data(cfg, Split::kTrain);
  const bool standard = cfg.method == train::kMethodStandard;
  nn::CheckpointMeta meta;
  meta.sigma = standard ? 0.0 : cfg.noise.sigma;
  meta.method = cfg.method;
  train::EpochHook on_epoch;
  if (cfg.checkpoint_every > 0) {
    on_epoch = [&](std::size_t epoch, const nn::Model& model) {
      if (periodic_due(cfg, epoch)) save_periodic(cfg.output_dir, epoch, nn::Checkpoint{model, meta});
    };
  }
  train::TrainResult r = standard ? train::train_standard(cfg.arch, data, cfg.train, on_epoch)
                                  : train::train_gaussian_aug(cfg.arch, data, cfg.train, cfg.noise, on_epoch);
  const nn::Checkpoint ckpt{std::move(r.model), meta};
  write_run(cfg.output_dir, cfg, "train", ckpt, r.timings, {});
  std::printf("train: %s/%s, %zu epochs, final loss %.6f, %s\n", cfg.arch.c_str(), cfg.method.c_str(),
              r.timings.size(), r.epoch_losses.empty() ? 0.0 : r.epoch_losses.back(),
              (fs::path(cfg.output_dir) / "model.ckpt").string().c_str());
  return kExitOk;
}

int cmd_transfer(ExperimentConfig cfg) {
  cfg.method = std::string(train::kMethodCrt);
  const nn::Checkpoint teacher = load_teacher(cfg);
  const data::Dataset data = load_data(cfg, Split::kTrain);
  check_compatible(teacher.model, data, "model.teacher");
  std::vector<std::pair<std::string, std::string>> extra;
  if (teacher.meta.sigma != cfg.noise.sigma) {
    const std::string w = mismatch_warning(teacher.meta.sigma, cfg.noise.sigma);
    std::fprintf(stderr, "crt: warning: %s\n", w.c_str());
    extra.emplace_back("warning", w);
  }
  const train::ChainLink link{cfg.arch, cfg.train};
  const auto on_epoch = [&](std::size_t, std::size_t epoch, const nn::Checkpoint& partial) {
    if (periodic_due(cfg, epoch)) save_periodic(cfg.output_dir, epoch, partial);
  };
  auto steps = train::run_chain(std::span(&link, 1), teacher, data, cfg.noise, {}, on_epoch);
  write_run(cfg.output_dir, cfg, "transfer", steps[0].checkpoint, steps[0].timings, extra);
  std::printf("transfer: %s -> %s, %zu epochs, chain length %u, %s\n", teacher.model.arch_id().c_str(),
              cfg.arch.c_str(), steps[0].timings.size(), steps[0].checkpoint.meta.chain_length,
              (fs::path(cfg.output_dir) / "model.ckpt").string().c_str());
  return kExitOk;
}

int cmd_chain(ExperimentConfig cfg, const std::vector<std::string>& link_archs) {
  cfg.method = std::string(train::kMethodCrt);
  for (const auto& arch : link_archs) {
    const auto presets = nn::preset_names();
    if (std::find(presets.begin(), presets.end(), arch) == presets.end()) {
      throw ConfigError("--links", "unknown architecture '" + arch + "'");
    }
    cfg.links.push_back({arch, cfg.train});
  }
  if (cfg.links.empty()) throw ConfigError("link", "a chain needs at least one [link] section or --links");
  const nn::Checkpoint teacher = load_teacher(cfg);
  const data::Dataset data = load_data(cfg, Split::kTrain);
  check_compatible(teacher.model, data, "model.teacher");
  const bool mismatch = teacher.meta.sigma != cfg.noise.sigma;
  if (mismatch) std::fprintf(stderr, "crt: warning: %s\n", mismatch_warning(teacher.meta.sigma, cfg.noise.sigma).c_str());

  std::size_t current = 0;
  const auto on_link = [&](std::size_t i, const train::ChainStep& step) {
    std::vector<std::pair<std::string, std::string>> extra = {{"link", std::to_string(i + 1)},
                                                              {"links", std::to_string(cfg.links.size())},
                                                              {"arch", cfg.links[i].arch}};
    if (i == 0 && mismatch) extra.emplace_back("warning", mismatch_warning(teacher.meta.sigma, cfg.noise.sigma));
    const fs::path dir = fs::path(cfg.output_dir) / ("link-" + std::to_string(i + 1));
    write_run(dir, cfg, "chain", step.checkpoint, step.timings, extra);
    std::printf("chain: link %zu/%zu %s, chain length %u, %s\n", i + 1, cfg.links.size(), cfg.links[i].arch.c_str(),
                step.checkpoint.meta.chain_length, (dir / "model.ckpt").string().c_str());
    std::fflush(stdout);
    current = i + 1;
  };
  const auto on_epoch = [&](std::size_t i, std::size_t epoch, const nn::Checkpoint& partial) {
    if (periodic_due(cfg, epoch)) save_periodic(fs::path(cfg.output_dir) / ("link-" + std::to_string(i + 1)), epoch, partial);
  };
  try {
    train::run_chain(cfg.links, teacher, data, cfg.noise, on_link, on_epoch);
  } catch (const std::exception& e) {
    throw std::runtime_error("link " + std::to_string(current + 1) + " (" + cfg.links[current].arch + "): " + e.what());
  }
  return kExitOk;
}

int cmd_certify(ExperimentConfig cfg, const std::string& checkpoint_path, std::string out_arg) {
  if (checkpoint_path.empty()) throw InputError("--checkpoint: required");
  const nn::Checkpoint ckpt = input_step("--checkpoint", [&] { return nn::load_checkpoint(checkpoint_path); });
  smoothing::SmoothingParams params = cfg.smoothing;
  // The checkpoint's own noise level unless sigma is given explicitly.
  params.sigma = cfg.sigma_explicit || ckpt.meta.sigma <= 0.0 ? cfg.noise.sigma : ckpt.meta.sigma;
  const bool sigma_mismatch = ckpt.meta.sigma_mismatch() || (ckpt.meta.sigma > 0.0 && params.sigma != ckpt.meta.sigma);
  input_step("smoothing", [&] { params.validate(); });
  const data::Dataset data = load_data(cfg, Split::kTest);
  check_compatible(ckpt.model, data, "--checkpoint");

  const fs::path out = out_arg.empty() ? fs::path(cfg.output_dir) / "certify.csv" : fs::path(out_arg);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  const fs::path partial = out.string() + ".partial";

  smoothing::DatasetCertification job;
  job.seed = cfg.cert_seed;
  job.stride = cfg.stride;
  job.workers = cfg.workers;
  job.record_time = !cfg.deterministic;
  std::size_t resumed = 0;
  {
    smoothing::RecordsPrefix prefix;
    if (fs::exists(partial)) prefix = smoothing::complete_records_prefix(io::read_file(partial));
    if (prefix.text.empty()) prefix.text = std::string(smoothing::kRecordsHeader) + "\n";
    if (!prefix.records.empty()) {
      job.resume_after = prefix.records.back().input_index;
      resumed = prefix.records.size();
      std::fprintf(stderr, "crt: resuming after input %zu (%zu rows kept)\n", *job.resume_after, resumed);
    }
    std::ofstream f(partial, std::ios::binary | std::ios::trunc);
    f << prefix.text;
    if (!f) throw std::runtime_error("cannot write " + partial.string());
  }

  std::ofstream f(partial, std::ios::binary | std::ios::app);
  std::size_t rows = resumed;
  const auto start = std::chrono::steady_clock::now();
  smoothing::certify_dataset(ckpt.model, data, params, job, [&](const smoothing::CertificationRecord& r) {
    f << smoothing::format_record(r) << '\n';
    f.flush();
    if (!f) throw std::runtime_error("cannot append to " + partial.string());
    ++rows;
  });
  f.close();
  const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
  fs::rename(partial, out);

  const std::string csv = io::read_file(out);
  io::write_file_atomic(out.string() + ".manifest",
                        manifest_text(cfg, {{"command", "certify"},
                                            {"config_hash", io::hex64(cfg.hash())},
                                            {"seed", std::to_string(cfg.cert_seed)},
                                            {"wall_seconds", fmt_seconds(elapsed.count())},
                                            {"checkpoint", checkpoint_path},
                                            {"checkpoint_checksum", io::hex64(nn::checkpoint_checksum(ckpt))},
                                            {"method", ckpt.meta.method},
                                            {"sigma", fmt_seconds(params.sigma)},
                                            {"sigma_mismatch", sigma_mismatch ? "1" : "0"},
                                            {"chain_length", std::to_string(ckpt.meta.chain_length)},
                                            {"rows", std::to_string(rows)},
                                            {"resumed_rows", std::to_string(resumed)},
                                            {"records_checksum", io::hex64(io::fnv1a(csv))}}));
  std::printf("certify: %zu rows (sigma %.4g), %s\n", rows, params.sigma, out.string().c_str());
  return kExitOk;
}

struct ReportArgs {
  std::vector<std::string> records;
  std::vector<std::string> timings;
  std::vector<std::string> names;
  std::vector<std::string> roles;
  std::string out;
  double radius_step = 0.25;
};

int cmd_report(const ExperimentConfig& cfg, const ReportArgs& a) {
  if (a.records.empty()) throw InputError("--records: at least one records file is required");
  if (!a.timings.empty() && a.timings.size() != a.records.size()) {
    throw InputError("--timing: give one entry per records file ('-' for none)");
  }
  if (!a.names.empty() && a.names.size() != a.records.size()) throw InputError("--name: give one per records file");
  if (!a.roles.empty() && a.roles.size() != a.records.size()) throw InputError("--role: give one per records file");

  std::vector<metrics::MetricsReport> reports;
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    const std::string& path = a.records[i];
    const auto records = input_step(path, [&] { return smoothing::parse_records_csv(io::read_file(path)); });
    if (records.empty()) throw InputError(path + ": no records");
    std::vector<train::EpochTiming> timings;
    if (!a.timings.empty() && a.timings[i] != "-") {
      // '+' joins the phases of one model, e.g. teacher + student.
      for (auto part : io::split(a.timings[i], '+')) {
        const std::string tp(io::trim(part));
        auto t = input_step(tp, [&] { return train::read_timing_csv(tp); });
        timings.insert(timings.end(), t.begin(), t.end());
      }
    }
    metrics::ReportMeta meta;
    meta.name = a.names.empty() ? fs::path(path).replace_extension().generic_string() : a.names[i];
    meta.radius_step = a.radius_step;
    meta.method_tag = timings.empty() ? "unknown" : timings.back().method_tag;
    const fs::path mpath = path + ".manifest";
    if (fs::exists(mpath)) {
      const ConfigFile m = input_step(mpath.string(), [&] { return ConfigFile::parse(io::read_file(mpath)); });
      if (const auto* s = m.find("manifest")) {
        if (const auto* v = s->find("method")) meta.method_tag = *v;
        if (const auto* v = s->find("sigma")) meta.sigma = input_step(mpath.string(), [&] { return io::parse_double(*v, "sigma"); });
        if (const auto* v = s->find("sigma_mismatch")) meta.sigma_mismatch = *v == "1";
      }
    }
    reports.push_back(input_step("report", [&] { return metrics::build_report(records, timings, meta); }));
  }

  std::vector<std::size_t> base_idx;
  std::vector<std::size_t> cand_idx;
  if (!a.roles.empty()) {
    for (std::size_t i = 0; i < a.roles.size(); ++i) {
      if (a.roles[i] == "baseline") {
        base_idx.push_back(i);
      } else if (a.roles[i] == "candidate") {
        cand_idx.push_back(i);
      } else {
        throw InputError("--role: expected baseline or candidate, got '" + a.roles[i] + "'");
      }
    }
    if (base_idx.size() != cand_idx.size()) throw InputError("--role: baselines and candidates must pair up");
  } else if (reports.size() == 2 && reports[0].timing.total_seconds > 0.0 && reports[1].timing.total_seconds > 0.0) {
    // Implicit pairing only when both sides have timings; explicit roles still demand them.
    base_idx = {0};
    cand_idx = {1};
  }

  std::string text = metrics::format_table(reports);
  if (!base_idx.empty()) {
    std::vector<metrics::Comparison> pairs;
    std::vector<double> base_totals;
    std::vector<double> cand_totals;
    for (std::size_t j = 0; j < base_idx.size(); ++j) {
      const auto& b = reports[base_idx[j]];
      const auto& c = reports[cand_idx[j]];
      if (b.timing.total_seconds <= 0.0 || c.timing.total_seconds <= 0.0) {
        throw InputError("comparison of " + b.name + " and " + c.name + " needs timing files for both");
      }
      const double speedup = metrics::speedup_factor(b.timing.total_seconds, c.timing.total_seconds);
      pairs.push_back({b.name, c.name, speedup, 1.0 - c.timing.total_seconds / b.timing.total_seconds});
      base_totals.push_back(b.timing.total_seconds);
      cand_totals.push_back(c.timing.total_seconds);
    }
    text += "\n" + metrics::format_comparison(pairs, metrics::cumulative_savings(base_totals, cand_totals));
  }

  const fs::path dir = a.out.empty() ? fs::path(cfg.output_dir) : fs::path(a.out);
  ensure_dir(dir);
  std::string structured;
  for (const auto& r : reports) structured += metrics::to_structured(r) + "\n";
  io::write_file_atomic(dir / "report.txt", text);
  io::write_file_atomic(dir / "report.ini", structured);
  std::fputs(text.c_str(), stdout);
  return kExitOk;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"crt: randomized-smoothing training, robustness transfer, certification and reporting"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "crt 1.0");

  ConfigOptions train_opts;
  ConfigOptions transfer_opts;
  ConfigOptions chain_opts;
  ConfigOptions certify_opts;
  ConfigOptions report_opts;
  auto* train_cmd = app.add_subcommand("train", "train a base classifier (standard or gaussian-aug)");
  add_config_options(train_cmd, train_opts);
  auto* transfer_cmd = app.add_subcommand("transfer", "train a student from a teacher checkpoint");
  add_config_options(transfer_cmd, transfer_opts);
  auto* chain_cmd = app.add_subcommand("chain", "run successive transfers, each link teaching the next");
  add_config_options(chain_cmd, chain_opts);
  std::vector<std::string> link_archs;
  chain_cmd->add_option("--links", link_archs, "comma-separated link architectures (alternative to [link] sections)")
      ->delimiter(',');
  auto* certify_cmd = app.add_subcommand("certify", "certify the test split with a smoothed classifier");
  add_config_options(certify_cmd, certify_opts);
  std::string checkpoint_path;
  std::string certify_out;
  certify_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint to certify")->required();
  certify_cmd->add_option("--out", certify_out, "records CSV (default <output_dir>/certify.csv)");
  auto* report_cmd = app.add_subcommand("report", "summarize records and timing files");
  add_config_options(report_cmd, report_opts);
  ReportArgs rargs;
  report_cmd->add_option("--records", rargs.records, "records CSV, one per model")->delimiter(',')->required();
  report_cmd->add_option("--timing", rargs.timings, "timing CSVs per model; '+' joins phases, '-' means none")
      ->delimiter(',');
  report_cmd->add_option("--name", rargs.names, "display name per model")->delimiter(',');
  report_cmd->add_option("--role", rargs.roles, "baseline | candidate per model")->delimiter(',');
  report_cmd->add_option("--radius-step", rargs.radius_step, "grid step of the certified-accuracy curve");
  report_cmd->add_option("--out", rargs.out, "report directory (default <output_dir>)");

  app.add_subcommand("schema", "print the configuration schema as a markdown table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitInput;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(resolve(train_opts));
    if (transfer_cmd->parsed()) return cmd_transfer(resolve(transfer_opts));
    if (chain_cmd->parsed()) return cmd_chain(resolve(chain_opts), link_archs);
    if (certify_cmd->parsed()) return cmd_certify(resolve(certify_opts), checkpoint_path, certify_out);
    if (report_cmd->parsed()) return cmd_report(resolve(report_opts), rargs);
    if (app.got_subcommand("schema")) {
      std::fputs(schema_markdown().c_str(), stdout);
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "crt: config error: %s\n", e.what());
    return kExitInput;
  } catch (const InputError& e) {
    std::fprintf(stderr, "crt: input error: %s\n", e.what());
    return kExitInput;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "crt: error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitInput;
}

}  // namespace crt::cli
