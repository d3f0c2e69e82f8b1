#include "crt/config.hpp"

#include <array>
#include <charconv>
#include <filesystem>

#include "crt/error.hpp"
#include "crt/io.hpp"

namespace crt::cli {
namespace {

constexpr std::array<KeySpec, 41> kSchema = {{
    {"dataset", "name", "dataset", "synth", "synth, idx, cifar10 or fixture"},
    {"dataset", "train_images", "train-images", "", "IDX training images (dataset=idx)"},
    {"dataset", "train_labels", "train-labels", "", "IDX training labels (dataset=idx)"},
    {"dataset", "test_images", "test-images", "", "IDX test images (dataset=idx)"},
    {"dataset", "test_labels", "test-labels", "", "IDX test labels (dataset=idx)"},
    {"dataset", "train_batches", "train-batches", "", "comma-separated CIFAR-10 training batches (dataset=cifar10)"},
    {"dataset", "test_batches", "test-batches", "", "comma-separated CIFAR-10 test batches (dataset=cifar10)"},
    {"dataset", "train_fixture", "train-fixture", "", "training fixture file (dataset=fixture)"},
    {"dataset", "test_fixture", "test-fixture", "", "test fixture file (dataset=fixture)"},
    {"dataset", "classes", "classes", "3", "synthetic blobs: number of classes"},
    {"dataset", "dim", "dim", "16", "synthetic blobs: input dimension"},
    {"dataset", "train_per_class", "train-per-class", "500", "synthetic blobs: training samples per class"},
    {"dataset", "test_per_class", "test-per-class", "200", "synthetic blobs: test samples per class"},
    {"dataset", "spread", "spread", "0.1", "synthetic blobs: per-coordinate cluster std"},
    {"dataset", "seed", "data-seed", "1", "synthetic blobs: seed (test split uses seed + 1)"},
    {"model", "arch", "arch", "small-mlp", "linear | small-mlp | large-mlp | small-cnn"},
    {"model", "method", "method", "standard", "standard | gaussian-aug | crt"},
    {"model", "teacher", "teacher", "", "teacher checkpoint (required iff method=crt)"},
    {"noise", "sigma", "sigma", "0.25", "noise level for training and certification"},
    {"train", "epochs", "epochs", "60", "epoch budget"},
    {"train", "batch_size", "batch-size", "128", "minibatch size"},
    {"train", "lr", "lr", "0.1", "initial learning rate"},
    {"train", "momentum", "momentum", "0.9", "SGD momentum"},
    {"train", "weight_decay", "weight-decay", "0.0001", "L2 weight decay"},
    {"train", "lr_decay_epochs", "lr-decay-epochs", "30,45", "comma-separated epochs at which the rate decays"},
    {"train", "lr_decay_factor", "lr-decay-factor", "0.1", "multiplicative decay factor"},
    {"train", "seed", "seed", "0", "training seed (initialization, shuffling, noise)"},
    {"smoothing", "n0", "n0", "100", "selection samples per input"},
    {"smoothing", "n", "n", "100000", "estimation samples per input"},
    {"smoothing", "alpha", "alpha", "0.001", "certification failure probability"},
    {"smoothing", "eval_batch", "eval-batch", "1000", "noisy copies per forward pass"},
    {"smoothing", "seed", "cert-seed", "0", "certification seed (input i uses stream i)"},
    {"smoothing", "stride", "stride", "1", "certify every stride-th test input"},
    {"run", "output_dir", "output-dir", "runs/default", "output directory (env CRT_OUTPUT_DIR overrides the file)"},
    {"run", "workers", "workers", "1", "certification worker threads"},
    {"run", "checkpoint_every", "checkpoint-every", "0",
     "also checkpoint every N epochs into checkpoints/ (0: final checkpoint only)"},
    {"run", "deterministic", "deterministic", "false", "bit-reproducible outputs (time_s written as 0)"},
    {"link", "arch", "", "", "[link] sections: student architecture of one chain link"},
    {"link", "epochs", "", "", "[link] sections: any [train] key overrides the base value"},
    {"link", "seed", "", "", "[link] sections: e.g. a per-link seed"},
    {"link", "lr", "", "", "[link] sections: e.g. a per-link learning rate"},
}};

bool is_train_key(std::string_view key) {
  for (const auto& k : kSchema) {
    if (k.section == "train" && k.key == key) return true;
  }
  return false;
}

bool known_key(std::string_view section, std::string_view key) {
  if (section == "link") return key == "arch" || is_train_key(key);
  for (const auto& k : kSchema) {
    if (k.section == section && k.key == key) return true;
  }
  return false;
}

bool known_section(std::string_view s) {
  return s == "dataset" || s == "model" || s == "noise" || s == "train" || s == "smoothing" || s == "run" ||
         s == "link" || s == "manifest";
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

/// Typed reads from one section with schema defaults and field-level errors.
class FieldReader {
 public:
  FieldReader(const ConfigSection* section, std::string name) : section_(section), name_(std::move(name)) {}

  const std::string* raw(std::string_view key) const { return section_ ? section_->find(key) : nullptr; }

  std::string str(std::string_view key, std::string fallback) const {
    const std::string* v = raw(key);
    return v ? *v : std::move(fallback);
  }

  template <class T>
  T number(std::string_view key, T fallback) const {
    const std::string* v = raw(key);
    if (!v) return fallback;
    try {
      if constexpr (std::is_floating_point_v<T>) {
        return static_cast<T>(io::parse_double(*v, field(key)));
      } else {
        return static_cast<T>(io::parse_uint(*v, field(key)));
      }
    } catch (const FormatError& e) {
      throw ConfigError(field(key), "expected a " + std::string(std::is_floating_point_v<T> ? "number" : "non-negative integer") +
                                        ", got '" + *v + "'");
    }
  }

  bool boolean(std::string_view key, bool fallback) const {
    const std::string* v = raw(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    throw ConfigError(field(key), "expected true or false, got '" + *v + "'");
  }

  std::vector<std::size_t> sizes(std::string_view key, std::vector<std::size_t> fallback) const {
    const std::string* v = raw(key);
    if (!v) return fallback;
    std::vector<std::size_t> out;
    if (io::trim(*v).empty()) return out;
    for (auto part : io::split(*v, ',')) {
      try {
        out.push_back(io::parse_uint(io::trim(part), field(key)));
      } catch (const FormatError&) {
        throw ConfigError(field(key), "expected comma-separated integers, got '" + *v + "'");
      }
    }
    return out;
  }

  std::string field(std::string_view key) const { return name_ + "." + std::string(key); }

 private:
  const ConfigSection* section_;
  std::string name_;
};

nn::TrainConfig read_train(const FieldReader& r, const nn::TrainConfig& base) {
  nn::TrainConfig t = base;
  t.epochs = r.number<std::size_t>("epochs", base.epochs);
  t.batch_size = r.number<std::size_t>("batch_size", base.batch_size);
  t.lr = r.number<double>("lr", base.lr);
  t.momentum = r.number<double>("momentum", base.momentum);
  t.weight_decay = r.number<double>("weight_decay", base.weight_decay);
  t.lr_decay_epochs = r.sizes("lr_decay_epochs", base.lr_decay_epochs);
  t.lr_decay_factor = r.number<double>("lr_decay_factor", base.lr_decay_factor);
  t.seed = r.number<std::uint64_t>("seed", base.seed);
  try {
    t.validate();
  } catch (const InvalidParameter& e) {
    const std::string msg = e.what();
    const auto dot = msg.find('.');
    const auto colon = msg.find(' ');
    const std::string key = dot != std::string::npos && colon != std::string::npos ? msg.substr(dot + 1, colon - dot - 1) : "";
    throw ConfigError(r.field(key), msg);
  }
  return t;
}

void write_train(ConfigSection& s, const nn::TrainConfig& t) {
  s.set("epochs", std::to_string(t.epochs));
  s.set("batch_size", std::to_string(t.batch_size));
  s.set("lr", format_double(t.lr));
  s.set("momentum", format_double(t.momentum));
  s.set("weight_decay", format_double(t.weight_decay));
  s.set("lr_decay_epochs", join_sizes(t.lr_decay_epochs));
  s.set("lr_decay_factor", format_double(t.lr_decay_factor));
  s.set("seed", std::to_string(t.seed));
}

void require_file(const std::string& path, const std::string& field, std::string_view why) {
  if (path.empty()) throw ConfigError(field, "required " + std::string(why));
  if (!std::filesystem::is_regular_file(path)) throw ConfigError(field, "file not found: " + path);
}

std::vector<std::filesystem::path> path_list(const std::string& csv) {
  std::vector<std::filesystem::path> out;
  for (auto part : io::split(csv, ',')) {
    const auto p = io::trim(part);
    if (!p.empty()) out.emplace_back(std::string(p));
  }
  return out;
}

}  // namespace

const std::string* ConfigSection::find(std::string_view key) const {
  for (const auto& [k, v] : entries) {
    if (k == key) return &v;
  }
  return nullptr;
}

void ConfigSection::set(std::string_view key, std::string value) {
  for (auto& [k, v] : entries) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  entries.emplace_back(std::string(key), std::move(value));
}

ConfigFile ConfigFile::parse(std::string_view text) {
  ConfigFile file;
  const auto lines = io::split(text, '\n');
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto line = io::trim(lines[i]);
    const std::string where = "config line " + std::to_string(i + 1);
    if (line.empty() || line.front() == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where, "malformed section header");
      const std::string name(io::trim(line.substr(1, line.size() - 2)));
      if (!known_section(name)) throw ConfigError(name, "unknown section");
      file.sections.push_back({name, {}});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where, "expected key = value");
    if (file.sections.empty()) throw ConfigError(where, "key outside of any [section]");
    auto& sec = file.sections.back();
    const std::string key(io::trim(line.substr(0, eq)));
    if (sec.name != "manifest" && !known_key(sec.name, key)) throw ConfigError(sec.name + "." + key, "unknown key");
    sec.set(key, std::string(io::trim(line.substr(eq + 1))));
  }
  return file;
}

std::string ConfigFile::to_text() const {
  std::string out;
  for (const auto& s : sections) {
    if (!out.empty()) out += "\n";
    out += "[" + s.name + "]\n";
    for (const auto& [k, v] : s.entries) out += k + " = " + v + "\n";
  }
  return out;
}

const ConfigSection* ConfigFile::find(std::string_view name) const {
  for (const auto& s : sections) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

ConfigSection& ConfigFile::section(std::string_view name) {
  for (auto& s : sections) {
    if (s.name == name) return s;
  }
  sections.push_back({std::string(name), {}});
  return sections.back();
}

std::span<const KeySpec> config_schema() { return kSchema; }

std::string schema_markdown() {
  std::string out = "| section | key | flag | default | meaning |\n|---|---|---|---|---|\n";
  for (const auto& k : kSchema) {
    out += "| " + std::string(k.section) + " | " + std::string(k.key) + " | " +
           (k.flag.empty() ? std::string("-") : "--" + std::string(k.flag)) + " | " + std::string(k.default_value) +
           " | " + std::string(k.help) + " |\n";
  }
  return out;
}

ExperimentConfig ExperimentConfig::from_file(const ConfigFile& file) {
  ExperimentConfig c;
  const FieldReader ds(file.find("dataset"), "dataset");
  c.dataset.name = ds.str("name", c.dataset.name);
  if (c.dataset.name != "synth" && c.dataset.name != "idx" && c.dataset.name != "cifar10" &&
      c.dataset.name != "fixture") {
    throw ConfigError("dataset.name", "expected synth, idx, cifar10 or fixture, got '" + c.dataset.name + "'");
  }
  c.dataset.train_images = ds.str("train_images", "");
  c.dataset.train_labels = ds.str("train_labels", "");
  c.dataset.test_images = ds.str("test_images", "");
  c.dataset.test_labels = ds.str("test_labels", "");
  c.dataset.train_batches = ds.str("train_batches", "");
  c.dataset.test_batches = ds.str("test_batches", "");
  c.dataset.train_fixture = ds.str("train_fixture", "");
  c.dataset.test_fixture = ds.str("test_fixture", "");
  c.dataset.classes = ds.number<std::size_t>("classes", c.dataset.classes);
  c.dataset.dim = ds.number<std::size_t>("dim", c.dataset.dim);
  c.dataset.train_per_class = ds.number<std::size_t>("train_per_class", c.dataset.train_per_class);
  c.dataset.test_per_class = ds.number<std::size_t>("test_per_class", c.dataset.test_per_class);
  c.dataset.spread = ds.number<double>("spread", c.dataset.spread);
  c.dataset.seed = ds.number<std::uint64_t>("seed", c.dataset.seed);
  if (c.dataset.name == "synth") {
    if (c.dataset.classes < 2) throw ConfigError("dataset.classes", "must be >= 2");
    if (c.dataset.dim < c.dataset.classes) throw ConfigError("dataset.dim", "must be >= dataset.classes");
    if (c.dataset.train_per_class == 0) throw ConfigError("dataset.train_per_class", "must be >= 1");
    if (c.dataset.test_per_class == 0) throw ConfigError("dataset.test_per_class", "must be >= 1");
    if (!(c.dataset.spread > 0.0)) throw ConfigError("dataset.spread", "must be > 0");
  }

  const FieldReader model(file.find("model"), "model");
  c.arch = model.str("arch", c.arch);
  const auto presets = nn::preset_names();
  if (std::find(presets.begin(), presets.end(), c.arch) == presets.end()) {
    throw ConfigError("model.arch", "unknown architecture '" + c.arch + "'");
  }
  c.method = model.str("method", c.method);
  if (c.method != train::kMethodStandard && c.method != train::kMethodGaussianAug && c.method != train::kMethodCrt) {
    throw ConfigError("model.method", "expected standard, gaussian-aug or crt, got '" + c.method + "'");
  }
  c.teacher = model.str("teacher", "");

  const FieldReader noise(file.find("noise"), "noise");
  c.sigma_explicit = noise.raw("sigma") != nullptr;
  c.noise.sigma = noise.number<double>("sigma", c.noise.sigma);
  if (!(c.noise.sigma >= 0.0)) throw ConfigError("noise.sigma", "must be >= 0");

  c.train = read_train(FieldReader(file.find("train"), "train"), c.train);

  const FieldReader sm(file.find("smoothing"), "smoothing");
  c.smoothing.n0 = sm.number<std::size_t>("n0", c.smoothing.n0);
  c.smoothing.n = sm.number<std::size_t>("n", c.smoothing.n);
  c.smoothing.alpha = sm.number<double>("alpha", c.smoothing.alpha);
  c.smoothing.eval_batch = sm.number<std::size_t>("eval_batch", c.smoothing.eval_batch);
  c.cert_seed = sm.number<std::uint64_t>("seed", c.cert_seed);
  c.stride = sm.number<std::size_t>("stride", c.stride);
  c.smoothing.sigma = c.noise.sigma;
  if (c.smoothing.n0 < 1) throw ConfigError("smoothing.n0", "must be >= 1");
  if (c.smoothing.n < c.smoothing.n0) throw ConfigError("smoothing.n", "must be >= smoothing.n0");
  if (!(c.smoothing.alpha > 0.0 && c.smoothing.alpha < 1.0)) throw ConfigError("smoothing.alpha", "must lie in (0,1)");
  if (c.smoothing.eval_batch < 1) throw ConfigError("smoothing.eval_batch", "must be >= 1");
  if (c.stride < 1) throw ConfigError("smoothing.stride", "must be >= 1");

  const FieldReader run(file.find("run"), "run");
  c.output_dir = run.str("output_dir", c.output_dir);
  c.workers = run.number<std::size_t>("workers", c.workers);
  if (c.workers < 1) throw ConfigError("run.workers", "must be >= 1");
  c.deterministic = run.boolean("deterministic", c.deterministic);
  c.checkpoint_every = run.number<std::size_t>("checkpoint_every", c.checkpoint_every);

  std::size_t link_no = 0;
  for (const auto& s : file.sections) {
    if (s.name != "link") continue;
    ++link_no;
    const FieldReader lr(&s, "link[" + std::to_string(link_no) + "]");
    train::ChainLink link;
    link.arch = lr.str("arch", "");
    if (link.arch.empty()) throw ConfigError(lr.field("arch"), "every [link] needs an arch");
    if (std::find(presets.begin(), presets.end(), link.arch) == presets.end()) {
      throw ConfigError(lr.field("arch"), "unknown architecture '" + link.arch + "'");
    }
    link.config = read_train(lr, c.train);
    c.links.push_back(std::move(link));
  }
  return c;
}

ConfigFile ExperimentConfig::to_file() const {
  ConfigFile f;
  auto& ds = f.section("dataset");
  ds.set("name", dataset.name);
  ds.set("train_images", dataset.train_images);
  ds.set("train_labels", dataset.train_labels);
  ds.set("test_images", dataset.test_images);
  ds.set("test_labels", dataset.test_labels);
  ds.set("train_batches", dataset.train_batches);
  ds.set("test_batches", dataset.test_batches);
  ds.set("train_fixture", dataset.train_fixture);
  ds.set("test_fixture", dataset.test_fixture);
  ds.set("classes", std::to_string(dataset.classes));
  ds.set("dim", std::to_string(dataset.dim));
  ds.set("train_per_class", std::to_string(dataset.train_per_class));
  ds.set("test_per_class", std::to_string(dataset.test_per_class));
  ds.set("spread", format_double(dataset.spread));
  ds.set("seed", std::to_string(dataset.seed));
  auto& m = f.section("model");
  m.set("arch", arch);
  m.set("method", method);
  m.set("teacher", teacher);
  f.section("noise").set("sigma", format_double(noise.sigma));
  write_train(f.section("train"), train);
  auto& sm = f.section("smoothing");
  sm.set("n0", std::to_string(smoothing.n0));
  sm.set("n", std::to_string(smoothing.n));
  sm.set("alpha", format_double(smoothing.alpha));
  sm.set("eval_batch", std::to_string(smoothing.eval_batch));
  sm.set("seed", std::to_string(cert_seed));
  sm.set("stride", std::to_string(stride));
  auto& run = f.section("run");
  run.set("output_dir", output_dir);
  run.set("workers", std::to_string(workers));
  run.set("checkpoint_every", std::to_string(checkpoint_every));
  run.set("deterministic", deterministic ? "true" : "false");
  for (const auto& link : links) {
    f.sections.push_back({"link", {}});
    auto& s = f.sections.back();
    s.set("arch", link.arch);
    write_train(s, link.config);
  }
  return f;
}

std::uint64_t ExperimentConfig::hash() const { return io::fnv1a(to_file().to_text()); }

void validate_dataset_paths(const DatasetSpec& spec, Split split) {
  const bool tr = split == Split::kTrain;
  if (spec.name == "idx") {
    require_file(tr ? spec.train_images : spec.test_images, tr ? "dataset.train_images" : "dataset.test_images",
                 "when dataset.name = idx");
    require_file(tr ? spec.train_labels : spec.test_labels, tr ? "dataset.train_labels" : "dataset.test_labels",
                 "when dataset.name = idx");
  } else if (spec.name == "cifar10") {
    const std::string& list = tr ? spec.train_batches : spec.test_batches;
    const std::string field = tr ? "dataset.train_batches" : "dataset.test_batches";
    const auto paths = path_list(list);
    if (paths.empty()) throw ConfigError(field, "required when dataset.name = cifar10");
    for (const auto& p : paths) require_file(p.string(), field, "");
  } else if (spec.name == "fixture") {
    require_file(tr ? spec.train_fixture : spec.test_fixture, tr ? "dataset.train_fixture" : "dataset.test_fixture",
                 "when dataset.name = fixture");
  }
}

data::Dataset load_split(const DatasetSpec& spec, Split split) {
  validate_dataset_paths(spec, split);
  const bool tr = split == Split::kTrain;
  if (spec.name == "synth") {
    return data::synth_blobs(spec.classes, spec.dim, tr ? spec.train_per_class : spec.test_per_class, spec.spread,
                             tr ? spec.seed : spec.seed + 1);
  }
  if (spec.name == "idx") {
    return tr ? data::load_idx(spec.train_images, spec.train_labels) : data::load_idx(spec.test_images, spec.test_labels);
  }
  if (spec.name == "cifar10") {
    const auto paths = path_list(tr ? spec.train_batches : spec.test_batches);
    return data::load_cifar10_binary(paths);
  }
  return data::load_fixture(tr ? spec.train_fixture : spec.test_fixture);
}

}  // namespace crt::cli
