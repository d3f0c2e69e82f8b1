#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "crt/data.hpp"
#include "crt/nn.hpp"
#include "crt/smoothing.hpp"
#include "crt/train.hpp"

namespace crt::cli {

/// A configuration problem attributable to one field ("section.key").
struct ConfigError : std::runtime_error {
  ConfigError(std::string field_name, const std::string& message)
      : std::runtime_error(field_name + ": " + message), field(std::move(field_name)) {}
  std::string field;
};

// ---------------------------------------------------------------------------
// Line-oriented key=value text with [section] headers
// ---------------------------------------------------------------------------

struct ConfigSection {
  std::string name;
  std::vector<std::pair<std::string, std::string>> entries;

  const std::string* find(std::string_view key) const;
  void set(std::string_view key, std::string value);
};

/// '#' starts a comment line; blank lines are ignored; sections may repeat
/// (each [link] section is one chain link).
struct ConfigFile {
  std::vector<ConfigSection> sections;

  static ConfigFile parse(std::string_view text);
  std::string to_text() const;

  /// First section with this name, created on demand by `section`.
  const ConfigSection* find(std::string_view name) const;
  ConfigSection& section(std::string_view name);
};

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

struct KeySpec {
  std::string_view section;
  std::string_view key;
  std::string_view flag;           // command-line flag without the leading "--"
  std::string_view default_value;  // as written in a config file
  std::string_view help;
};

/// Every recognised key, in canonical order. [link] sections accept "arch"
/// plus any [train] key as a per-link override.
std::span<const KeySpec> config_schema();

/// Markdown table of the schema.
std::string schema_markdown();

// ---------------------------------------------------------------------------
// Typed experiment configuration
// ---------------------------------------------------------------------------

struct DatasetSpec {
  std::string name = "synth";  // synth, idx, cifar10 or fixture
  std::string train_images, train_labels, test_images, test_labels;
  std::string train_batches, test_batches;  // comma-separated CIFAR-10 batch files
  std::string train_fixture, test_fixture;
  std::size_t classes = 3;
  std::size_t dim = 16;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 200;
  double spread = 0.1;
  std::uint64_t seed = 1;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  std::string arch = "small-mlp";
  std::string method = "standard";  // standard | gaussian-aug | crt
  std::string teacher;
  train::NoiseConfig noise;
  bool sigma_explicit = false;  // noise.sigma was given rather than defaulted
  nn::TrainConfig train;
  smoothing::SmoothingParams smoothing;
  std::uint64_t cert_seed = 0;
  std::size_t stride = 1;
  std::string output_dir = "runs/default";
  std::size_t workers = 1;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
  bool deterministic = false;
  std::vector<train::ChainLink> links;

  /// Throws ConfigError naming the first offending field.
  static ExperimentConfig from_file(const ConfigFile& file);
  /// Canonical form: every key, schema order, links last.
  ConfigFile to_file() const;
  std::uint64_t hash() const;
};

enum class Split { kTrain, kTest };

/// Checks that every path the dataset spec references exists.
void validate_dataset_paths(const DatasetSpec& spec, Split split);
data::Dataset load_split(const DatasetSpec& spec, Split split);

}  // namespace crt::cli
