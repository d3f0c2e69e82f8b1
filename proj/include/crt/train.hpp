#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "crt/checkpoint.hpp"
#include "crt/data.hpp"
#include "crt/nn.hpp"

namespace crt::train {

inline constexpr std::string_view kMethodStandard = "standard";
inline constexpr std::string_view kMethodGaussianAug = "gaussian-aug";
inline constexpr std::string_view kMethodCrt = "crt";

struct NoiseConfig {
  double sigma = 0.25;

  void validate() const;
};

struct EpochTiming {
  std::size_t epoch_index = 0;
  double wall_seconds = 0.0;
  std::string method_tag;

  friend bool operator==(const EpochTiming&, const EpochTiming&) = default;
};

struct TrainResult {
  nn::Model model;
  std::vector<EpochTiming> timings;
  std::vector<double> epoch_losses;  // mean training loss per epoch
  double total_wall_seconds = 0.0;   // around the whole epoch loop
};

// All trainers share the same seeding: RngStream(seed, 0) initializes the
// parameters, stream 1 drives the per-epoch shuffle and stream 2 the noise.
// Epoch timing covers batching, noise generation, teacher forwards and the
// update; it never includes checkpoint writes.

/// Runs after each epoch with the model as trained so far (e.g. to write a
/// periodic checkpoint). Its time is excluded from every timing figure.
using EpochHook = std::function<void(std::size_t epoch_index, const nn::Model& model)>;

/// Plain cross-entropy on clean inputs.
TrainResult train_standard(std::string_view arch, const data::Dataset& data, const nn::TrainConfig& config,
                           const EpochHook& on_epoch = {});

/// Cross-entropy on inputs perturbed by one fresh N(0, sigma^2 I) draw per
/// input per step.
TrainResult train_gaussian_aug(std::string_view arch, const data::Dataset& data, const nn::TrainConfig& config,
                               const NoiseConfig& noise, const EpochHook& on_epoch = {});

/// Observes each transfer step: the tensors handed to the teacher and to the
/// student, in that order.
using CrtStepHook = std::function<void(const Tensor& teacher_input, const Tensor& student_input)>;

/// Robustness transfer: the student is trained to match the teacher's softmax
/// output on the same noisy inputs, minimizing the batch mean of per-sample
/// Euclidean distances. The teacher is only read.
TrainResult crt_transfer(const nn::Model& teacher, std::string_view student_arch, const data::Dataset& data,
                         const nn::TrainConfig& config, const NoiseConfig& noise, const CrtStepHook& hook = {},
                         const EpochHook& on_epoch = {});

struct CrtLoss {
  double loss = 0.0;
  Tensor grad_logits;  // gradient of the loss w.r.t. the student's logits
};

/// Per-sample ||teacher - student||_2.
double softmax_distance(std::span<const double> teacher_probs, std::span<const double> student_probs);

/// Batch loss for [B, K] teacher probabilities and student logits. Samples
/// where the two outputs coincide contribute a zero subgradient.
CrtLoss crt_loss(const Tensor& teacher_probs, const Tensor& student_logits);

struct BoundGap {
  double lhs = 0.0;  // student probability of the label
  double rhs = 0.0;  // -(teacher probability - student probability)
};

/// Both sides of the inequality z_student^y >= -(z_teacher^y - z_student^y),
/// which holds because the teacher probability is non-negative.
BoundGap lower_bound_gap(const nn::SoftmaxOutput& teacher, const nn::SoftmaxOutput& student, std::size_t label);

// ---------------------------------------------------------------------------
// Recursive chains
// ---------------------------------------------------------------------------

struct ChainLink {
  std::string arch;
  nn::TrainConfig config;
};

struct ChainStep {
  nn::Checkpoint checkpoint;
  std::vector<EpochTiming> timings;
};

using ChainCallback = std::function<void(std::size_t link_index, const ChainStep& step)>;
/// Per-epoch view of a link in progress, with the link's final metadata.
using ChainEpochHook =
    std::function<void(std::size_t link_index, std::size_t epoch_index, const nn::Checkpoint& partial)>;

/// Link i is trained by crt_transfer from link i-1's output (link 0 from
/// `initial_teacher`). Each checkpoint records its teacher's checksum and
/// sigma, and a chain length one greater than its teacher's. `on_link` runs
/// after each link completes; an exception aborts the chain.
std::vector<ChainStep> run_chain(std::span<const ChainLink> links, const nn::Checkpoint& initial_teacher,
                                 const data::Dataset& data, const NoiseConfig& noise, const ChainCallback& on_link = {},
                                 const ChainEpochHook& on_epoch = {});

// ---------------------------------------------------------------------------
// Timing CSV: header "epoch_index,wall_seconds,method_tag"
// ---------------------------------------------------------------------------

std::string format_timing_csv(std::span<const EpochTiming> timings);
/// Throws FormatError naming the offending line.
std::vector<EpochTiming> parse_timing_csv(std::string_view text);
void write_timing_csv(const std::filesystem::path& path, std::span<const EpochTiming> timings);
std::vector<EpochTiming> read_timing_csv(const std::filesystem::path& path);

}  // namespace crt::train
