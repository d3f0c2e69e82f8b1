#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "crt/stats.hpp"
#include "crt/tensor.hpp"

namespace crt::nn {

// ---------------------------------------------------------------------------
// Layer descriptors
// ---------------------------------------------------------------------------

/// y = x W + b with W stored [in, out].
struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
};

/// Stride-1 2-D convolution over [C, H, W] samples. W is stored [out, in, k, k].
struct Conv2d {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t padding = 1;
};

struct Relu {};

/// Non-overlapping max pooling; trailing rows/columns that do not fill a
/// window are dropped. Ties resolve to the first element in row-major order.
struct MaxPool2d {
  std::size_t window = 2;
};

/// Per-sample reshape. Flatten is a reshape to a single dimension.
struct Reshape {
  Shape shape;
};

using Layer = std::variant<Dense, Conv2d, Relu, MaxPool2d, Reshape>;

std::string layer_name(const Layer& layer);

struct NamedTensor {
  std::string name;
  Tensor value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Parameters or gradients, in layer order.
using ParamSet = std::vector<NamedTensor>;

const Tensor* find_param(const ParamSet& set, std::string_view name);
Tensor* find_param(ParamSet& set, std::string_view name);

class Tape;

/// Feed-forward classifier: an ordered layer stack plus its named parameters.
class Model {
 public:
  Model() = default;
  /// Validates the layer stack against `input_shape` and allocates zeroed
  /// parameters. Throws ShapeError if the stack does not end in
  /// `num_classes` logits.
  Model(std::string arch_id, Shape input_shape, std::size_t num_classes, std::vector<Layer> layers);

  const std::string& arch_id() const { return arch_id_; }
  const Shape& input_shape() const { return input_shape_; }
  std::size_t num_classes() const { return num_classes_; }
  const std::vector<Layer>& layers() const { return layers_; }

  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }
  Tensor& param(std::string_view name);
  const Tensor& param(std::string_view name) const;
  std::size_t parameter_count() const;

  /// Fan-in scaled uniform weights, zero biases.
  void init_parameters(stats::RngStream& rng);

  /// Logits [B, K] for a batch [B, input_shape...].
  Tensor forward(const Tensor& batch) const;
  /// Same, recording what backward() needs.
  Tensor forward(const Tensor& batch, Tape& tape) const;

  /// FNV-1a over parameter names, shapes and raw values.
  std::uint64_t parameter_checksum() const;

 private:
  std::string arch_id_;
  Shape input_shape_;
  std::size_t num_classes_ = 0;
  std::vector<Layer> layers_;
  std::vector<Shape> layer_inputs_;  // per-sample input shape of each layer
  ParamSet params_;

  friend ParamSet backward(const Model&, const Tape&, const Tensor&, Tensor*);
};

/// Activations recorded by a forward pass.
class Tape {
 public:
  bool recorded() const { return !inputs_.empty(); }
  void clear() { inputs_.clear(); }

 private:
  std::vector<Tensor> inputs_;  // input of every layer
  std::uint64_t model_tag_ = 0;

  friend class Model;
  friend ParamSet backward(const Model&, const Tape&, const Tensor&, Tensor*);
};

/// Reverse-mode pass for a scalar loss whose gradient with respect to the
/// logits is `grad_logits`. Returns one gradient per parameter; optionally
/// writes the gradient with respect to the batch input. Throws StateError if
/// the tape holds no forward pass of this model.
ParamSet backward(const Model& model, const Tape& tape, const Tensor& grad_logits, Tensor* grad_input = nullptr);

// ---------------------------------------------------------------------------
// Outputs and losses
// ---------------------------------------------------------------------------

struct SoftmaxOutput {
  std::vector<double> probs;
};

SoftmaxOutput softmax(std::span<const double> logits);
/// Row-wise softmax of [B, K] logits.
Tensor softmax_rows(const Tensor& logits);

/// -log(max(probs[label], 1e-12)).
double cross_entropy(const SoftmaxOutput& probs, std::size_t label);

/// Lowest index wins ties.
std::size_t argmax(std::span<const double> values);

struct LossGrad {
  double loss = 0.0;
  Tensor grad_logits;
};

/// Mean cross-entropy over a batch and its gradient w.r.t. the logits.
LossGrad cross_entropy_batch(const Tensor& logits, std::span<const std::uint32_t> labels);

/// Pulls a gradient w.r.t. softmax probabilities back to the logits.
Tensor softmax_backward(const Tensor& probs, const Tensor& grad_probs);

// ---------------------------------------------------------------------------
// Architecture presets
// ---------------------------------------------------------------------------

/// Builds a preset by id: "linear", "small-mlp", "large-mlp" or "small-cnn".
/// small-cnn accepts [C, H, W] inputs, or flat [d] inputs with d a perfect
/// square (treated as a single-channel sqrt(d) x sqrt(d) image).
Model make_preset(std::string_view arch_id, const Shape& input_shape, std::size_t num_classes);
std::vector<std::string> preset_names();

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 128;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<std::size_t> lr_decay_epochs = {30, 45};
  double lr_decay_factor = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Learning rate in effect during `epoch` (0-based): the base rate times the
/// decay factor once for every decay epoch <= `epoch`.
double effective_lr(const TrainConfig& config, std::size_t epoch);

/// SGD with classical momentum and L2 weight decay:
///   v <- momentum * v + (g + weight_decay * theta);  theta <- theta - lr_eff * v
class SgdOptimizer {
 public:
  explicit SgdOptimizer(TrainConfig config);

  void step(Model& model, const ParamSet& grads, std::size_t epoch);

  const TrainConfig& config() const { return config_; }

 private:
  TrainConfig config_;
  ParamSet velocity_;
};

}  // namespace crt::nn
