#include "crt/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "crt/error.hpp"
#include "crt/io.hpp"
#include "crt/stats.hpp"

namespace crt::train {
namespace {

using Clock = std::chrono::steady_clock;

enum class Method { kStandard, kGaussianAug, kCrt };

std::string_view method_tag(Method m) {
  switch (m) {
    case Method::kStandard:
      return kMethodStandard;
    case Method::kGaussianAug:
      return kMethodGaussianAug;
    case Method::kCrt:
      return kMethodCrt;
  }
  return kMethodStandard;
}

void check_dataset(const data::Dataset& data) {
  if (data.size() == 0) throw InvalidParameter("training set is empty");
  if (data.inputs.rank() < 2 || data.inputs.dim(0) != data.labels.size()) {
    throw InvalidParameter("training set inputs and labels disagree");
  }
}

void shuffle(std::vector<std::size_t>& order, stats::RngStream& rng) {
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = rng.uniform_index(i);
    std::swap(order[i - 1], order[j]);
  }
}

TrainResult run_training(Method method, std::string_view arch, const data::Dataset& data,
                         const nn::TrainConfig& config, double sigma, const nn::Model* teacher,
                         const CrtStepHook* hook, const EpochHook& on_epoch) {
  config.validate();
  check_dataset(data);

  TrainResult result;
  result.model = nn::make_preset(arch, data.sample_shape(), data.num_classes);
  stats::RngStream init_rng(config.seed, 0);
  stats::RngStream order_rng(config.seed, 1);
  stats::RngStream noise_rng(config.seed, 2);
  result.model.init_parameters(init_rng);

  nn::SgdOptimizer optimizer(config);
  nn::Tape tape;
  std::vector<std::size_t> order(data.size());
  std::vector<std::uint32_t> batch_labels;

  const auto loop_start = Clock::now();
  std::chrono::duration<double> hook_time{0.0};
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto epoch_start = Clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order, order_rng);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      Tensor inputs = data.gather(idx);
      if (method != Method::kStandard) stats::add_gaussian(inputs.data(), sigma, noise_rng);

      nn::LossGrad lg;
      if (method == Method::kCrt) {
        if (hook && *hook) (*hook)(inputs, inputs);
        const Tensor teacher_probs = nn::softmax_rows(teacher->forward(inputs));
        const Tensor logits = result.model.forward(inputs, tape);
        CrtLoss crt = crt_loss(teacher_probs, logits);
        lg.loss = crt.loss;
        lg.grad_logits = std::move(crt.grad_logits);
      } else {
        batch_labels.clear();
        for (std::size_t i : idx) batch_labels.push_back(data.labels[i]);
        lg = nn::cross_entropy_batch(result.model.forward(inputs, tape), batch_labels);
      }
      if (!std::isfinite(lg.loss)) {
        throw NumericError(std::string(method_tag(method)) + " training produced a non-finite loss at epoch " +
                           std::to_string(epoch) + ", batch " + std::to_string(batches));
      }
      const nn::ParamSet grads = nn::backward(result.model, tape, lg.grad_logits);
      optimizer.step(result.model, grads, epoch);
      loss_sum += lg.loss;
      ++batches;
    }
    const std::chrono::duration<double> elapsed = Clock::now() - epoch_start;
    result.timings.push_back({epoch, elapsed.count(), std::string(method_tag(method))});
    result.epoch_losses.push_back(loss_sum / static_cast<double>(batches));
    if (on_epoch) {
      const auto hook_start = Clock::now();
      on_epoch(epoch, result.model);
      hook_time += Clock::now() - hook_start;
    }
  }
  const std::chrono::duration<double> total = Clock::now() - loop_start - hook_time;
  result.total_wall_seconds = total.count();

  for (const auto& p : result.model.params()) {
    if (!p.value.all_finite()) throw NumericError("parameter '" + p.name + "' became non-finite during training");
  }
  return result;
}

}  // namespace

void NoiseConfig::validate() const {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) {
    throw InvalidParameter("noise.sigma must be finite and >= 0, got " + std::to_string(sigma));
  }
}

TrainResult train_standard(std::string_view arch, const data::Dataset& data, const nn::TrainConfig& config,
                           const EpochHook& on_epoch) {
  return run_training(Method::kStandard, arch, data, config, 0.0, nullptr, nullptr, on_epoch);
}

TrainResult train_gaussian_aug(std::string_view arch, const data::Dataset& data, const nn::TrainConfig& config,
                               const NoiseConfig& noise, const EpochHook& on_epoch) {
  noise.validate();
  return run_training(Method::kGaussianAug, arch, data, config, noise.sigma, nullptr, nullptr, on_epoch);
}

TrainResult crt_transfer(const nn::Model& teacher, std::string_view student_arch, const data::Dataset& data,
                         const nn::TrainConfig& config, const NoiseConfig& noise, const CrtStepHook& hook,
                         const EpochHook& on_epoch) {
  noise.validate();
  if (teacher.num_classes() != data.num_classes) {
    throw InvalidParameter("teacher has " + std::to_string(teacher.num_classes()) + " classes, dataset has " +
                           std::to_string(data.num_classes));
  }
  if (teacher.input_shape() != data.sample_shape()) {
    throw InvalidParameter("teacher expects inputs " + shape_string(teacher.input_shape()) + ", dataset provides " +
                           shape_string(data.sample_shape()));
  }
  return run_training(Method::kCrt, student_arch, data, config, noise.sigma, &teacher, &hook, on_epoch);
}

double softmax_distance(std::span<const double> teacher_probs, std::span<const double> student_probs) {
  if (teacher_probs.size() != student_probs.size()) throw ShapeError("softmax_distance: length mismatch");
  double sq = 0.0;
  for (std::size_t k = 0; k < teacher_probs.size(); ++k) {
    const double d = teacher_probs[k] - student_probs[k];
    sq += d * d;
  }
  return std::sqrt(sq);
}

CrtLoss crt_loss(const Tensor& teacher_probs, const Tensor& student_logits) {
  if (teacher_probs.shape() != student_logits.shape() || student_logits.rank() != 2) {
    throw ShapeError("crt_loss: teacher " + shape_string(teacher_probs.shape()) + " vs student " +
                     shape_string(student_logits.shape()));
  }
  const std::size_t n = student_logits.dim(0);
  const double scale = 1.0 / static_cast<double>(n);
  const Tensor student_probs = nn::softmax_rows(student_logits);
  Tensor grad_probs(student_probs.shape(), 0.0);
  double loss = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    const auto t = teacher_probs.row(b);
    const auto s = student_probs.row(b);
    const double dist = softmax_distance(t, s);
    loss += dist;
    if (dist > 0.0) {
      auto g = grad_probs.row(b);
      for (std::size_t k = 0; k < s.size(); ++k) g[k] = (s[k] - t[k]) / dist * scale;
    }
  }
  return {loss * scale, nn::softmax_backward(student_probs, grad_probs)};
}

BoundGap lower_bound_gap(const nn::SoftmaxOutput& teacher, const nn::SoftmaxOutput& student, std::size_t label) {
  const auto check = [](const nn::SoftmaxOutput& s, const char* who) {
    double total = 0.0;
    for (double p : s.probs) {
      if (!(p >= 0.0 && p <= 1.0)) throw InvalidParameter(std::string(who) + " probabilities must lie in [0,1]");
      total += p;
    }
    if (std::fabs(total - 1.0) > 1e-9) throw InvalidParameter(std::string(who) + " probabilities must sum to 1");
  };
  check(teacher, "teacher");
  check(student, "student");
  if (teacher.probs.size() != student.probs.size()) throw InvalidParameter("teacher and student class counts differ");
  if (label >= student.probs.size()) throw InvalidParameter("label out of range");
  const double zs = student.probs[label];
  const double zt = teacher.probs[label];
  return {zs, -(zt - zs)};
}

std::vector<ChainStep> run_chain(std::span<const ChainLink> links, const nn::Checkpoint& initial_teacher,
                                 const data::Dataset& data, const NoiseConfig& noise, const ChainCallback& on_link,
                                 const ChainEpochHook& on_epoch) {
  if (links.empty()) throw InvalidParameter("a chain needs at least one link");
  std::vector<ChainStep> steps;
  const nn::Checkpoint* teacher = &initial_teacher;
  for (std::size_t i = 0; i < links.size(); ++i) {
    nn::CheckpointMeta meta;
    meta.sigma = noise.sigma;
    meta.method = std::string(kMethodCrt);
    meta.parent_checksum = nn::checkpoint_checksum(*teacher);
    meta.teacher_sigma = teacher->meta.sigma;
    meta.chain_length = teacher->meta.chain_length + 1;
    EpochHook hook;
    if (on_epoch) {
      hook = [&](std::size_t epoch, const nn::Model& model) { on_epoch(i, epoch, nn::Checkpoint{model, meta}); };
    }
    TrainResult r = crt_transfer(teacher->model, links[i].arch, data, links[i].config, noise, {}, hook);
    steps.push_back({{std::move(r.model), std::move(meta)}, std::move(r.timings)});
    if (on_link) on_link(i, steps.back());
    teacher = &steps.back().checkpoint;
  }
  return steps;
}

std::string format_timing_csv(std::span<const EpochTiming> timings) {
  std::string out = "epoch_index,wall_seconds,method_tag\n";
  char buf[64];
  for (const auto& t : timings) {
    std::snprintf(buf, sizeof buf, "%zu,%.9f,", t.epoch_index, t.wall_seconds);
    out += buf;
    out += t.method_tag;
    out += '\n';
  }
  return out;
}

std::vector<EpochTiming> parse_timing_csv(std::string_view text) {
  const auto lines = io::split(text, '\n');
  if (lines.empty() || io::trim(lines[0]) != "epoch_index,wall_seconds,method_tag") {
    throw FormatError("timing CSV line 1: expected header 'epoch_index,wall_seconds,method_tag'");
  }
  std::vector<EpochTiming> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto line = io::trim(lines[i]);
    if (line.empty()) continue;
    const std::string where = "timing CSV line " + std::to_string(i + 1);
    const auto fields = io::split(line, ',');
    if (fields.size() != 3) throw FormatError(where + ": expected 3 fields");
    EpochTiming t;
    t.epoch_index = io::parse_uint(fields[0], where);
    t.wall_seconds = io::parse_double(fields[1], where);
    t.method_tag = std::string(fields[2]);
    if (!(t.wall_seconds > 0.0)) throw FormatError(where + ": wall_seconds must be positive");
    out.push_back(std::move(t));
  }
  return out;
}

void write_timing_csv(const std::filesystem::path& path, std::span<const EpochTiming> timings) {
  io::write_file_atomic(path, format_timing_csv(timings));
}

std::vector<EpochTiming> read_timing_csv(const std::filesystem::path& path) {
  return parse_timing_csv(io::read_file(path));
}

}  // namespace crt::train
