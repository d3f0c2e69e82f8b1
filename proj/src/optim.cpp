#include <cmath>
#include <string>

#include "crt/error.hpp"
#include "crt/nn.hpp"

namespace crt::nn {

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidParameter("train.lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidParameter("train.momentum must lie in [0,1)");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw InvalidParameter("train.weight_decay must be >= 0");
  }
  if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) {
    throw InvalidParameter("train.lr_decay_factor must lie in (0,1]");
  }
  if (batch_size == 0) throw InvalidParameter("train.batch_size must be >= 1");
}

double effective_lr(const TrainConfig& config, std::size_t epoch) {
  double lr = config.lr;
  for (std::size_t e : config.lr_decay_epochs) {
    if (epoch >= e) lr *= config.lr_decay_factor;
  }
  return lr;
}

SgdOptimizer::SgdOptimizer(TrainConfig config) : config_(std::move(config)) {
  // lr = 0 is allowed here (a frozen step); trainers validate the full config.
  if (!(config_.lr >= 0.0) || !(config_.momentum >= 0.0 && config_.momentum < 1.0) ||
      !(config_.weight_decay >= 0.0)) {
    throw InvalidParameter("invalid optimizer settings");
  }
}

void SgdOptimizer::step(Model& model, const ParamSet& grads, std::size_t epoch) {
  if (velocity_.empty()) {
    for (const auto& p : model.params()) velocity_.push_back({p.name, Tensor(p.value.shape(), 0.0)});
  }
  const double lr = effective_lr(config_, epoch);
  const double mu = config_.momentum;
  const double wd = config_.weight_decay;
  for (auto& [name, theta] : model.params()) {
    const Tensor* g = find_param(grads, name);
    if (!g) throw InvalidParameter("missing gradient for parameter '" + name + "'");
    if (g->shape() != theta.shape()) {
      throw ShapeError("gradient for '" + name + "' has shape " + shape_string(g->shape()));
    }
    Tensor* v = find_param(velocity_, name);
    if (!v) throw StateError("optimizer state has no buffer for '" + name + "'");
    auto th = theta.data();
    auto gv = g->data();
    auto vv = v->data();
    for (std::size_t i = 0; i < th.size(); ++i) {
      vv[i] = mu * vv[i] + (gv[i] + wd * th[i]);
      th[i] -= lr * vv[i];
    }
  }
}

}  // namespace crt::nn
