#include "crt/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

#include "crt/error.hpp"
#include "crt/io.hpp"

namespace crt::nn {
namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};

Shape output_shape(const Layer& layer, const Shape& in, std::size_t index) {
  const auto where = [&] { return "layer " + std::to_string(index) + " (" + layer_name(layer) + ")"; };
  return std::visit(
      Overloaded{
          [&](const Dense& d) -> Shape {
            if (in.size() != 1 || in[0] != d.in) {
              throw ShapeError(where() + " expects [" + std::to_string(d.in) + "], got " + shape_string(in));
            }
            return {d.out};
          },
          [&](const Conv2d& c) -> Shape {
            if (in.size() != 3 || in[0] != c.in_channels) {
              throw ShapeError(where() + " expects [" + std::to_string(c.in_channels) + ",H,W], got " +
                               shape_string(in));
            }
            if (in[1] + 2 * c.padding < c.kernel || in[2] + 2 * c.padding < c.kernel) {
              throw ShapeError(where() + " kernel larger than padded input " + shape_string(in));
            }
            return {c.out_channels, in[1] + 2 * c.padding - c.kernel + 1, in[2] + 2 * c.padding - c.kernel + 1};
          },
          [&](const Relu&) -> Shape { return in; },
          [&](const MaxPool2d& p) -> Shape {
            if (in.size() != 3 || p.window == 0 || in[1] < p.window || in[2] < p.window) {
              throw ShapeError(where() + " cannot pool " + shape_string(in));
            }
            return {in[0], in[1] / p.window, in[2] / p.window};
          },
          [&](const Reshape& r) -> Shape {
            if (shape_size(r.shape) != shape_size(in)) {
              throw ShapeError(where() + " cannot reshape " + shape_string(in) + " to " + shape_string(r.shape));
            }
            return r.shape;
          },
      },
      layer);
}

Shape batched(std::size_t batch, const Shape& sample) {
  Shape s{batch};
  s.insert(s.end(), sample.begin(), sample.end());
  return s;
}

// ----- kernels --------------------------------------------------------------

void dense_forward(const Tensor& x, const Tensor& w, const Tensor& b, Tensor& y) {
  const std::size_t batch = x.dim(0);
  const std::size_t in = w.dim(0);
  const std::size_t out = w.dim(1);
  const double* wp = w.data().data();
  for (std::size_t n = 0; n < batch; ++n) {
    const double* xr = x.row(n).data();
    double* yr = y.row(n).data();
    std::copy(b.data().begin(), b.data().end(), yr);
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = xr[i];
      const double* wr = wp + i * out;
      for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wr[o];
    }
  }
}

void dense_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dw, Tensor& db, Tensor* dx) {
  const std::size_t batch = x.dim(0);
  const std::size_t in = w.dim(0);
  const std::size_t out = w.dim(1);
  const double* wp = w.data().data();
  double* dwp = dw.data().data();
  double* dbp = db.data().data();
  for (std::size_t n = 0; n < batch; ++n) {
    const double* xr = x.row(n).data();
    const double* gr = dy.row(n).data();
    for (std::size_t o = 0; o < out; ++o) dbp[o] += gr[o];
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = xr[i];
      double* dwr = dwp + i * out;
      for (std::size_t o = 0; o < out; ++o) dwr[o] += xi * gr[o];
    }
    if (dx) {
      double* dxr = dx->row(n).data();
      for (std::size_t i = 0; i < in; ++i) {
        const double* wr = wp + i * out;
        double acc = 0.0;
        for (std::size_t o = 0; o < out; ++o) acc += wr[o] * gr[o];
        dxr[i] = acc;
      }
    }
  }
}

struct ConvGeometry {
  std::size_t channels, height, width, out_channels, out_height, out_width, kernel, padding;

  // Valid output range along one axis for kernel offset `k`: input index
  // o + k - padding must land in [0, extent).
  std::pair<std::size_t, std::size_t> range(std::size_t k, std::size_t extent, std::size_t out_extent) const {
    const std::size_t lo = padding > k ? padding - k : 0;
    const std::size_t hi_raw = extent + padding > k ? extent + padding - k : 0;
    return {lo, std::min(out_extent, hi_raw)};
  }
};

ConvGeometry conv_geometry(const Conv2d& c, const Shape& in) {
  return {in[0], in[1], in[2], c.out_channels, in[1] + 2 * c.padding - c.kernel + 1,
          in[2] + 2 * c.padding - c.kernel + 1, c.kernel, c.padding};
}

void conv_forward(const ConvGeometry& g, const Tensor& x, const Tensor& w, const Tensor& b, Tensor& y) {
  const std::size_t batch = x.dim(0);
  const std::size_t in_plane = g.height * g.width;
  const std::size_t out_plane = g.out_height * g.out_width;
  for (std::size_t n = 0; n < batch; ++n) {
    const double* xs = x.row(n).data();
    double* ys = y.row(n).data();
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      double* yo = ys + o * out_plane;
      std::fill(yo, yo + out_plane, b[o]);
      for (std::size_t c = 0; c < g.channels; ++c) {
        const double* xc = xs + c * in_plane;
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
          const auto [ylo, yhi] = g.range(ki, g.height, g.out_height);
          for (std::size_t kj = 0; kj < g.kernel; ++kj) {
            const auto [xlo, xhi] = g.range(kj, g.width, g.out_width);
            const double wv = w[((o * g.channels + c) * g.kernel + ki) * g.kernel + kj];
            for (std::size_t yy = ylo; yy < yhi; ++yy) {
              const double* xrow = xc + (yy + ki - g.padding) * g.width + kj - g.padding;
              double* yrow = yo + yy * g.out_width;
              for (std::size_t xx = xlo; xx < xhi; ++xx) yrow[xx] += wv * xrow[xx];
            }
          }
        }
      }
    }
  }
}

void conv_backward(const ConvGeometry& g, const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dw,
                   Tensor& db, Tensor* dx) {
  const std::size_t batch = x.dim(0);
  const std::size_t in_plane = g.height * g.width;
  const std::size_t out_plane = g.out_height * g.out_width;
  for (std::size_t n = 0; n < batch; ++n) {
    const double* xs = x.row(n).data();
    const double* gs = dy.row(n).data();
    double* dxs = dx ? dx->row(n).data() : nullptr;
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      const double* go = gs + o * out_plane;
      double bias_acc = 0.0;
      for (std::size_t i = 0; i < out_plane; ++i) bias_acc += go[i];
      db[o] += bias_acc;
      for (std::size_t c = 0; c < g.channels; ++c) {
        const double* xc = xs + c * in_plane;
        double* dxc = dxs ? dxs + c * in_plane : nullptr;
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
          const auto [ylo, yhi] = g.range(ki, g.height, g.out_height);
          for (std::size_t kj = 0; kj < g.kernel; ++kj) {
            const auto [xlo, xhi] = g.range(kj, g.width, g.out_width);
            const std::size_t widx = ((o * g.channels + c) * g.kernel + ki) * g.kernel + kj;
            const double wv = w[widx];
            double acc = 0.0;
            for (std::size_t yy = ylo; yy < yhi; ++yy) {
              const std::size_t in_off = (yy + ki - g.padding) * g.width + kj - g.padding;
              const double* xrow = xc + in_off;
              const double* grow = go + yy * g.out_width;
              for (std::size_t xx = xlo; xx < xhi; ++xx) acc += grow[xx] * xrow[xx];
              if (dxc) {
                double* dxrow = dxc + in_off;
                for (std::size_t xx = xlo; xx < xhi; ++xx) dxrow[xx] += wv * grow[xx];
              }
            }
            dw[widx] += acc;
          }
        }
      }
    }
  }
}

std::size_t pool_argmax(const double* plane, std::size_t width, std::size_t oy, std::size_t ox, std::size_t window) {
  std::size_t best = oy * window * width + ox * window;
  for (std::size_t dy = 0; dy < window; ++dy) {
    for (std::size_t dx = 0; dx < window; ++dx) {
      const std::size_t idx = (oy * window + dy) * width + ox * window + dx;
      if (plane[idx] > plane[best]) best = idx;
    }
  }
  return best;
}

}  // namespace

std::string layer_name(const Layer& layer) {
  return std::visit(Overloaded{
                        [](const Dense& d) { return "dense(" + std::to_string(d.in) + "->" + std::to_string(d.out) + ")"; },
                        [](const Conv2d& c) {
                          return "conv2d(" + std::to_string(c.in_channels) + "->" + std::to_string(c.out_channels) +
                                 ",k" + std::to_string(c.kernel) + ",p" + std::to_string(c.padding) + ")";
                        },
                        [](const Relu&) { return std::string("relu"); },
                        [](const MaxPool2d& p) { return "maxpool(" + std::to_string(p.window) + ")"; },
                        [](const Reshape& r) { return "reshape" + shape_string(r.shape); },
                    },
                    layer);
}

const Tensor* find_param(const ParamSet& set, std::string_view name) {
  for (const auto& p : set) {
    if (p.name == name) return &p.value;
  }
  return nullptr;
}

Tensor* find_param(ParamSet& set, std::string_view name) {
  for (auto& p : set) {
    if (p.name == name) return &p.value;
  }
  return nullptr;
}

Model::Model(std::string arch_id, Shape input_shape, std::size_t num_classes, std::vector<Layer> layers)
    : arch_id_(std::move(arch_id)),
      input_shape_(std::move(input_shape)),
      num_classes_(num_classes),
      layers_(std::move(layers)) {
  if (input_shape_.empty() || shape_size(input_shape_) == 0) {
    throw ShapeError("model input shape must be non-empty, got " + shape_string(input_shape_));
  }
  Shape shape = input_shape_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layer_inputs_.push_back(shape);
    const Shape next = output_shape(layers_[i], shape, i);
    if (const auto* d = std::get_if<Dense>(&layers_[i])) {
      params_.push_back({std::to_string(i) + ".weight", Tensor({d->in, d->out})});
      params_.push_back({std::to_string(i) + ".bias", Tensor({d->out})});
    } else if (const auto* c = std::get_if<Conv2d>(&layers_[i])) {
      params_.push_back(
          {std::to_string(i) + ".weight", Tensor({c->out_channels, c->in_channels, c->kernel, c->kernel})});
      params_.push_back({std::to_string(i) + ".bias", Tensor({c->out_channels})});
    }
    shape = next;
  }
  if (shape != Shape{num_classes_}) {
    throw ShapeError("model '" + arch_id_ + "' produces " + shape_string(shape) + ", expected [" +
                     std::to_string(num_classes_) + "] logits");
  }
}

Tensor& Model::param(std::string_view name) {
  if (Tensor* t = find_param(params_, name)) return *t;
  throw InvalidParameter("no parameter named '" + std::string(name) + "'");
}

const Tensor& Model::param(std::string_view name) const {
  if (const Tensor* t = find_param(params_, name)) return *t;
  throw InvalidParameter("no parameter named '" + std::string(name) + "'");
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void Model::init_parameters(stats::RngStream& rng) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    std::size_t fan_in = 0;
    if (const auto* d = std::get_if<Dense>(&layers_[i])) {
      fan_in = d->in;
    } else if (const auto* c = std::get_if<Conv2d>(&layers_[i])) {
      fan_in = c->in_channels * c->kernel * c->kernel;
    } else {
      continue;
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& v : param(std::to_string(i) + ".weight").data()) v = bound * (2.0 * rng.uniform() - 1.0);
    for (double& v : param(std::to_string(i) + ".bias").data()) v = 0.0;
  }
}

Tensor Model::forward(const Tensor& batch) const {
  Tape scratch;
  return forward(batch, scratch);
}

Tensor Model::forward(const Tensor& batch, Tape& tape) const {
  if (batch.rank() != input_shape_.size() + 1 ||
      !std::equal(input_shape_.begin(), input_shape_.end(), batch.shape().begin() + 1)) {
    throw ShapeError("model '" + arch_id_ + "' expects batches of " + shape_string(input_shape_) + ", got " +
                     shape_string(batch.shape()));
  }
  const std::size_t n = batch.dim(0);
  tape.inputs_.clear();
  tape.inputs_.reserve(layers_.size());
  tape.model_tag_ = reinterpret_cast<std::uintptr_t>(this);

  Tensor current = batch;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Shape out_sample = output_shape(layers_[i], layer_inputs_[i], i);
    Tensor next(batched(n, out_sample));
    std::visit(Overloaded{
                   [&](const Dense&) {
                     const std::string idx = std::to_string(i);
                     dense_forward(current, param(idx + ".weight"), param(idx + ".bias"), next);
                   },
                   [&](const Conv2d& c) {
                     const std::string idx = std::to_string(i);
                     conv_forward(conv_geometry(c, layer_inputs_[i]), current, param(idx + ".weight"),
                                  param(idx + ".bias"), next);
                   },
                   [&](const Relu&) {
                     auto src = current.data();
                     auto dst = next.data();
                     for (std::size_t k = 0; k < src.size(); ++k) dst[k] = src[k] > 0.0 ? src[k] : 0.0;
                   },
                   [&](const MaxPool2d& p) {
                     const Shape& s = layer_inputs_[i];
                     const std::size_t oh = out_sample[1];
                     const std::size_t ow = out_sample[2];
                     for (std::size_t b = 0; b < n; ++b) {
                       for (std::size_t c = 0; c < s[0]; ++c) {
                         const double* plane = current.row(b).data() + c * s[1] * s[2];
                         double* out = next.row(b).data() + c * oh * ow;
                         for (std::size_t y = 0; y < oh; ++y) {
                           for (std::size_t x = 0; x < ow; ++x) {
                             out[y * ow + x] = plane[pool_argmax(plane, s[2], y, x, p.window)];
                           }
                         }
                       }
                     }
                   },
                   [&](const Reshape&) { std::copy(current.data().begin(), current.data().end(), next.data().begin()); },
               },
               layers_[i]);
    tape.inputs_.push_back(std::move(current));
    current = std::move(next);
  }
  return current;
}

std::uint64_t Model::parameter_checksum() const {
  io::Fnv1a h;
  for (const auto& p : params_) {
    h.update(p.name);
    h.update_u64(p.value.rank());
    for (std::size_t d : p.value.shape()) h.update_u64(d);
    for (double v : p.value.data()) h.update_double(v);
  }
  return h.value();
}

ParamSet backward(const Model& model, const Tape& tape, const Tensor& grad_logits, Tensor* grad_input) {
  if (!tape.recorded() || tape.model_tag_ != reinterpret_cast<std::uintptr_t>(&model) ||
      tape.inputs_.size() != model.layers_.size()) {
    throw StateError("backward called without a recorded forward pass of this model");
  }
  const std::size_t n = tape.inputs_.front().dim(0);
  if (grad_logits.shape() != Shape{n, model.num_classes_}) {
    throw ShapeError("gradient of logits has shape " + shape_string(grad_logits.shape()) + ", expected " +
                     shape_string(Shape{n, model.num_classes_}));
  }

  ParamSet grads;
  grads.reserve(model.params_.size());
  for (const auto& p : model.params_) grads.push_back({p.name, Tensor(p.value.shape(), 0.0)});

  Tensor grad = grad_logits;
  for (std::size_t i = model.layers_.size(); i-- > 0;) {
    const Tensor& input = tape.inputs_[i];
    const bool need_input_grad = i > 0 || grad_input != nullptr;
    Tensor grad_in(input.shape(), 0.0);
    std::visit(Overloaded{
                   [&](const Dense&) {
                     const std::string idx = std::to_string(i);
                     dense_backward(input, model.param(idx + ".weight"), grad, *find_param(grads, idx + ".weight"),
                                    *find_param(grads, idx + ".bias"), need_input_grad ? &grad_in : nullptr);
                   },
                   [&](const Conv2d& c) {
                     const std::string idx = std::to_string(i);
                     conv_backward(conv_geometry(c, model.layer_inputs_[i]), input, model.param(idx + ".weight"), grad,
                                   *find_param(grads, idx + ".weight"), *find_param(grads, idx + ".bias"),
                                   need_input_grad ? &grad_in : nullptr);
                   },
                   [&](const Relu&) {
                     auto x = input.data();
                     auto g = grad.data();
                     auto d = grad_in.data();
                     for (std::size_t k = 0; k < x.size(); ++k) d[k] = x[k] > 0.0 ? g[k] : 0.0;
                   },
                   [&](const MaxPool2d& p) {
                     const Shape& s = model.layer_inputs_[i];
                     const std::size_t oh = s[1] / p.window;
                     const std::size_t ow = s[2] / p.window;
                     for (std::size_t b = 0; b < n; ++b) {
                       for (std::size_t c = 0; c < s[0]; ++c) {
                         const double* plane = input.row(b).data() + c * s[1] * s[2];
                         double* dplane = grad_in.row(b).data() + c * s[1] * s[2];
                         const double* g = grad.row(b).data() + c * oh * ow;
                         for (std::size_t y = 0; y < oh; ++y) {
                           for (std::size_t x = 0; x < ow; ++x) {
                             dplane[pool_argmax(plane, s[2], y, x, p.window)] += g[y * ow + x];
                           }
                         }
                       }
                     }
                   },
                   [&](const Reshape&) { std::copy(grad.data().begin(), grad.data().end(), grad_in.data().begin()); },
               },
               model.layers_[i]);
    grad = std::move(grad_in);
  }
  if (grad_input) *grad_input = std::move(grad);
  return grads;
}

// ----- outputs and losses ----------------------------------------------------

SoftmaxOutput softmax(std::span<const double> logits) {
  if (logits.empty()) throw InvalidParameter("softmax of an empty vector");
  double top = -std::numeric_limits<double>::infinity();
  for (double z : logits) {
    if (!std::isfinite(z)) throw NumericError("softmax: non-finite logit");
    top = std::max(top, z);
  }
  SoftmaxOutput out{std::vector<double>(logits.size())};
  double total = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out.probs[k] = std::exp(logits[k] - top);
    total += out.probs[k];
  }
  for (double& p : out.probs) p /= total;
  return out;
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax_rows expects [B,K], got " + shape_string(logits.shape()));
  Tensor probs(logits.shape());
  for (std::size_t b = 0; b < logits.dim(0); ++b) {
    const SoftmaxOutput s = softmax(logits.row(b));
    std::copy(s.probs.begin(), s.probs.end(), probs.row(b).begin());
  }
  return probs;
}

double cross_entropy(const SoftmaxOutput& probs, std::size_t label) {
  if (label >= probs.probs.size()) {
    throw InvalidParameter("label " + std::to_string(label) + " out of range for " +
                           std::to_string(probs.probs.size()) + " classes");
  }
  return -std::log(std::max(probs.probs[label], 1e-12));
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < values.size(); ++k) {
    if (values[k] > values[best]) best = k;
  }
  return best;
}

LossGrad cross_entropy_batch(const Tensor& logits, std::span<const std::uint32_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy_batch: logits " + shape_string(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0);
  const double scale = 1.0 / static_cast<double>(n);
  LossGrad out{0.0, Tensor(logits.shape())};
  for (std::size_t b = 0; b < n; ++b) {
    SoftmaxOutput s = softmax(logits.row(b));
    out.loss += cross_entropy(s, labels[b]);
    auto g = out.grad_logits.row(b);
    for (std::size_t k = 0; k < s.probs.size(); ++k) g[k] = s.probs[k] * scale;
    g[labels[b]] -= scale;
  }
  out.loss *= scale;
  return out;
}

Tensor softmax_backward(const Tensor& probs, const Tensor& grad_probs) {
  if (probs.shape() != grad_probs.shape() || probs.rank() != 2) {
    throw ShapeError("softmax_backward: mismatched shapes " + shape_string(probs.shape()) + " and " +
                     shape_string(grad_probs.shape()));
  }
  Tensor out(probs.shape());
  for (std::size_t b = 0; b < probs.dim(0); ++b) {
    const auto p = probs.row(b);
    const auto g = grad_probs.row(b);
    auto d = out.row(b);
    double dot = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) dot += p[k] * g[k];
    for (std::size_t k = 0; k < p.size(); ++k) d[k] = p[k] * (g[k] - dot);
  }
  return out;
}

// ----- presets ---------------------------------------------------------------

std::vector<std::string> preset_names() { return {"linear", "small-mlp", "large-mlp", "small-cnn"}; }

Model make_preset(std::string_view arch_id, const Shape& input_shape, std::size_t num_classes) {
  if (num_classes < 2) throw InvalidParameter("a classifier needs at least 2 classes");
  const std::size_t d = shape_size(input_shape);
  std::vector<Layer> layers;
  const auto flatten_if_needed = [&] {
    if (input_shape.size() != 1) layers.emplace_back(Reshape{{d}});
  };

  if (arch_id == "linear") {
    flatten_if_needed();
    layers.emplace_back(Dense{d, num_classes});
  } else if (arch_id == "small-mlp") {
    flatten_if_needed();
    layers.insert(layers.end(), {Dense{d, 32}, Relu{}, Dense{32, num_classes}});
  } else if (arch_id == "large-mlp") {
    flatten_if_needed();
    layers.insert(layers.end(), {Dense{d, 64}, Relu{}, Dense{64, 64}, Relu{}, Dense{64, num_classes}});
  } else if (arch_id == "small-cnn") {
    Shape image = input_shape;
    if (input_shape.size() == 1) {
      const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(d))));
      if (side * side != d) {
        throw ShapeError("small-cnn needs [C,H,W] input or a flat input of square size, got " +
                         shape_string(input_shape));
      }
      image = {1, side, side};
      layers.emplace_back(Reshape{image});
    } else if (input_shape.size() != 3) {
      throw ShapeError("small-cnn needs [C,H,W] input, got " + shape_string(input_shape));
    }
    constexpr std::size_t channels = 16;
    const std::size_t pooled = channels * (image[1] / 2) * (image[2] / 2);
    layers.insert(layers.end(), {Conv2d{image[0], channels, 3, 1}, Relu{}, MaxPool2d{2}, Reshape{{pooled}},
                                 Dense{pooled, 128}, Relu{}, Dense{128, num_classes}});
  } else {
    throw InvalidParameter("unknown architecture preset '" + std::string(arch_id) + "'");
  }
  return Model(std::string(arch_id), input_shape, num_classes, std::move(layers));
}

}  // namespace crt::nn
