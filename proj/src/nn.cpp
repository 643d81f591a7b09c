#include "fedoptima/nn.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace fedoptima {

namespace {

constexpr std::uint64_t kFloatBytes = 4;

void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

}  // namespace

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Relu: return "relu";
    case LayerKind::Conv2d3x3: return "conv2d-3x3";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Classifier: return "softmax-classifier";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
  if (name == "dense") return LayerKind::Dense;
  if (name == "relu") return LayerKind::Relu;
  if (name == "conv2d-3x3" || name == "conv") return LayerKind::Conv2d3x3;
  if (name == "flatten") return LayerKind::Flatten;
  if (name == "softmax-classifier" || name == "classifier") return LayerKind::Classifier;
  throw std::invalid_argument("unknown layer kind: " + name);
}

bool LayerSpec::parameterized() const {
  return kind == LayerKind::Dense || kind == LayerKind::Conv2d3x3 || kind == LayerKind::Classifier;
}

std::vector<Shape> LayerSpec::parameter_shapes() const {
  switch (kind) {
    case LayerKind::Dense:
    case LayerKind::Classifier:
      return {{out_dims[0], in_dims[0]}, {out_dims[0]}};
    case LayerKind::Conv2d3x3:
      return {{out_dims[0], in_dims[0], 3, 3}, {out_dims[0]}};
    default:
      return {};
  }
}

LayerSpec dense_layer(std::size_t in, std::size_t out) {
  return {LayerKind::Dense, {in}, {out}, 2 * in * out, out * kFloatBytes};
}

LayerSpec relu_layer(Shape dims) {
  const std::uint64_t n = shape_size(dims);
  return {LayerKind::Relu, dims, dims, n, n * kFloatBytes};
}

LayerSpec conv3x3_layer(std::size_t channels_in, std::size_t channels_out, std::size_t height,
                        std::size_t width) {
  return {LayerKind::Conv2d3x3,
          {channels_in, height, width},
          {channels_out, height, width},
          2 * 9 * channels_in * channels_out * height * width,
          channels_out * height * width * kFloatBytes};
}

LayerSpec flatten_layer(Shape in_dims) {
  const std::uint64_t n = shape_size(in_dims);
  return {LayerKind::Flatten, std::move(in_dims), {n}, 0, n * kFloatBytes};
}

LayerSpec classifier_layer(std::size_t in, std::size_t classes) {
  LayerSpec layer = dense_layer(in, classes);
  layer.kind = LayerKind::Classifier;
  return layer;
}

NetworkSpec::NetworkSpec(std::vector<LayerSpec> layers) : layers_(std::move(layers)) {
  require(!layers_.empty(), "network spec must contain at least one layer");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& layer = layers_[i];
    if (layer.kind == LayerKind::Classifier) {
      require(i + 1 == layers_.size(), "classifier must be the final layer");
    }
    if (layer.parameterized()) {
      require(layer.flops_per_sample > 0 && layer.output_bytes_per_sample > 0,
              "parameterized layer " + std::to_string(i) + " needs positive cost figures");
    }
    if (i > 0) {
      require(layers_[i - 1].out_dims == layer.in_dims,
              "layer " + std::to_string(i) + " input " + shape_to_string(layer.in_dims) +
                  " does not chain with previous output " + shape_to_string(layers_[i - 1].out_dims));
    }
  }
}

std::vector<std::size_t> NetworkSpec::split_eligible() const {
  std::vector<std::size_t> eligible;
  for (std::size_t l = 1; l < layers_.size(); ++l) {
    const bool head = std::any_of(layers_.begin(), layers_.begin() + static_cast<std::ptrdiff_t>(l),
                                  [](const LayerSpec& s) { return s.parameterized(); });
    const bool tail = std::any_of(layers_.begin() + static_cast<std::ptrdiff_t>(l), layers_.end(),
                                  [](const LayerSpec& s) { return s.parameterized(); });
    if (head && tail) eligible.push_back(l);
  }
  return eligible;
}

NetworkSpec NetworkSpec::slice(std::size_t begin, std::size_t end) const {
  require(begin < end && end <= layers_.size(), "invalid network slice");
  return NetworkSpec(std::vector<LayerSpec>(layers_.begin() + static_cast<std::ptrdiff_t>(begin),
                                            layers_.begin() + static_cast<std::ptrdiff_t>(end)));
}

NetworkSpec NetworkSpec::concat(const NetworkSpec& tail) const {
  std::vector<LayerSpec> all = layers_;
  all.insert(all.end(), tail.layers_.begin(), tail.layers_.end());
  return NetworkSpec(std::move(all));
}

std::vector<Shape> NetworkSpec::parameter_shapes() const {
  std::vector<Shape> shapes;
  for (const auto& layer : layers_) {
    for (auto& s : layer.parameter_shapes()) shapes.push_back(std::move(s));
  }
  return shapes;
}

std::size_t NetworkSpec::parameter_count() const {
  std::size_t n = 0;
  for (const auto& s : parameter_shapes()) n += shape_size(s);
  return n;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

bool ParameterSet::same_shapes(std::span<const Tensor> other) const {
  if (other.size() != tensors.size()) return false;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].shape() != other[i].shape()) return false;
  }
  return true;
}

bool ParameterSet::same_shapes(const ParameterSet& other) const {
  return same_shapes(std::span<const Tensor>(other.tensors));
}

ParameterSet init_parameters(const NetworkSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterSet params;
  for (const auto& layer : spec.layers()) {
    if (!layer.parameterized()) continue;
    const auto shapes = layer.parameter_shapes();
    const std::size_t fan_in = shape_size(shapes[0]) / shapes[0][0];
    const float bound = std::sqrt(1.0F / static_cast<float>(fan_in));
    std::uniform_real_distribution<float> dist(-bound, bound);
    for (const auto& shape : shapes) {
      Tensor t(shape);
      for (float& v : t.data()) v = dist(rng);
      params.tensors.push_back(std::move(t));
    }
  }
  return params;
}

std::pair<ParameterSet, ParameterSet> split_parameters(const NetworkSpec& spec,
                                                       const ParameterSet& params,
                                                       std::size_t split) {
  std::size_t head_tensors = 0;
  for (std::size_t i = 0; i < split && i < spec.size(); ++i) {
    head_tensors += spec[i].parameter_shapes().size();
  }
  require(head_tensors <= params.size(), "parameter set smaller than network");
  ParameterSet head;
  ParameterSet tail;
  head.version = tail.version = params.version;
  head.tensors.assign(params.tensors.begin(), params.tensors.begin() + static_cast<std::ptrdiff_t>(head_tensors));
  tail.tensors.assign(params.tensors.begin() + static_cast<std::ptrdiff_t>(head_tensors), params.tensors.end());
  return {std::move(head), std::move(tail)};
}

ParameterSet concat_parameters(const ParameterSet& head, const ParameterSet& tail) {
  ParameterSet out = head;
  out.tensors.insert(out.tensors.end(), tail.tensors.begin(), tail.tensors.end());
  return out;
}

// ---------------------------------------------------------------------------
// Layer kernels. Batch is always dimension 0.

namespace {

Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t batch = x.dim(0);
  const std::size_t in = w.dim(1);
  const std::size_t out = w.dim(0);
  Tensor y({batch, out});
  const float* xp = x.raw();
  const float* wp = w.raw();
  float* yp = y.raw();
  for (std::size_t n = 0; n < batch; ++n) {
    const float* xr = xp + n * in;
    for (std::size_t o = 0; o < out; ++o) {
      const float* wr = wp + o * in;
      float acc = b[o];
      for (std::size_t i = 0; i < in; ++i) acc += wr[i] * xr[i];
      yp[n * out + o] = acc;
    }
  }
  return y;
}

void dense_backward(const Tensor& x, const Tensor& w, const Tensor& gy, Tensor& gx, Tensor& gw,
                    Tensor& gb) {
  const std::size_t batch = x.dim(0);
  const std::size_t in = w.dim(1);
  const std::size_t out = w.dim(0);
  gx = Tensor(x.shape());
  gw = Tensor(w.shape());
  gb = Tensor({out});
  const float* xp = x.raw();
  const float* wp = w.raw();
  const float* gyp = gy.raw();
  float* gxp = gx.raw();
  float* gwp = gw.raw();
  for (std::size_t n = 0; n < batch; ++n) {
    const float* xr = xp + n * in;
    float* gxr = gxp + n * in;
    for (std::size_t o = 0; o < out; ++o) {
      const float g = gyp[n * out + o];
      if (g == 0.0F) continue;
      gb[o] += g;
      float* gwr = gwp + o * in;
      const float* wr = wp + o * in;
      for (std::size_t i = 0; i < in; ++i) {
        gwr[i] += g * xr[i];
        gxr[i] += g * wr[i];
      }
    }
  }
}

Tensor conv_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t batch = x.dim(0);
  const std::size_t cin = x.dim(1);
  const std::size_t h = x.dim(2);
  const std::size_t wd = x.dim(3);
  const std::size_t cout = w.dim(0);
  Tensor y({batch, cout, h, wd});
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < wd; ++c) {
          float acc = b[co];
          for (std::size_t ci = 0; ci < cin; ++ci) {
            for (std::size_t kr = 0; kr < 3; ++kr) {
              const std::ptrdiff_t rr = static_cast<std::ptrdiff_t>(r + kr) - 1;
              if (rr < 0 || rr >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t kc = 0; kc < 3; ++kc) {
                const std::ptrdiff_t cc = static_cast<std::ptrdiff_t>(c + kc) - 1;
                if (cc < 0 || cc >= static_cast<std::ptrdiff_t>(wd)) continue;
                acc += w[((co * cin + ci) * 3 + kr) * 3 + kc] *
                       x[((n * cin + ci) * h + static_cast<std::size_t>(rr)) * wd + static_cast<std::size_t>(cc)];
              }
            }
          }
          y[((n * cout + co) * h + r) * wd + c] = acc;
        }
      }
    }
  }
  return y;
}

void conv_backward(const Tensor& x, const Tensor& w, const Tensor& gy, Tensor& gx, Tensor& gw,
                   Tensor& gb) {
  const std::size_t batch = x.dim(0);
  const std::size_t cin = x.dim(1);
  const std::size_t h = x.dim(2);
  const std::size_t wd = x.dim(3);
  const std::size_t cout = w.dim(0);
  gx = Tensor(x.shape());
  gw = Tensor(w.shape());
  gb = Tensor({cout});
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < wd; ++c) {
          const float g = gy[((n * cout + co) * h + r) * wd + c];
          if (g == 0.0F) continue;
          gb[co] += g;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            for (std::size_t kr = 0; kr < 3; ++kr) {
              const std::ptrdiff_t rr = static_cast<std::ptrdiff_t>(r + kr) - 1;
              if (rr < 0 || rr >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t kc = 0; kc < 3; ++kc) {
                const std::ptrdiff_t cc = static_cast<std::ptrdiff_t>(c + kc) - 1;
                if (cc < 0 || cc >= static_cast<std::ptrdiff_t>(wd)) continue;
                const std::size_t xi =
                    ((n * cin + ci) * h + static_cast<std::size_t>(rr)) * wd + static_cast<std::size_t>(cc);
                const std::size_t wi = ((co * cin + ci) * 3 + kr) * 3 + kc;
                gw[wi] += g * x[xi];
                gx[xi] += g * w[wi];
              }
            }
          }
        }
      }
    }
  }
}

Shape batched(std::size_t batch, const Shape& dims) {
  Shape s{batch};
  s.insert(s.end(), dims.begin(), dims.end());
  return s;
}

}  // namespace

struct ForwardAccess {
  static ForwardResult run(const NetworkSpec& spec, const ParameterSet& params, const Tensor& input,
                           bool record) {
    require(!spec.empty(), "forward on empty network");
    require(input.rank() >= 1, "input must carry a batch dimension");
    const std::size_t batch = input.dim(0);
    require(input.shape() == batched(batch, spec.input_dims()),
            "input shape " + shape_to_string(input.shape()) + " does not match network input " +
                shape_to_string(spec.input_dims()));
    require(params.size() == spec.parameter_shapes().size(), "parameter count does not match network");
    input.require_finite("forward input");

    ForwardResult result;
    Tape tape;
    if (record) tape.inputs_.reserve(spec.size());

    Tensor current = input;
    std::size_t p = 0;
    for (const auto& layer : spec.layers()) {
      Tensor next;
      switch (layer.kind) {
        case LayerKind::Dense:
        case LayerKind::Classifier:
          next = dense_forward(current, params.tensors[p], params.tensors[p + 1]);
          p += 2;
          break;
        case LayerKind::Conv2d3x3:
          next = conv_forward(current, params.tensors[p], params.tensors[p + 1]);
          p += 2;
          break;
        case LayerKind::Relu:
          next = current;
          for (float& v : next.data()) v = v > 0.0F ? v : 0.0F;
          break;
        case LayerKind::Flatten:
          next = current.reshaped(batched(batch, layer.out_dims));
          break;
      }
      if (record) tape.inputs_.push_back(std::move(current));
      current = std::move(next);
    }
    current.require_finite("forward output");
    result.output = std::move(current);
    if (record) {
      tape.spec_ = spec;
      tape.params_ = params;
      tape.valid_ = true;
      result.tape = std::move(tape);
    }
    return result;
  }

  static Gradients reverse(Tape& tape, const Tensor& loss_grad) {
    if (!tape.valid_) throw TapeError("backward on a missing or consumed tape");
    tape.valid_ = false;
    const NetworkSpec& spec = tape.spec_;
    const ParameterSet& params = tape.params_;
    const std::size_t batch = tape.inputs_.front().dim(0);
    require(loss_grad.shape() == batched(batch, spec.output_dims()),
            "loss gradient shape " + shape_to_string(loss_grad.shape()) + " does not match output");

    Gradients grads;
    grads.params.resize(params.size());
    std::size_t p = params.size();
    Tensor g = loss_grad;
    for (std::size_t li = spec.size(); li-- > 0;) {
      const LayerSpec& layer = spec[li];
      const Tensor& x = tape.inputs_[li];
      Tensor gx;
      switch (layer.kind) {
        case LayerKind::Dense:
        case LayerKind::Classifier:
          p -= 2;
          dense_backward(x, params.tensors[p], g, gx, grads.params[p], grads.params[p + 1]);
          break;
        case LayerKind::Conv2d3x3:
          p -= 2;
          conv_backward(x, params.tensors[p], g, gx, grads.params[p], grads.params[p + 1]);
          break;
        case LayerKind::Relu:
          gx = std::move(g);
          for (std::size_t i = 0; i < gx.size(); ++i) {
            if (!(x[i] > 0.0F)) gx[i] = 0.0F;
          }
          break;
        case LayerKind::Flatten:
          gx = g.reshaped(x.shape());
          break;
      }
      g = std::move(gx);
    }
    grads.input = std::move(g);
    tape.inputs_.clear();
    for (const auto& t : grads.params) t.require_finite("backward");
    return grads;
  }
};

ForwardResult forward(const NetworkSpec& spec, const ParameterSet& params, const Tensor& input,
                      bool record) {
  return ForwardAccess::run(spec, params, input, record);
}

Gradients backward(Tape& tape, const Tensor& loss_grad) {
  return ForwardAccess::reverse(tape, loss_grad);
}

void sgd_step(ParameterSet& params, std::span<const Tensor> grads, float lr) {
  if (!(lr >= 0.0F)) throw std::invalid_argument("learning rate must be non-negative");
  require(params.same_shapes(grads), "gradient shapes do not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params.tensors[i].data();
    auto g = grads[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
  }
}

LossResult cross_entropy_loss(const Tensor& logits, std::span<const std::uint32_t> labels) {
  require(logits.rank() == 2, "logits must be [batch, classes]");
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  require(batch == labels.size(), "logits rows do not match label count");
  require(batch > 0, "empty batch");
  LossResult result;
  result.grad = Tensor(logits.shape());
  double total = 0.0;
  const float inv_batch = 1.0F / static_cast<float>(batch);
  for (std::size_t n = 0; n < batch; ++n) {
    if (labels[n] >= classes) {
      throw std::out_of_range("label " + std::to_string(labels[n]) + " out of range for " +
                              std::to_string(classes) + " classes");
    }
    const float* row = logits.raw() + n * classes;
    const float peak = *std::max_element(row, row + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(static_cast<double>(row[c] - peak));
    const double log_denom = std::log(denom);
    total += log_denom - static_cast<double>(row[labels[n]] - peak);
    for (std::size_t c = 0; c < classes; ++c) {
      const double prob = std::exp(static_cast<double>(row[c] - peak) - log_denom);
      const double target = c == labels[n] ? 1.0 : 0.0;
      result.grad[n * classes + c] = static_cast<float>(prob - target) * inv_batch;
    }
  }
  result.loss = static_cast<float>(total / static_cast<double>(batch));
  if (!std::isfinite(result.loss)) throw NumericError("non-finite loss");
  return result;
}

double accuracy(const Tensor& logits, std::span<const std::uint32_t> labels) {
  require(logits.rank() == 2 && logits.dim(0) == labels.size(), "logits rows do not match labels");
  if (labels.empty()) return 0.0;
  const std::size_t classes = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const float* row = logits.raw() + n * classes;
    const auto best = static_cast<std::size_t>(std::max_element(row, row + classes) - row);
    if (best == labels[n]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace fedoptima
