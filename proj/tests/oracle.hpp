#pragma once

// Reference implementations used only by tests. They are written
// independently of the library code and work in double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <vector>

#include "fedoptima/nn.hpp"
#include "fedoptima/partitioner.hpp"

namespace oracle {

using fedoptima::LayerKind;
using fedoptima::NetworkSpec;
using fedoptima::ParameterSet;
using fedoptima::Tensor;

using Vec = std::vector<double>;

struct Params {
  std::vector<Vec> tensors;
};

inline Params to_double(const ParameterSet& p) {
  Params out;
  for (const auto& t : p.tensors) out.tensors.emplace_back(t.data().begin(), t.data().end());
  return out;
}

inline Vec to_double(const Tensor& t) { return Vec(t.data().begin(), t.data().end()); }

/// Forward of one sample through the network. Records every relu input so
/// callers can detect kink crossings.
inline Vec forward_sample(const NetworkSpec& spec, const Params& p, Vec x, std::vector<Vec>* relu_inputs = nullptr) {
  std::size_t pi = 0;
  for (const auto& layer : spec.layers()) {
    switch (layer.kind) {
      case LayerKind::Dense:
      case LayerKind::Classifier: {
        const std::size_t in = layer.in_dims[0];
        const std::size_t out = layer.out_dims[0];
        const Vec& w = p.tensors[pi];
        const Vec& b = p.tensors[pi + 1];
        Vec y(out);
        for (std::size_t o = 0; o < out; ++o) {
          double acc = b[o];
          for (std::size_t i = 0; i < in; ++i) acc += w[o * in + i] * x[i];
          y[o] = acc;
        }
        x = std::move(y);
        pi += 2;
        break;
      }
      case LayerKind::Relu:
        if (relu_inputs) relu_inputs->push_back(x);
        for (auto& v : x) v = v > 0.0 ? v : 0.0;
        break;
      case LayerKind::Flatten:
        break;
      case LayerKind::Conv2d3x3: {
        const std::size_t cin = layer.in_dims[0];
        const std::size_t h = layer.in_dims[1];
        const std::size_t wd = layer.in_dims[2];
        const std::size_t cout = layer.out_dims[0];
        const Vec& w = p.tensors[pi];
        const Vec& b = p.tensors[pi + 1];
        Vec y(cout * h * wd);
        for (std::size_t co = 0; co < cout; ++co) {
          for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t c = 0; c < wd; ++c) {
              double acc = b[co];
              for (std::size_t ci = 0; ci < cin; ++ci) {
                for (int dr = -1; dr <= 1; ++dr) {
                  for (int dc = -1; dc <= 1; ++dc) {
                    const long rr = static_cast<long>(r) + dr;
                    const long cc = static_cast<long>(c) + dc;
                    if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(wd)) continue;
                    const double wv = w[((co * cin + ci) * 3 + static_cast<std::size_t>(dr + 1)) * 3 +
                                        static_cast<std::size_t>(dc + 1)];
                    acc += wv * x[(ci * h + static_cast<std::size_t>(rr)) * wd + static_cast<std::size_t>(cc)];
                  }
                }
              }
              y[(co * h + r) * wd + c] = acc;
            }
          }
        }
        x = std::move(y);
        pi += 2;
        break;
      }
    }
  }
  return x;
}

/// Mean softmax cross-entropy over a batch.
inline double loss(const NetworkSpec& spec, const Params& p, const Vec& inputs, std::size_t batch,
                   const std::vector<std::uint32_t>& labels, std::vector<Vec>* relu_inputs = nullptr) {
  const std::size_t per = inputs.size() / batch;
  double total = 0.0;
  for (std::size_t n = 0; n < batch; ++n) {
    Vec x(inputs.begin() + static_cast<long>(n * per), inputs.begin() + static_cast<long>((n + 1) * per));
    const Vec z = forward_sample(spec, p, std::move(x), relu_inputs);
    const double peak = *std::max_element(z.begin(), z.end());
    double denom = 0.0;
    for (double v : z) denom += std::exp(v - peak);
    total += std::log(denom) + peak - z[labels[n]];
  }
  return total / static_cast<double>(batch);
}

inline bool same_pattern(const std::vector<Vec>& a, const std::vector<Vec>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].size(); ++j) {
      if ((a[i][j] > 0.0) != (b[i][j] > 0.0)) return false;
    }
  }
  return true;
}

/// Central difference of the loss with respect to one scalar. Returns NaN
/// when the perturbation flips a relu, where the derivative is undefined.
template <typename Perturb>
double central_difference(const NetworkSpec& spec, Params p, Vec inputs, std::size_t batch,
                          const std::vector<std::uint32_t>& labels, double h, Perturb perturb) {
  std::vector<Vec> base_pattern, plus_pattern, minus_pattern;
  loss(spec, p, inputs, batch, labels, &base_pattern);
  perturb(p, inputs, +h);
  const double plus = loss(spec, p, inputs, batch, labels, &plus_pattern);
  perturb(p, inputs, -2.0 * h);
  const double minus = loss(spec, p, inputs, batch, labels, &minus_pattern);
  if (!same_pattern(base_pattern, plus_pattern) || !same_pattern(base_pattern, minus_pattern)) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  return (plus - minus) / (2.0 * h);
}

inline double relative_error(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Objective of a split, straight from the per-layer flop and byte lists:
/// the slowest device's max(train time, transfer time).
inline double split_objective(const std::vector<double>& flops, const std::vector<double>& bytes, std::size_t split,
                              const std::vector<double>& device_flops, const std::vector<double>& bandwidth) {
  double head = 0.0;
  for (std::size_t i = 0; i < split; ++i) head += flops[i];
  double worst = 0.0;
  for (std::size_t k = 0; k < device_flops.size(); ++k) {
    worst = std::max(worst, std::max(head / device_flops[k], bytes[split - 1] / bandwidth[k]));
  }
  return worst;
}

/// Exhaustive scan over the allowed splits, ties to the smallest.
inline std::pair<std::size_t, double> best_split(const std::vector<double>& flops, const std::vector<double>& bytes,
                                                 const std::vector<bool>& allowed,
                                                 const std::vector<double>& device_flops,
                                                 const std::vector<double>& bandwidth) {
  std::size_t best = 0;
  double value = std::numeric_limits<double>::infinity();
  for (std::size_t l = 1; l <= flops.size(); ++l) {
    if (!allowed[l - 1]) continue;
    const double v = split_objective(flops, bytes, l, device_flops, bandwidth);
    if (v < value) {
      value = v;
      best = l;
    }
  }
  return {best, value};
}

}  // namespace oracle
