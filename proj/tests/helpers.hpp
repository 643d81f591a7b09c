#pragma once

#include <random>
#include <vector>

#include "fedoptima/nn.hpp"

namespace testing_helpers {

using namespace fedoptima;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, float scale = 1.0F) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> dist(0.0F, scale);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

inline std::vector<std::uint32_t> random_labels(std::size_t n, std::size_t classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::uint32_t> dist(0, static_cast<std::uint32_t>(classes - 1));
  std::vector<std::uint32_t> out(n);
  for (auto& l : out) l = dist(rng);
  return out;
}

/// Small random network. Half of them start with 3x3 convolutions on a
/// tiny image, the rest are dense stacks. All end in a classifier.
inline NetworkSpec random_network(std::mt19937_64& rng, std::size_t classes) {
  std::uniform_int_distribution<std::size_t> small(1, 3);
  std::uniform_int_distribution<std::size_t> width(2, 6);
  std::vector<LayerSpec> layers;
  if (rng() % 2 == 0) {
    const std::size_t side = small(rng) + 1;
    std::size_t channels = small(rng);
    const std::size_t convs = small(rng) % 2 + 1;
    for (std::size_t i = 0; i < convs; ++i) {
      const std::size_t out = small(rng);
      layers.push_back(conv3x3_layer(channels, out, side, side));
      layers.push_back(relu_layer({out, side, side}));
      channels = out;
    }
    layers.push_back(flatten_layer({channels, side, side}));
    std::size_t in = channels * side * side;
    if (rng() % 2 == 0) {
      const std::size_t w = width(rng);
      layers.push_back(dense_layer(in, w));
      layers.push_back(relu_layer({w}));
      in = w;
    }
    layers.push_back(classifier_layer(in, classes));
  } else {
    std::size_t in = width(rng);
    const std::size_t hidden = small(rng);
    for (std::size_t i = 0; i < hidden; ++i) {
      const std::size_t w = width(rng);
      layers.push_back(dense_layer(in, w));
      layers.push_back(relu_layer({w}));
      in = w;
    }
    layers.push_back(classifier_layer(in, classes));
  }
  return NetworkSpec(std::move(layers));
}

inline Shape batch_shape(const NetworkSpec& spec, std::size_t batch) {
  Shape s{batch};
  for (auto d : spec.input_dims()) s.push_back(d);
  return s;
}

}  // namespace testing_helpers
