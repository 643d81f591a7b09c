#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedoptima/tensor.hpp"

namespace fedoptima {

enum class LayerKind : std::uint8_t {
  Dense,
  Relu,
  Conv2d3x3,
  Flatten,
  Classifier,  // dense layer producing logits; softmax lives in the loss
};

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

/// One layer of a sequential network. Dimensions are per sample, the batch
/// dimension is implicit.
struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  Shape in_dims;
  Shape out_dims;
  std::uint64_t flops_per_sample = 0;
  std::uint64_t output_bytes_per_sample = 0;

  bool parameterized() const;
  /// Shapes of the trainable tensors of this layer, weight first.
  std::vector<Shape> parameter_shapes() const;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

LayerSpec dense_layer(std::size_t in, std::size_t out);
LayerSpec relu_layer(Shape dims);
LayerSpec conv3x3_layer(std::size_t channels_in, std::size_t channels_out,
                        std::size_t height, std::size_t width);
LayerSpec flatten_layer(Shape in_dims);
LayerSpec classifier_layer(std::size_t in, std::size_t classes);

/// Ordered list of layers with chained dimensions.
class NetworkSpec {
 public:
  NetworkSpec() = default;
  explicit NetworkSpec(std::vector<LayerSpec> layers);

  const std::vector<LayerSpec>& layers() const { return layers_; }
  std::size_t size() const { return layers_.size(); }
  bool empty() const { return layers_.empty(); }
  const LayerSpec& operator[](std::size_t i) const { return layers_.at(i); }

  const Shape& input_dims() const { return layers_.front().in_dims; }
  const Shape& output_dims() const { return layers_.back().out_dims; }

  /// Split positions l (device keeps layers [0, l)). A position qualifies
  /// when the device side holds a trainable layer and the server side keeps
  /// at least one trainable layer.
  std::vector<std::size_t> split_eligible() const;

  /// Layers [begin, end) as a standalone network.
  NetworkSpec slice(std::size_t begin, std::size_t end) const;
  NetworkSpec concat(const NetworkSpec& tail) const;

  std::vector<Shape> parameter_shapes() const;
  std::size_t parameter_count() const;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;

 private:
  std::vector<LayerSpec> layers_;
};

/// Trainable tensors of a network in layer order (weight, bias per
/// parameterized layer) plus the model version used by aggregation.
struct ParameterSet {
  std::vector<Tensor> tensors;
  std::uint64_t version = 0;

  std::size_t size() const { return tensors.size(); }
  std::size_t scalar_count() const;
  bool same_shapes(const ParameterSet& other) const;
  bool same_shapes(std::span<const Tensor> other) const;

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;
};

/// Seeded uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) for weights and biases.
ParameterSet init_parameters(const NetworkSpec& spec, std::uint64_t seed);

/// Splits a parameter set into the tensors owned by layers [0, split) and
/// [split, L).
std::pair<ParameterSet, ParameterSet> split_parameters(const NetworkSpec& spec,
                                                       const ParameterSet& params,
                                                       std::size_t split);
ParameterSet concat_parameters(const ParameterSet& head, const ParameterSet& tail);

class TapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Activation record of a forward pass. Single use: backward consumes it.
class Tape {
 public:
  bool valid() const { return valid_; }

 private:
  friend struct ForwardAccess;
  NetworkSpec spec_;
  ParameterSet params_;
  std::vector<Tensor> inputs_;  // input of every layer
  bool valid_ = false;
};

struct ForwardResult {
  Tensor output;
  std::optional<Tape> tape;
};

struct Gradients {
  std::vector<Tensor> params;
  Tensor input;  // d loss / d network input
};

ForwardResult forward(const NetworkSpec& spec, const ParameterSet& params,
                      const Tensor& input, bool record);

/// Reverse pass. Marks the tape consumed.
Gradients backward(Tape& tape, const Tensor& loss_grad);

/// p <- p - lr * g for every tensor. The version is left alone.
void sgd_step(ParameterSet& params, std::span<const Tensor> grads, float lr);

struct LossResult {
  float loss = 0.0F;
  Tensor grad;
};

/// Mean softmax cross-entropy over the batch. Gradient is
/// (softmax - onehot) / batch.
LossResult cross_entropy_loss(const Tensor& logits, std::span<const std::uint32_t> labels);

/// Fraction of rows whose argmax equals the label.
double accuracy(const Tensor& logits, std::span<const std::uint32_t> labels);

}  // namespace fedoptima
