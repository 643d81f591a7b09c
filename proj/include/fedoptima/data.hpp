#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "fedoptima/tensor.hpp"

namespace fedoptima {

/// Labelled samples. Features are [N, ...], labels are class indices.
struct Dataset {
  Tensor features;
  std::vector<std::uint32_t> labels;
  std::size_t class_count = 0;

  std::size_t size() const { return labels.size(); }
  void validate() const;
  Dataset subset(std::span<const std::size_t> indices) const;
  /// Same samples with per-sample features reshaped, e.g. 16 -> [1, 4, 4].
  Dataset reshaped(const Shape& sample_shape) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct TrainValidation {
  Dataset train;
  Dataset validation;
};

/// Gaussian blobs, n_per_class samples per class with isotropic noise of
/// standard deviation `spread` around class means that sit one unit apart.
/// Shuffled and split 80/20 into train and validation.
TrainValidation gen_blobs(std::uint64_t seed, std::size_t n_per_class, std::size_t classes, std::size_t dim,
                          double spread);

/// Which device (0-based) owns each sample.
struct PartitionPlan {
  std::vector<std::uint32_t> assignment;
  std::size_t devices = 0;
  std::size_t class_count = 0;

  std::vector<std::vector<std::size_t>> indices_per_device() const;
  std::vector<std::vector<std::size_t>> class_histograms(std::span<const std::uint32_t> labels) const;

  friend bool operator==(const PartitionPlan&, const PartitionPlan&) = default;
};

/// Non-IID split: every device draws class proportions from
/// Dirichlet(concentration). Devices take turns picking a class from their
/// proportions (renormalized over classes that still have samples) and
/// taking a random unassigned sample of it, until every sample is placed.
PartitionPlan dirichlet_partition(std::span<const std::uint32_t> labels, std::size_t devices, double concentration,
                                  std::uint64_t seed);

/// Binary persistence using the wire tensor encoding.
void save_dataset(std::ostream& out, const Dataset& data);
Dataset load_dataset(std::istream& in);
void save_partition(std::ostream& out, const PartitionPlan& plan);
PartitionPlan load_partition(std::istream& in);

}  // namespace fedoptima
