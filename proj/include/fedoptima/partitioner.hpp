#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "fedoptima/nn.hpp"

namespace fedoptima {

/// What a device reports about itself during initialization.
struct DeviceProfile {
  std::uint32_t device_id = 0;
  double flops_per_sec = 1e9;
  double bandwidth_bytes_per_sec = 1e6;
  double speed_multiplier = 1.0;  // simulation-only slowdown

  /// Compute rate after the simulated slowdown.
  double effective_flops_per_sec() const { return flops_per_sec / speed_multiplier; }
  void validate() const;
};

/// Per-layer cost of one batch: operation count and output size.
struct LayerCost {
  double flops = 0.0;
  double output_bytes = 0.0;
  bool split_eligible = true;  // may the network be cut after this layer
};

using NetworkProfile = std::vector<LayerCost>;

class PartitionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Analytic profile of every layer for the given batch size.
NetworkProfile profile(const NetworkSpec& spec, std::size_t batch_size);

struct TimeEstimate {
  double train_seconds = 0.0;
  double transfer_seconds = 0.0;
};

/// Estimated device training and activation-transfer time when the device
/// keeps the first `split` layers (1-based, 1 <= split <= L).
TimeEstimate estimate_times(const NetworkProfile& prof, std::size_t split, const DeviceProfile& device);

/// Objective value of a split: slowest device's max(train, transfer).
double split_objective(const NetworkProfile& prof, std::size_t split,
                       const std::vector<DeviceProfile>& devices);

struct SplitChoice {
  std::size_t split = 0;
  double objective = 0.0;
  std::vector<std::pair<std::size_t, double>> table;  // objective for every eligible split
};

/// Minimizes split_objective over eligible splits, ties to the smallest split.
SplitChoice select_split(const NetworkProfile& prof, const std::vector<DeviceProfile>& devices);

/// Auxiliary head for a device network: `depth` copies of the last
/// parameterized device layer (relu between copies), a flatten when the
/// copy is convolutional, then a classifier.
NetworkSpec make_auxiliary(const NetworkSpec& device_spec, std::size_t num_classes,
                           std::size_t depth = 1);

struct SplitPlan {
  std::size_t split = 0;
  NetworkSpec device_spec;
  NetworkSpec aux_spec;
  NetworkSpec server_spec;
  double objective = 0.0;
  std::vector<std::pair<std::size_t, double>> table;
};

/// Profiles, selects the split and builds all three sub-networks.
SplitPlan plan_split(const NetworkSpec& spec, std::size_t batch_size,
                     const std::vector<DeviceProfile>& devices, std::size_t num_classes,
                     std::size_t aux_depth = 1);

/// Same as plan_split but with a fixed split position.
SplitPlan plan_fixed_split(const NetworkSpec& spec, std::size_t split, std::size_t num_classes,
                           std::size_t aux_depth = 1);

}  // namespace fedoptima
