#pragma once

#include <json.hpp>

#include "fedoptima/partitioner.hpp"

namespace fedoptima {

/// Layer list as JSON. Dense and classifier layers use {"in", "out"};
/// relu and flatten use {"dims"}; convolutions use {"in_channels",
/// "out_channels", "height", "width"}.
nlohmann::json network_to_json(const NetworkSpec& spec);
NetworkSpec network_from_json(const nlohmann::json& j);

struct PartitionRequest {
  NetworkSpec network;
  std::size_t batch_size = 32;
  std::size_t classes = 0;
  std::size_t aux_depth = 1;
  std::vector<DeviceProfile> devices;
};

/// {"network": "dense" | "conv" | [layers], "input_dim", "classes",
///  "batch_size", "aux_depth", "devices": [{"flops_per_sec",
///  "bandwidth", "speed_multiplier"}]}
PartitionRequest partition_request_from_json(const nlohmann::json& j);

nlohmann::json plan_to_json(const SplitPlan& plan);

}  // namespace fedoptima
