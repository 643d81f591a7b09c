#include "fedoptima/partitioner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fedoptima {

void DeviceProfile::validate() const {
  if (!(flops_per_sec > 0.0) || !(bandwidth_bytes_per_sec > 0.0) || !(speed_multiplier >= 1.0)) {
    throw PartitionError("device " + std::to_string(device_id) +
                         " needs flops > 0, bandwidth > 0 and speed multiplier >= 1");
  }
}

NetworkProfile profile(const NetworkSpec& spec, std::size_t batch_size) {
  const auto eligible = spec.split_eligible();
  NetworkProfile prof;
  prof.reserve(spec.size());
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const LayerSpec& layer = spec[i];
    LayerCost cost;
    const double batch = static_cast<double>(batch_size);
    switch (layer.kind) {
      case LayerKind::Dense:
      case LayerKind::Classifier:
        cost.flops = 2.0 * static_cast<double>(layer.in_dims[0]) * static_cast<double>(layer.out_dims[0]) * batch;
        break;
      case LayerKind::Conv2d3x3:
        cost.flops = 2.0 * 9.0 * static_cast<double>(layer.in_dims[0]) * static_cast<double>(layer.out_dims[0]) *
                     static_cast<double>(layer.out_dims[1]) * static_cast<double>(layer.out_dims[2]) * batch;
        break;
      case LayerKind::Relu:
        cost.flops = static_cast<double>(shape_size(layer.out_dims)) * batch;
        break;
      case LayerKind::Flatten:
        cost.flops = 0.0;
        break;
    }
    cost.output_bytes = static_cast<double>(shape_size(layer.out_dims)) * 4.0 * batch;
    // Split positions are 1-based counts of device layers.
    cost.split_eligible = std::find(eligible.begin(), eligible.end(), i + 1) != eligible.end();
    prof.push_back(cost);
  }
  return prof;
}

TimeEstimate estimate_times(const NetworkProfile& prof, std::size_t split, const DeviceProfile& device) {
  if (split < 1 || split > prof.size()) {
    throw PartitionError("split " + std::to_string(split) + " outside [1, " + std::to_string(prof.size()) + "]");
  }
  device.validate();
  double flops = 0.0;
  for (std::size_t i = 0; i < split; ++i) flops += prof[i].flops;
  return {flops / device.effective_flops_per_sec(), prof[split - 1].output_bytes / device.bandwidth_bytes_per_sec};
}

double split_objective(const NetworkProfile& prof, std::size_t split, const std::vector<DeviceProfile>& devices) {
  double worst = 0.0;
  for (const auto& device : devices) {
    const TimeEstimate t = estimate_times(prof, split, device);
    worst = std::max({worst, t.train_seconds, t.transfer_seconds});
  }
  return worst;
}

SplitChoice select_split(const NetworkProfile& prof, const std::vector<DeviceProfile>& devices) {
  if (devices.empty()) throw PartitionError("select_split needs at least one device");
  SplitChoice choice;
  choice.objective = std::numeric_limits<double>::infinity();
  for (std::size_t l = 1; l <= prof.size(); ++l) {
    if (!prof[l - 1].split_eligible) continue;
    const double value = split_objective(prof, l, devices);
    choice.table.emplace_back(l, value);
    if (value < choice.objective) {
      choice.objective = value;
      choice.split = l;
    }
  }
  if (choice.split == 0) throw PartitionError("network has no eligible split point");
  return choice;
}

NetworkSpec make_auxiliary(const NetworkSpec& device_spec, std::size_t num_classes, std::size_t depth) {
  if (device_spec.empty()) throw PartitionError("device network is empty");
  if (depth < 1) throw PartitionError("auxiliary depth must be at least 1");
  const auto last = std::find_if(device_spec.layers().rbegin(), device_spec.layers().rend(),
                                 [](const LayerSpec& l) { return l.parameterized(); });
  if (last == device_spec.layers().rend()) {
    throw PartitionError("device network has no parameterized layer to duplicate");
  }
  const Shape& in = device_spec.output_dims();
  std::vector<LayerSpec> layers;
  switch (last->kind) {
    case LayerKind::Dense: {
      if (in.size() != 1) throw PartitionError("dense duplicate needs a flat device output");
      for (std::size_t i = 0; i < depth; ++i) {
        if (i > 0) layers.push_back(relu_layer(in));
        layers.push_back(dense_layer(in[0], in[0]));
      }
      layers.push_back(classifier_layer(in[0], num_classes));
      break;
    }
    case LayerKind::Conv2d3x3: {
      if (in.size() != 3) throw PartitionError("conv duplicate needs a [C, H, W] device output");
      for (std::size_t i = 0; i < depth; ++i) {
        if (i > 0) layers.push_back(relu_layer(in));
        layers.push_back(conv3x3_layer(in[0], in[0], in[1], in[2]));
      }
      layers.push_back(flatten_layer(in));
      layers.push_back(classifier_layer(shape_size(in), num_classes));
      break;
    }
    default:
      throw PartitionError("layer kind " + to_string(last->kind) + " cannot be duplicated");
  }
  return NetworkSpec(std::move(layers));
}

SplitPlan plan_fixed_split(const NetworkSpec& spec, std::size_t split, std::size_t num_classes,
                           std::size_t aux_depth) {
  const auto eligible = spec.split_eligible();
  if (std::find(eligible.begin(), eligible.end(), split) == eligible.end()) {
    throw PartitionError("split " + std::to_string(split) + " is not eligible");
  }
  SplitPlan plan;
  plan.split = split;
  plan.device_spec = spec.slice(0, split);
  plan.server_spec = spec.slice(split, spec.size());
  plan.aux_spec = make_auxiliary(plan.device_spec, num_classes, aux_depth);
  return plan;
}

SplitPlan plan_split(const NetworkSpec& spec, std::size_t batch_size, const std::vector<DeviceProfile>& devices,
                     std::size_t num_classes, std::size_t aux_depth) {
  const SplitChoice choice = select_split(profile(spec, batch_size), devices);
  SplitPlan plan = plan_fixed_split(spec, choice.split, num_classes, aux_depth);
  plan.objective = choice.objective;
  plan.table = choice.table;
  return plan;
}

}  // namespace fedoptima
