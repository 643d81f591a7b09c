#include "fedoptima/spec_json.hpp"

#include "fedoptima/harness.hpp"

namespace fedoptima {

nlohmann::json network_to_json(const NetworkSpec& spec) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& l : spec.layers()) {
    nlohmann::json j{{"kind", to_string(l.kind)}};
    switch (l.kind) {
      case LayerKind::Dense:
      case LayerKind::Classifier:
        j["in"] = l.in_dims.at(0);
        j["out"] = l.out_dims.at(0);
        break;
      case LayerKind::Relu:
      case LayerKind::Flatten:
        j["dims"] = l.in_dims;
        break;
      case LayerKind::Conv2d3x3:
        j["in_channels"] = l.in_dims.at(0);
        j["out_channels"] = l.out_dims.at(0);
        j["height"] = l.in_dims.at(1);
        j["width"] = l.in_dims.at(2);
        break;
    }
    j["flops_per_sample"] = l.flops_per_sample;
    j["output_bytes_per_sample"] = l.output_bytes_per_sample;
    out.push_back(std::move(j));
  }
  return out;
}

NetworkSpec network_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw std::invalid_argument("network must be a list of layers");
  std::vector<LayerSpec> layers;
  for (const auto& l : j) {
    const auto kind = layer_kind_from_string(l.at("kind").get<std::string>());
    switch (kind) {
      case LayerKind::Dense:
        layers.push_back(dense_layer(l.at("in").get<std::size_t>(), l.at("out").get<std::size_t>()));
        break;
      case LayerKind::Classifier:
        layers.push_back(classifier_layer(l.at("in").get<std::size_t>(), l.at("out").get<std::size_t>()));
        break;
      case LayerKind::Relu:
        layers.push_back(relu_layer(l.at("dims").get<Shape>()));
        break;
      case LayerKind::Flatten:
        layers.push_back(flatten_layer(l.at("dims").get<Shape>()));
        break;
      case LayerKind::Conv2d3x3:
        layers.push_back(conv3x3_layer(l.at("in_channels").get<std::size_t>(), l.at("out_channels").get<std::size_t>(),
                                       l.at("height").get<std::size_t>(), l.at("width").get<std::size_t>()));
        break;
    }
  }
  return NetworkSpec(std::move(layers));
}

PartitionRequest partition_request_from_json(const nlohmann::json& j) {
  PartitionRequest r;
  r.classes = j.value("classes", std::size_t{0});
  r.batch_size = j.value("batch_size", std::size_t{32});
  r.aux_depth = j.value("aux_depth", std::size_t{1});
  const auto& net = j.at("network");
  if (net.is_string()) {
    if (r.classes == 0) throw std::invalid_argument("named networks need \"classes\"");
    r.network = build_network(net.get<std::string>(), j.value("input_dim", std::size_t{16}), r.classes);
  } else {
    r.network = network_from_json(net);
    if (r.classes == 0) r.classes = r.network.output_dims().at(0);
  }
  const auto& devices = j.at("devices");
  if (!devices.is_array() || devices.empty()) throw std::invalid_argument("need at least one device");
  std::uint32_t id = 1;
  for (const auto& d : devices) {
    DeviceProfile p;
    p.device_id = id++;
    p.flops_per_sec = d.at("flops_per_sec").get<double>();
    p.bandwidth_bytes_per_sec = d.at("bandwidth").get<double>();
    p.speed_multiplier = d.value("speed_multiplier", 1.0);
    p.validate();
    r.devices.push_back(p);
  }
  return r;
}

nlohmann::json plan_to_json(const SplitPlan& plan) {
  nlohmann::json table = nlohmann::json::array();
  for (const auto& [l, obj] : plan.table) table.push_back({{"split", l}, {"objective", obj}});
  return {{"split", plan.split},
          {"objective", plan.objective},
          {"table", table},
          {"device_spec", network_to_json(plan.device_spec)},
          {"aux_spec", network_to_json(plan.aux_spec)},
          {"server_spec", network_to_json(plan.server_spec)}};
}

}  // namespace fedoptima
