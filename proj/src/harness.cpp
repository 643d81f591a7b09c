#include "fedoptima/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

namespace fedoptima {

const char* to_string(Mode mode) {
  switch (mode) {
    case Mode::FedOptima: return "fedoptima";
    case Mode::FedAvg: return "fedavg";
    case Mode::FedAsync: return "fedasync";
    case Mode::SyncSplit: return "syncsplit";
    case Mode::Oafl: return "oafl";
  }
  return "unknown";
}

Mode mode_from_string(const std::string& name) {
  for (Mode m : {Mode::FedOptima, Mode::FedAvg, Mode::FedAsync, Mode::SyncSplit, Mode::Oafl}) {
    if (name == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown mode '" + name + "'");
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the pair
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Config

double ExperimentConfig::speed_multiplier(std::size_t i) const {
  return speed_multipliers.empty() ? 1.0 : speed_multipliers.at(i);
}

double ExperimentConfig::link_bandwidth(std::size_t i) const {
  return bandwidths.empty() ? bandwidth : bandwidths.at(i);
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument(what); };
  if (devices == 0) fail("devices must be at least 1");
  if (batch_size == 0) fail("batch size must be at least 1");
  if (iters_per_round == 0) fail("iterations per round must be at least 1");
  if (patience == 0) fail("patience must be at least 1");
  if (omega == 0) fail("omega must be at least 1");
  if (!(lr_device >= 0.0F) || !(lr_server >= 0.0F)) fail("learning rates must be non-negative");
  if (!speed_multipliers.empty() && speed_multipliers.size() != devices) {
    fail("need one speed multiplier per device");
  }
  for (double m : speed_multipliers) {
    if (!(m >= 1.0)) fail("speed multipliers must be at least 1");
  }
  if (!bandwidths.empty() && bandwidths.size() != devices) fail("need one bandwidth per device");
  for (double b : bandwidths) {
    if (!(b > 0.0)) fail("bandwidths must be positive");
  }
  if (!(bandwidth > 0.0)) fail("bandwidth must be positive");
  if (!(bandwidth_min > 0.0) || bandwidth_max < bandwidth_min) fail("bandwidth range is invalid");
  if (!(device_flops > 0.0) || !(server_flops > 0.0)) fail("compute rates must be positive");
  if (unstable_p < 0.0 || unstable_p > 0.5) fail("leave probability must be within [0, 0.5]");
  if (!(unstable_interval > 0.0)) fail("churn interval must be positive");
  if (transport != "inproc" && transport != "socket") fail("transport must be inproc or socket");
  if (transport == "socket" && simulated) fail("the socket transport runs on the wall clock; set simulated=false");
  if (unstable && transport != "inproc") fail("churn simulation needs the inproc transport");
  if (!(time_limit > 0.0)) fail("time limit must be positive");
  if (classes < 2 || dim < 2) fail("need at least 2 classes and 2 dimensions");
  if (samples / classes < 5) fail("too few samples per class");
  if (!(spread >= 0.0)) fail("spread must be non-negative");
  if (!(dirichlet > 0.0)) fail("dirichlet concentration must be positive");
  if (samples / classes * classes * 4 / 5 < devices) fail("more devices than training samples");
  const std::size_t share = (omega + devices - 1) / devices;
  if (omega_dev > share) fail("omega_dev may not exceed ceil(omega / devices)");
  if (network != "dense" && network != "conv") fail("unknown network '" + network + "'");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T out{};
  in >> out;
  if (in.fail() || !in.eof()) {
    // accept "inf" for doubles
    if constexpr (std::is_floating_point_v<T>) {
      if (value == "inf") return std::numeric_limits<T>::infinity();
    }
    throw std::invalid_argument("bad value for " + key + ": '" + value + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw std::invalid_argument("bad boolean for " + key + ": '" + value + "'");
}

std::vector<double> parse_list(const std::string& key, const std::string& value) {
  std::vector<double> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<double>(key, item));
  }
  return out;
}

}  // namespace

void ExperimentConfig::set(const std::string& raw_key, const std::string& raw_value) {
  std::string key = trim(raw_key);
  std::replace(key.begin(), key.end(), '-', '_');
  const std::string value = trim(raw_value);
  auto sz = [&] { return parse_number<std::size_t>(key, value); };
  auto dbl = [&] { return parse_number<double>(key, value); };

  if (key == "mode") mode = mode_from_string(value);
  else if (key == "devices") devices = sz();
  else if (key == "network") network = value;
  else if (key == "split") split = sz();
  else if (key == "aux_depth") aux_depth = sz();
  else if (key == "lr_device") lr_device = static_cast<float>(dbl());
  else if (key == "lr_server") lr_server = static_cast<float>(dbl());
  else if (key == "batch_size") batch_size = sz();
  else if (key == "iters_per_round") iters_per_round = sz();
  else if (key == "device_rounds") device_rounds = sz();
  else if (key == "rounds") server_rounds = sz();
  else if (key == "max_delay") max_delay = parse_number<std::uint64_t>(key, value);
  else if (key == "omega") omega = sz();
  else if (key == "omega_dev") omega_dev = sz();
  else if (key == "patience") patience = sz();
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, value);
  else if (key == "speed_multipliers") speed_multipliers = parse_list(key, value);
  else if (key == "bandwidths") bandwidths = parse_list(key, value);
  else if (key == "bandwidth") bandwidth = dbl();
  else if (key == "bandwidth_min") bandwidth_min = dbl();
  else if (key == "bandwidth_max") bandwidth_max = dbl();
  else if (key == "device_flops") device_flops = dbl();
  else if (key == "server_flops") server_flops = dbl();
  else if (key == "unstable") unstable = parse_bool(key, value);
  else if (key == "unstable_p") unstable_p = dbl();
  else if (key == "unstable_interval") unstable_interval = dbl();
  else if (key == "transport") transport = value;
  else if (key == "simulated") simulated = parse_bool(key, value);
  else if (key == "host") host = value;
  else if (key == "port") port = static_cast<std::uint16_t>(parse_number<unsigned>(key, value));
  else if (key == "time_limit") time_limit = dbl();
  else if (key == "classes") classes = sz();
  else if (key == "dim") dim = sz();
  else if (key == "samples") samples = sz();
  else if (key == "spread") spread = dbl();
  else if (key == "dirichlet") dirichlet = dbl();
  else if (key == "metrics_out") metrics_out = value;
  else if (key == "events_out") events_out = value;
  else throw std::invalid_argument("unknown config key '" + key + "'");
}

ExperimentConfig load_config(std::istream& in, ExperimentConfig base) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    base.set(line.substr(0, eq), line.substr(eq + 1));
  }
  return base;
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"mode", to_string(mode)},
          {"devices", devices},
          {"network", network},
          {"split", split},
          {"aux_depth", aux_depth},
          {"lr_device", lr_device},
          {"lr_server", lr_server},
          {"batch_size", batch_size},
          {"iters_per_round", iters_per_round},
          {"device_rounds", device_rounds},
          {"rounds", server_rounds},
          {"max_delay", max_delay},
          {"omega", omega},
          {"omega_dev", omega_dev},
          {"patience", patience},
          {"seed", seed},
          {"speed_multipliers", speed_multipliers},
          {"bandwidths", bandwidths},
          {"bandwidth", bandwidth},
          {"device_flops", device_flops},
          {"server_flops", server_flops},
          {"unstable", unstable},
          {"unstable_p", unstable_p},
          {"unstable_interval", unstable_interval},
          {"transport", transport},
          {"simulated", simulated},
          {"time_limit", std::isinf(time_limit) ? -1.0 : time_limit},
          {"classes", classes},
          {"dim", dim},
          {"samples", samples},
          {"spread", spread},
          {"dirichlet", dirichlet}};
}

NetworkSpec build_network(const std::string& name, std::size_t input_dim, std::size_t classes) {
  if (name == "dense") {
    return NetworkSpec({dense_layer(input_dim, 64), relu_layer({64}), dense_layer(64, 64), relu_layer({64}),
                        dense_layer(64, 64), relu_layer({64}), classifier_layer(64, classes)});
  }
  if (name == "conv") {
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(input_dim))));
    if (side * side != input_dim) throw std::invalid_argument("conv network needs a square input dimension");
    return NetworkSpec({conv3x3_layer(1, 4, side, side), relu_layer({4, side, side}), conv3x3_layer(4, 4, side, side),
                        relu_layer({4, side, side}), flatten_layer({4, side, side}),
                        classifier_layer(4 * side * side, classes)});
  }
  throw std::invalid_argument("unknown network '" + name + "'");
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

const std::set<std::string>& type1_reasons() {
  static const std::set<std::string> reasons{"scheduler_empty", "sync_wait", "gradient_wait", "grant_wait",
                                             "model_wait"};
  return reasons;
}

}  // namespace

std::map<int, IdleTotals> measure_idle(const std::vector<Event>& events) {
  std::map<std::int64_t, double> barriers;
  for (const auto& e : events) {
    if (e.type != "barrier") continue;
    if (!e.data.contains("round") || !e.data["round"].is_number_integer()) {
      throw std::invalid_argument("barrier record without a round");
    }
    barriers.emplace(e.data["round"].get<std::int64_t>(), e.time);
  }

  std::map<int, IdleTotals> out;
  for (const auto& e : events) {
    if (e.type != "idle") continue;
    const auto& d = e.data;
    if (!d.contains("start") || !d.contains("end") || !d.contains("reason") || !d["start"].is_number() ||
        !d["end"].is_number() || !d["reason"].is_string()) {
      throw std::invalid_argument("malformed idle record");
    }
    const double start = d["start"].get<double>();
    const double end = d["end"].get<double>();
    if (!(end >= start)) throw std::invalid_argument("idle record ends before it starts");
    const std::string reason = d["reason"].get<std::string>();
    auto& totals = out[e.entity];
    if (type1_reasons().count(reason) != 0) {
      totals.type1 += end - start;
    } else if (reason == "barrier_wait") {
      double barrier = end;  // barrier never reached: all of it was waiting on others
      if (d.contains("round") && d["round"].is_number_integer()) {
        const auto it = barriers.find(d["round"].get<std::int64_t>());
        if (it != barriers.end()) barrier = std::clamp(it->second, start, end);
      }
      totals.type2 += barrier - start;
      totals.type1 += end - barrier;
    } else {
      throw std::invalid_argument("unknown idle reason '" + reason + "'");
    }
  }
  return out;
}

double MetricsRecord::idle_fraction(int entity) const {
  if (!(wall_clock > 0.0)) return 0.0;
  const auto it = idle.find(entity);
  return it == idle.end() ? 0.0 : it->second.total() / wall_clock;
}

MetricsRecord compute_metrics(const std::vector<Event>& events, const std::vector<LinkBytes>& links,
                              const std::vector<RoundRecord>& rounds, double wall_clock, std::size_t dataset_size) {
  MetricsRecord m;
  m.idle = measure_idle(events);
  m.links = links;
  m.rounds = rounds;
  m.wall_clock = wall_clock;
  for (const auto& l : links) m.bytes_total += l.up + l.down;
  double prev = 0.0;
  for (const auto& r : rounds) {
    m.round_seconds.push_back(r.time - prev);
    prev = r.time;
  }

  // Steady state: skip everything up to the end of the first round.
  const double warm = rounds.empty() ? 0.0 : rounds.front().time;
  std::map<int, std::uint64_t> steady;
  for (const auto& e : events) {
    if (e.type != "iteration" && e.type != "train_step") continue;
    const auto n = e.data.value("samples", std::uint64_t{0});
    m.samples[e.entity] += n;
    if (e.time > warm) steady[e.entity] += n;
  }
  const double span = wall_clock - warm;
  for (const auto& [entity, n] : steady) {
    m.throughput[entity] = span > 0.0 ? static_cast<double>(n) / span : 0.0;
    if (entity != 0) m.system_throughput += m.throughput[entity];
  }
  std::uint64_t device_samples = 0;
  for (const auto& [entity, n] : m.samples) {
    if (entity != 0) device_samples += n;
  }
  if (device_samples > 0 && dataset_size > 0) {
    m.data_rounds = static_cast<double>(device_samples) / static_cast<double>(dataset_size);
    m.bytes_per_round = static_cast<double>(m.bytes_total) / m.data_rounds;
  }
  return m;
}

double accuracy_at(const std::vector<RoundRecord>& rounds, double time) {
  double acc = -1.0;
  for (const auto& r : rounds) {
    if (r.time > time) break;
    acc = r.accuracy;
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Churn

ChurnSchedule::ChurnSchedule(double p, double bandwidth_min, double bandwidth_max, std::size_t devices,
                             std::uint64_t seed)
    : p_(p), bw_min_(bandwidth_min), bw_max_(bandwidth_max), devices_(devices), rng_(seed) {
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("leave probability must be within [0, 1]");
  if (!(bandwidth_min > 0.0) || bandwidth_max < bandwidth_min) throw std::invalid_argument("bad bandwidth range");
}

std::vector<ChurnDecision> ChurnSchedule::next_interval() {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<ChurnDecision> out;
  out.reserve(devices_);
  for (std::size_t k = 0; k < devices_; ++k) {
    ChurnDecision d;
    d.device = static_cast<DeviceId>(k + 1);
    d.leave = unit(rng_) < p_;
    const double u = unit(rng_);  // drawn either way so the stream stays aligned
    if (!d.leave) d.bandwidth = bw_min_ + u * (bw_max_ - bw_min_);
    out.push_back(d);
  }
  return out;
}

void churn_driver(Env& env, double interval, ChurnSchedule schedule, std::vector<DeviceComms*> devices,
                  LinkTable& links, ServerTransport& server, EventLog& log, Channel<int>& done) {
  double next = env.now();
  for (;;) {
    next += interval;
    int unused = 0;
    if (done.pop_until(unused, next) != ChannelStatus::Timeout) return;
    for (const auto& d : schedule.next_interval()) {
      auto* comms = devices.at(d.device - 1);
      const bool online = comms->presence().online();
      if (d.leave) {
        if (!online) continue;
        comms->presence().set_online(false);
        server.inject(Inbound{InboundEvent::Disconnected, d.device, {}, false});
        log.record(kHarnessEntity, "leave", {{"device", d.device}});
        continue;
      }
      links.at(d.device).bandwidth = d.bandwidth;
      log.record(kHarnessEntity, "bandwidth", {{"device", d.device}, {"bandwidth", d.bandwidth}});
      if (!online) {
        comms->presence().set_online(true);
        server.inject(Inbound{InboundEvent::Connected, d.device, {}, false});
        log.record(kHarnessEntity, "join", {{"device", d.device}});
      }
    }
  }
}

// ---------------------------------------------------------------------------

double estimate_memory(MemoryModel kind, std::size_t devices, double model_bytes, double activation_bytes,
                       std::size_t omega) {
  if (devices == 0 || !(model_bytes > 0.0) || !(activation_bytes > 0.0)) {
    throw std::invalid_argument("memory estimate needs positive inputs");
  }
  const double k = static_cast<double>(devices);
  switch (kind) {
    case MemoryModel::Oafl: return (k + 1.0) * model_bytes + k * activation_bytes;
    case MemoryModel::FedOptima:
      if (omega == 0) throw std::invalid_argument("memory estimate needs positive inputs");
      return model_bytes + static_cast<double>(omega) * activation_bytes;
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Experiments

namespace {

constexpr std::uint64_t kDataStream = 1;
constexpr std::uint64_t kPartitionStream = 2;
constexpr std::uint64_t kModelStream = 3;
constexpr std::uint64_t kAuxStream = 4;
constexpr std::uint64_t kChurnStream = 5;
constexpr std::uint64_t kDeviceStream = 100;

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config) {
  config.validate();
  ExperimentResult result;
  result.config = config;
  const std::size_t K = config.devices;

  auto data = gen_blobs(derive_seed(config.seed, kDataStream), config.samples / config.classes, config.classes,
                        config.dim, config.spread);
  const NetworkSpec network = build_network(config.network, config.dim, config.classes);
  if (config.network == "conv") {
    const Shape sample = network.input_dims();
    data.train = data.train.reshaped(sample);
    data.validation = data.validation.reshaped(sample);
  }
  const auto partition =
      dirichlet_partition(data.train.labels, K, config.dirichlet, derive_seed(config.seed, kPartitionStream));
  std::vector<Dataset> shards;
  std::vector<std::size_t> shard_sizes;
  for (const auto& idx : partition.indices_per_device()) {
    shards.push_back(data.train.subset(idx));
    shard_sizes.push_back(idx.size());
  }

  std::vector<DeviceProfile> profiles;
  for (std::size_t i = 0; i < K; ++i) {
    profiles.push_back({static_cast<std::uint32_t>(i + 1), config.device_flops, config.link_bandwidth(i),
                        config.speed_multiplier(i)});
  }
  result.plan = config.split == 0
                    ? plan_split(network, config.batch_size, profiles, config.classes, config.aux_depth)
                    : plan_fixed_split(network, config.split, config.classes, config.aux_depth);
  const SplitPlan& plan = result.plan;

  const ParameterSet full = init_parameters(network, derive_seed(config.seed, kModelStream));
  auto [device_init, server_init] = split_parameters(network, full, plan.split);
  ParameterSet aux_init = init_parameters(plan.aux_spec, derive_seed(config.seed, kAuxStream));

  const bool simulated = config.simulated && config.transport == "inproc";
  auto env = simulated ? make_sim_env() : make_real_env();
  EventLog log(*env);
  LinkTable links(K);
  for (std::size_t i = 0; i < K; ++i) links.at(static_cast<DeviceId>(i + 1)).bandwidth = config.link_bandwidth(i);

  std::unique_ptr<InProcFabric> fabric;
  std::unique_ptr<SocketServerTransport> socket_server;
  std::vector<std::unique_ptr<SocketDeviceTransport>> socket_devices(K);
  ServerTransport* server_transport = nullptr;
  if (config.transport == "inproc") {
    fabric = std::make_unique<InProcFabric>(*env, K);
    server_transport = &fabric->server();
  } else {
    socket_server = std::make_unique<SocketServerTransport>(*env, config.host, config.port);
    server_transport = socket_server.get();
  }

  ServerComms server_comms(*env, *server_transport, links, log);
  std::vector<std::unique_ptr<DeviceComms>> device_comms(K);
  if (fabric) {
    for (std::size_t i = 0; i < K; ++i) {
      const auto id = static_cast<DeviceId>(i + 1);
      device_comms[i] = std::make_unique<DeviceComms>(*env, id, fabric->device(id), links.at(id), log);
    }
  }

  ServerConfig sc;
  sc.devices = K;
  sc.max_rounds = config.server_rounds;
  sc.lr = config.lr_server;
  sc.max_delay = config.max_delay;
  sc.omega = config.omega;
  sc.omega_dev = config.omega_dev;
  sc.patience = config.patience;
  sc.flops_per_sec = config.server_flops;
  sc.time_limit = config.time_limit;

  Channel<int> churn_done(*env, 1);
  result.devices.resize(K);
  GlobalDeviceModel global{device_init, aux_init, 0};

  env->spawn("server", [&] {
    struct CloseOnExit {
      Channel<int>& ch;
      ~CloseOnExit() { ch.close(); }
    } closer{churn_done};
    if (socket_server) socket_server->accept_devices(K, 30.0);
    switch (config.mode) {
      case Mode::FedOptima:
        result.server = run_server(*env, server_comms, sc, plan, server_init, global, data.validation, log);
        break;
      case Mode::FedAvg:
        result.server =
            run_fedavg_server(*env, server_comms, sc, network, full, shard_sizes, data.validation, log);
        break;
      case Mode::FedAsync:
        result.server = run_fedasync_server(*env, server_comms, sc, network, full, data.validation, log);
        break;
      case Mode::SyncSplit:
        result.server = run_sync_split_server(*env, server_comms, sc, plan, server_init, device_init, shard_sizes,
                                              data.validation, log);
        break;
      case Mode::Oafl:
        result.server =
            run_oafl_server(*env, server_comms, sc, plan, server_init, device_init, data.validation, log);
        break;
    }
  });

  for (std::size_t i = 0; i < K; ++i) {
    const auto id = static_cast<DeviceId>(i + 1);
    env->spawn("device-" + std::to_string(id), [&, i, id] {
      if (!device_comms[i]) {
        socket_devices[i] = std::make_unique<SocketDeviceTransport>(*env, config.host, socket_server->port(), id);
        device_comms[i] = std::make_unique<DeviceComms>(*env, id, *socket_devices[i], links.at(id), log);
      }
      DeviceConfig dc;
      dc.batch_size = config.batch_size;
      dc.iters_per_round = config.iters_per_round;
      dc.rounds = config.device_rounds;
      dc.lr = config.lr_device;
      dc.flops_per_sec = config.device_flops / config.speed_multiplier(i);
      dc.seed = derive_seed(config.seed, kDeviceStream + id);
      auto& comms = *device_comms[i];
      switch (config.mode) {
        case Mode::FedOptima:
          result.devices[i] = run_device(*env, comms, dc, plan, global.as_update(), shards[i], log);
          break;
        case Mode::FedAvg:
          result.devices[i] = run_full_device(*env, comms, dc, network, full, shards[i], log, "barrier_wait");
          break;
        case Mode::FedAsync:
          result.devices[i] = run_full_device(*env, comms, dc, network, full, shards[i], log, "sync_wait");
          break;
        case Mode::SyncSplit:
          result.devices[i] = run_split_device(*env, comms, dc, plan, device_init, shards[i], log, "barrier_wait");
          break;
        case Mode::Oafl:
          result.devices[i] = run_split_device(*env, comms, dc, plan, device_init, shards[i], log, "sync_wait");
          break;
      }
    });
  }

  if (config.unstable) {
    std::vector<DeviceComms*> handles;
    for (auto& c : device_comms) handles.push_back(c.get());
    ChurnSchedule schedule(config.unstable_p, config.bandwidth_min, config.bandwidth_max, K,
                           derive_seed(config.seed, kChurnStream));
    env->spawn("churn", [&, handles, schedule]() mutable {
      churn_driver(*env, config.unstable_interval, std::move(schedule), handles, links, *server_transport, log,
                   churn_done);
    });
  }

  result.errors = env->run();
  const double wall_clock = env->now();

  result.events = log.snapshot();
  std::vector<LinkBytes> bytes;
  for (std::size_t i = 0; i < K; ++i) {
    const auto& l = links.at(static_cast<DeviceId>(i + 1));
    bytes.push_back({l.bytes_up.load(), l.bytes_down.load(), l.frames_up.load(), l.frames_down.load()});
  }
  result.metrics = compute_metrics(result.events, bytes, result.server.rounds, wall_clock, data.train.size());
  result.metrics.peak_resident_batches = result.server.peak_resident_batches;
  result.metrics.peak_resident_bytes = result.server.peak_resident_bytes;
  result.final_accuracy = result.server.rounds.empty() ? 0.0 : result.server.rounds.back().accuracy;

  if (!config.metrics_out.empty()) {
    std::ofstream out(config.metrics_out);
    if (!out) throw std::runtime_error("cannot write " + config.metrics_out);
    write_rounds_csv(out, result);
  }
  if (!config.events_out.empty()) {
    std::ofstream out(config.events_out);
    if (!out) throw std::runtime_error("cannot write " + config.events_out);
    log.write_jsonl(out);
  }
  return result;
}

void write_rounds_csv(std::ostream& out, const ExperimentResult& result) {
  out << "round,time,seconds,accuracy,bytes_per_round\n";
  const auto& m = result.metrics;
  for (std::size_t i = 0; i < m.rounds.size(); ++i) {
    out << m.rounds[i].round << ',' << m.rounds[i].time << ',' << m.round_seconds[i] << ','
        << m.rounds[i].accuracy << ',' << m.bytes_per_round << '\n';
  }
}

nlohmann::json summary_json(const ExperimentResult& result) {
  const auto& m = result.metrics;
  nlohmann::json idle = nlohmann::json::object();
  for (const auto& [entity, t] : m.idle) {
    idle[std::to_string(entity)] = {{"type1", t.type1}, {"type2", t.type2}, {"fraction", m.idle_fraction(entity)}};
  }
  nlohmann::json devices = nlohmann::json::array();
  for (std::size_t i = 0; i < result.devices.size(); ++i) {
    const auto& d = result.devices[i];
    devices.push_back({{"device", i + 1},
                       {"iterations", d.iterations},
                       {"activations_sent", d.activations_sent},
                       {"rounds", d.rounds_completed},
                       {"bytes_up", m.links.at(i).up},
                       {"bytes_down", m.links.at(i).down}});
  }
  return {{"mode", to_string(result.config.mode)},
          {"exit", to_string(result.reason())},
          {"rounds", m.rounds.size()},
          {"final_accuracy", result.final_accuracy},
          {"wall_clock", m.wall_clock},
          {"split", result.plan.split},
          {"bytes_total", m.bytes_total},
          {"bytes_per_round", m.bytes_per_round},
          {"data_rounds", m.data_rounds},
          {"server_train_steps", result.server.train_steps},
          {"accepted_aggregations", result.server.accepted},
          {"rejected_aggregations", result.server.rejected},
          {"peak_resident_batches", m.peak_resident_batches},
          {"system_throughput", m.system_throughput},
          {"idle", idle},
          {"devices", devices},
          {"errors", result.errors}};
}

}  // namespace fedoptima
