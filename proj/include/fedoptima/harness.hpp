#pragma once

#include <iosfwd>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedoptima/baselines.hpp"
#include "fedoptima/data.hpp"

namespace fedoptima {

enum class Mode { FedOptima, FedAvg, FedAsync, SyncSplit, Oafl };
const char* to_string(Mode mode);
Mode mode_from_string(const std::string& name);

struct ExperimentConfig {
  Mode mode = Mode::FedOptima;
  std::size_t devices = 4;
  std::string network = "dense";
  std::size_t split = 0;  // 0 = let the partitioner choose
  std::size_t aux_depth = 1;
  float lr_device = 0.05F;
  float lr_server = 0.05F;
  std::size_t batch_size = 32;
  std::size_t iters_per_round = 10;
  std::size_t device_rounds = 1000000;
  std::size_t server_rounds = 200;
  std::uint64_t max_delay = 4;
  std::size_t omega = 8;
  std::size_t omega_dev = 0;  // 0 = ceil(omega / K)
  std::size_t patience = 5;
  std::uint64_t seed = 1;

  std::vector<double> speed_multipliers;  // one per device, empty = all 1
  std::vector<double> bandwidths;         // bytes/s per device, empty = `bandwidth`
  double bandwidth = 10e6;
  double bandwidth_min = 5e6;  // churn redraw range
  double bandwidth_max = 20e6;
  double device_flops = 2e8;
  double server_flops = 5e8;

  bool unstable = false;
  double unstable_p = 0.0;
  double unstable_interval = 10.0;

  std::string transport = "inproc";  // inproc | socket
  bool simulated = true;             // virtual clock; inproc only
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  double time_limit = kForever;

  std::size_t classes = 3;
  std::size_t dim = 16;
  std::size_t samples = 3000;
  double spread = 0.25;
  double dirichlet = 0.5;

  std::string metrics_out;  // per-round CSV
  std::string events_out;   // JSON lines

  /// Throws std::invalid_argument describing the first problem found.
  void validate() const;
  /// Sets one field from its config-file key. Throws on unknown keys or
  /// unparsable values.
  void set(const std::string& key, const std::string& value);
  nlohmann::json to_json() const;

  double speed_multiplier(std::size_t device_index) const;
  double link_bandwidth(std::size_t device_index) const;
};

/// Reads `key = value` lines (blank lines and # comments ignored) on top of
/// `base`.
ExperimentConfig load_config(std::istream& in, ExperimentConfig base = {});

/// Named reference networks: "dense" (3 hidden dense layers of 64 with
/// relu, then a classifier) and "conv" (two 3x3 convolutions with 4
/// channels on a square single-channel input, then a classifier).
NetworkSpec build_network(const std::string& name, std::size_t input_dim, std::size_t classes);

/// Reproducible sub-seed for a named stream.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// ---------------------------------------------------------------------------
// Metrics

struct IdleTotals {
  double type1 = 0.0;
  double type2 = 0.0;
  double total() const { return type1 + type2; }
};

/// Idle time per entity. Waiting on the scheduler, a model exchange, a
/// gradient or a grant is Type I. A barrier wait is Type II until the
/// round's barrier is reached (the last device arrived) and Type I after.
std::map<int, IdleTotals> measure_idle(const std::vector<Event>& events);

struct LinkBytes {
  std::uint64_t up = 0;
  std::uint64_t down = 0;
  std::uint64_t frames_up = 0;
  std::uint64_t frames_down = 0;
};

struct MetricsRecord {
  std::map<int, IdleTotals> idle;
  std::map<int, std::uint64_t> samples;       // samples through a forward pass
  std::map<int, double> throughput;           // samples/s after the first round
  double system_throughput = 0.0;
  std::vector<LinkBytes> links;               // index k-1 for device k
  std::uint64_t bytes_total = 0;
  double data_rounds = 0.0;      // device samples / training-set size
  double bytes_per_round = 0.0;  // bytes per pass over the training data
  std::vector<RoundRecord> rounds;
  std::vector<double> round_seconds;
  std::size_t peak_resident_batches = 0;
  std::uint64_t peak_resident_bytes = 0;
  double wall_clock = 0.0;

  double idle_fraction(int entity) const;
};

MetricsRecord compute_metrics(const std::vector<Event>& events, const std::vector<LinkBytes>& links,
                              const std::vector<RoundRecord>& rounds, double wall_clock, std::size_t dataset_size);

/// Accuracy of the last round completed at or before `time`, or -1.
double accuracy_at(const std::vector<RoundRecord>& rounds, double time);

// ---------------------------------------------------------------------------
// Churn

struct ChurnDecision {
  DeviceId device = 0;
  bool leave = false;
  double bandwidth = 0.0;  // redrawn bandwidth when not leaving
};

/// Seeded per-interval decisions: each device leaves with probability p,
/// otherwise its bandwidth is drawn uniformly from [min, max].
class ChurnSchedule {
 public:
  ChurnSchedule(double p, double bandwidth_min, double bandwidth_max, std::size_t devices, std::uint64_t seed);
  std::vector<ChurnDecision> next_interval();

 private:
  double p_;
  double bw_min_;
  double bw_max_;
  std::size_t devices_;
  std::mt19937_64 rng_;
};

/// Applies a churn schedule every `interval` seconds until `done` closes.
/// Leaving pauses the device and tells the server; a redraw on an absent
/// device brings it back.
void churn_driver(Env& env, double interval, ChurnSchedule schedule, std::vector<DeviceComms*> devices,
                  LinkTable& links, ServerTransport& server, EventLog& log, Channel<int>& done);

// ---------------------------------------------------------------------------
// Memory

enum class MemoryModel { Oafl, FedOptima };

/// OAFL keeps K server copies plus a global model and K activations:
///   (K + 1) * model + K * act.
/// FedOptima keeps one server model plus at most omega activations:
///   model + omega * act.
double estimate_memory(MemoryModel kind, std::size_t devices, double model_bytes, double activation_bytes,
                       std::size_t omega);

// ---------------------------------------------------------------------------
// Experiments

struct ExperimentResult {
  ExperimentConfig config;
  SplitPlan plan;
  ServerResult server;
  std::vector<DeviceResult> devices;
  std::vector<Event> events;
  MetricsRecord metrics;
  double final_accuracy = 0.0;
  std::vector<std::string> errors;

  ExitReason reason() const { return server.reason; }
};

/// Builds data, plan and models from the config, runs the server and K
/// devices to completion, and collects metrics. Writes metrics and events
/// when the config names output paths.
ExperimentResult run_experiment(const ExperimentConfig& config);

void write_rounds_csv(std::ostream& out, const ExperimentResult& result);
nlohmann::json summary_json(const ExperimentResult& result);

}  // namespace fedoptima
