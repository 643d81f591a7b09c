#pragma once

#include <optional>

#include "fedoptima/comms.hpp"
#include "fedoptima/partitioner.hpp"

namespace fedoptima {

/// Everything the device-side Compute Engine owns.
struct DeviceState {
  DeviceId id = 1;
  NetworkSpec device_spec;
  NetworkSpec aux_spec;
  ParameterSet device_params;
  ParameterSet aux_params;
  std::uint64_t version = 0;  // t_k, version of the last global model received
  std::uint64_t round = 0;
  std::uint64_t iteration = 0;
  std::uint64_t sequence = 0;  // activation batches emitted so far
  float lr = 0.05F;
};

DeviceState make_device_state(DeviceId id, const SplitPlan& plan, const ModelUpdate& initial, float lr);

struct IterationResult {
  float loss = 0.0F;
  std::optional<ActivationBatch> activation;
};

/// One local step: device forward, gated activation emission, auxiliary
/// loss, backward through both networks and an SGD update of both.
IterationResult local_iteration(DeviceState& state, SenderGate& gate, const Dataset& batch);

enum class SyncOutcome { Replaced, Stopped, Closed };

/// Uploads {device params, aux params, t_k} and blocks until the global
/// model (or STOP) arrives. The wait is logged as idle with `wait_reason`.
SyncOutcome end_of_round_sync(DeviceState& state, DeviceComms& comms, Env& env, EventLog& log,
                              const char* wait_reason = "sync_wait");

struct DeviceConfig {
  std::size_t batch_size = 32;
  std::size_t iters_per_round = 10;  // H
  std::size_t rounds = 1000;         // E_dk
  float lr = 0.05F;
  double flops_per_sec = 2e8;  // effective rate, after the speed multiplier
  std::uint64_t seed = 1;
};

struct DeviceResult {
  ParameterSet device_params;
  ParameterSet aux_params;
  std::uint64_t version = 0;
  std::uint64_t iterations = 0;
  std::uint64_t activations_sent = 0;
  std::uint64_t rounds_completed = 0;
  bool stopped = false;  // true when STOP ended the run
};

/// Device Compute Engine. Starts the communicator workers, trains for up to
/// `rounds` rounds of H iterations and shuts the communicator down on exit.
DeviceResult run_device(Env& env, DeviceComms& comms, const DeviceConfig& config, const SplitPlan& plan,
                        const ModelUpdate& initial, const Dataset& shard, EventLog& log);

}  // namespace fedoptima
