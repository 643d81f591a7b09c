#pragma once

#include <span>
#include <utility>

#include "fedoptima/device.hpp"
#include "fedoptima/server.hpp"

namespace fedoptima {

enum class BaselineKind { FedAvg, FedAsync, SyncSplit, Oafl };
const char* to_string(BaselineKind kind);

/// Shard-size weighted mean of local models.
ParameterSet fedavg_round(std::span<const std::pair<ParameterSet, std::size_t>> locals);

/// FedAsync update of a full model with the same staleness law as the
/// split server: rejected when t - t_k > D, otherwise mixed with weight
/// 1/(t - t_k + 1) and the version bumped.
AggregateResult fedasync_aggregate(ParameterSet& global, std::uint64_t& version, const ParameterSet& local,
                                   std::uint64_t local_version, std::uint64_t max_delay);

/// Plain minibatch SGD on one dataset, the centralized reference. Uses the
/// same sampler as a device seeded with `sampler_seed`.
ParameterSet centralized_sgd(const NetworkSpec& spec, ParameterSet params, const Dataset& train,
                             std::size_t batch_size, float lr, std::size_t steps, std::uint64_t sampler_seed);

/// One split-training step computed in a single place: device forward,
/// server step, device backward with the returned gradient. Returns the
/// gradient the server sends back.
Tensor split_step(const NetworkSpec& device_spec, ParameterSet& device_params, const NetworkSpec& server_spec,
                  ParameterSet& server_params, const Dataset& batch, float lr_device, float lr_server);

/// Device loop of classic FL: H local SGD steps on the full network, then
/// upload and wait for the next global model.
DeviceResult run_full_device(Env& env, DeviceComms& comms, const DeviceConfig& config, const NetworkSpec& spec,
                             const ParameterSet& initial, const Dataset& shard, EventLog& log,
                             const char* wait_reason);

/// Device loop of split training without an auxiliary network: every
/// iteration sends its activation and waits for the gradient.
DeviceResult run_split_device(Env& env, DeviceComms& comms, const DeviceConfig& config, const SplitPlan& plan,
                              const ParameterSet& initial, const Dataset& shard, EventLog& log,
                              const char* sync_reason);

/// Synchronous FedAvg. global.device_params holds the full model.
ServerResult run_fedavg_server(Env& env, ServerComms& comms, const ServerConfig& config, const NetworkSpec& spec,
                               ParameterSet initial, std::vector<std::size_t> shard_sizes, const Dataset& validation,
                               EventLog& log);

/// FedAsync: every upload is aggregated on arrival.
ServerResult run_fedasync_server(Env& env, ServerComms& comms, const ServerConfig& config, const NetworkSpec& spec,
                                 ParameterSet initial, const Dataset& validation, EventLog& log);

/// SplitFed-style synchronous split training: one server copy per device,
/// gradients returned every iteration, FedAvg of device models and server
/// copies at a round barrier.
ServerResult run_sync_split_server(Env& env, ServerComms& comms, const ServerConfig& config, const SplitPlan& plan,
                                   ParameterSet server_init, ParameterSet device_init,
                                   std::vector<std::size_t> shard_sizes, const Dataset& validation, EventLog& log);

/// OAFL: split training with per-device server copies, aggregated
/// asynchronously with the FedAsync law whenever a device uploads.
ServerResult run_oafl_server(Env& env, ServerComms& comms, const ServerConfig& config, const SplitPlan& plan,
                             ParameterSet server_init, ParameterSet device_init, const Dataset& validation,
                             EventLog& log);

}  // namespace fedoptima
