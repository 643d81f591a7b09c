#pragma once

#include <deque>
#include <functional>
#include <mutex>
#include <optional>

#include "fedoptima/comms.hpp"
#include "fedoptima/partitioner.hpp"

namespace fedoptima {

class ProtocolViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PutResult { Queued, Dropped };

/// Work handed to the server Compute Engine by get().
struct Task {
  enum class Kind { Model, Activation };
  Kind kind = Kind::Activation;
  DeviceId origin = 0;
  ModelUpdate model;
  ActivationBatch batch;
};

/// One activation dequeue, recorded for fairness audits. Counters and queue
/// lengths are the values just before the dequeue.
struct DequeueRecord {
  DeviceId chosen = 0;
  std::vector<std::uint64_t> counters;
  std::vector<std::size_t> queue_lengths;
};

/// Task Scheduler: a FIFO model queue with priority over bounded
/// per-device activation queues, balanced by consumption counters, plus the
/// server half of activation flow control.
class TaskScheduler {
 public:
  using GrantSink = std::function<void(DeviceId)>;

  /// Devices start with one grant outstanding because their Sender Status
  /// begins active.
  TaskScheduler(Env& env, std::size_t devices, std::size_t omega_dev, GrantSink grants = {});

  /// Queues a model upload or activation batch. Activations from unknown or
  /// departed devices are dropped; an activation arriving at a full queue is
  /// a protocol violation.
  PutResult put(Message msg);

  /// Model queue first, then the non-empty activation queue with the
  /// smallest counter (ties to the smallest id).
  std::optional<Task> get();

  /// Blocks until work is queued, the scheduler is closed or the deadline
  /// passes. Returns whether work is available.
  bool wait_for_work(double deadline);

  void device_left(DeviceId id, bool permanent);
  void device_joined(DeviceId id);
  void close();

  std::size_t devices() const { return devices_; }
  std::size_t omega_dev() const { return omega_dev_; }
  std::size_t queue_length(DeviceId id) const;
  std::size_t model_queue_length() const;
  std::uint64_t counter(DeviceId id) const;
  bool grant_outstanding(DeviceId id) const;
  bool present(DeviceId id) const;
  std::size_t resident_batches() const;
  std::size_t peak_resident_batches() const;
  std::size_t peak_queue_length() const;
  std::uint64_t peak_resident_bytes() const;
  std::uint64_t grants_sent() const;
  std::uint64_t dropped() const;
  /// True once every device left permanently and nothing is queued.
  bool drained_and_departed() const;

  void enable_trace(bool on);
  std::vector<DequeueRecord> trace() const;

 private:
  struct DeviceSlot {
    std::deque<ActivationBatch> queue;
    std::uint64_t counter = 0;
    bool outstanding = true;
    bool present = true;
    bool permanent_gone = false;
  };

  DeviceSlot& slot(DeviceId id);
  const DeviceSlot& slot(DeviceId id) const;
  /// Under the lock: decides whether device `id` gets a TURN_ON.
  bool flow_control_check(DeviceSlot& s);
  void emit(std::optional<DeviceId> grant);

  Env& env_;
  std::size_t devices_;
  std::size_t omega_dev_;
  GrantSink grants_;
  mutable std::mutex mutex_;
  std::unique_ptr<CondVar> work_;
  std::deque<std::pair<DeviceId, ModelUpdate>> models_;
  std::vector<DeviceSlot> slots_;
  std::size_t resident_ = 0;
  std::uint64_t resident_bytes_ = 0;
  std::size_t peak_resident_ = 0;
  std::size_t peak_queue_ = 0;
  std::uint64_t peak_bytes_ = 0;
  std::uint64_t grants_sent_ = 0;
  std::uint64_t dropped_ = 0;
  std::size_t departed_ = 0;
  bool closed_ = false;
  bool tracing_ = false;
  std::vector<DequeueRecord> trace_;
};

/// Bytes an activation batch occupies while resident on the server.
std::uint64_t resident_bytes(const ActivationBatch& batch);

/// The global device-side model {theta_d, aux theta_d, t}.
struct GlobalDeviceModel {
  ParameterSet device_params;
  ParameterSet aux_params;
  std::uint64_t version = 0;

  ModelUpdate as_update() const;
};

struct AggregateResult {
  bool accepted = false;
  float alpha = 0.0F;
  std::uint64_t staleness = 0;
};

/// Staleness-capped asynchronous aggregation: rejects when t - t_k > D,
/// otherwise mixes with weight 1/(t - t_k + 1) and bumps the version.
AggregateResult aggregate(GlobalDeviceModel& global, const ModelUpdate& update, std::uint64_t max_delay);

/// x <- alpha * local + (1 - alpha) * x for every tensor.
void mix_into(ParameterSet& global, const ParameterSet& local, float alpha);

struct StepResult {
  float loss = 0.0F;
  Gradients grads;
};

/// One SGD step of the server network on an activation batch. The input
/// gradient is returned as well (used by the split baselines).
StepResult train_step(const NetworkSpec& server_spec, ParameterSet& server_params, const ActivationBatch& batch,
                      float lr);

struct ServerConfig {
  std::size_t devices = 4;         // K
  std::size_t max_rounds = 200;    // E_s
  float lr = 0.05F;                // gamma_s
  std::uint64_t max_delay = 4;     // D
  std::size_t omega = 8;           // global activation budget
  std::size_t omega_dev = 0;       // per-device cap, 0 = ceil(omega / K)
  std::size_t patience = 5;
  double flops_per_sec = 1e9;
  double time_limit = kForever;    // seconds on the environment clock
  double poll_seconds = 0.01;

  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
  std::size_t effective_omega_dev() const;
};

struct ServerResult {
  ParameterSet server_params;
  GlobalDeviceModel global;
  std::vector<RoundRecord> rounds;
  ExitReason reason = ExitReason::MaxRounds;
  std::uint64_t train_steps = 0;
  std::uint64_t accepted = 0;
  std::uint64_t rejected = 0;
  std::size_t peak_resident_batches = 0;
  std::uint64_t peak_resident_bytes = 0;
  std::size_t server_models = 1;
};

/// Server Compute Engine. Starts the communicator (whose dispatcher feeds
/// the scheduler), trains until convergence, E_s rounds, the time limit or
/// until every device has left, then broadcasts STOP and shuts down.
ServerResult run_server(Env& env, ServerComms& comms, const ServerConfig& config, const SplitPlan& plan,
                        ParameterSet server_params, GlobalDeviceModel global, const Dataset& validation,
                        EventLog& log);

}  // namespace fedoptima
