#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "fedoptima/channel.hpp"
#include "fedoptima/data.hpp"
#include "fedoptima/event_log.hpp"
#include "fedoptima/nn.hpp"
#include "fedoptima/transport.hpp"

namespace fedoptima {

/// Device-side Sender Status. An activation may be sent only while active;
/// sending deactivates it and only a TURN_ON re-activates it.
class SenderGate {
 public:
  explicit SenderGate(bool active = true) : active_(active) {}
  /// Atomically takes the grant. Returns whether a send is allowed.
  bool try_consume() {
    bool expected = true;
    return active_.compare_exchange_strong(expected, false);
  }
  void grant() { active_.store(true); }
  bool active() const { return active_.load(); }

 private:
  std::atomic<bool> active_;
};

/// Online/offline switch used to simulate devices leaving and rejoining.
class Presence {
 public:
  explicit Presence(Env& env) : cv_(env.make_condvar()) {}

  void set_online(bool online);
  bool online() const;
  /// Blocks while offline. Returns false when aborted.
  bool wait_online();
  void abort();

 private:
  mutable std::mutex mutex_;
  std::unique_ptr<CondVar> cv_;
  bool online_ = true;
  bool aborted_ = false;
};

/// Per-device link stats, indexed by device id 1..K.
class LinkTable {
 public:
  explicit LinkTable(std::size_t devices);
  LinkStats& at(DeviceId id);
  const LinkStats& at(DeviceId id) const;
  std::size_t size() const { return links_.size(); }
  std::uint64_t total_bytes() const;

 private:
  std::vector<std::unique_ptr<LinkStats>> links_;
};

/// Device-side Communicator: a sender worker that paces frames at the link
/// bandwidth and a receiver worker that decodes incoming frames. TURN_ON
/// flips the gate; everything else lands in the inbox.
class DeviceComms {
 public:
  DeviceComms(Env& env, DeviceId id, DeviceTransport& transport, LinkStats& link, EventLog& log);
  ~DeviceComms();

  void start();
  /// Queues a message for the sender. False once shut down.
  bool send(Message msg);
  ChannelStatus receive(Message& out, double deadline = kForever);

  SenderGate& gate() { return gate_; }
  Presence& presence() { return presence_; }
  bool stop_requested() const { return stop_.load(); }
  DeviceId id() const { return id_; }

  /// Closes the outbox; the sender drains it and closes the transport.
  void shutdown();

 private:
  void sender_loop();
  void receiver_loop();

  Env& env_;
  DeviceId id_;
  DeviceTransport& transport_;
  LinkStats& link_;
  EventLog& log_;
  Channel<Message> outbox_;
  Channel<Message> inbox_;
  SenderGate gate_;
  Presence presence_;
  std::atomic<bool> stop_{false};
  std::atomic<bool> started_{false};
};

struct Received {
  InboundEvent event = InboundEvent::Frame;
  DeviceId from = 0;
  bool permanent = false;
  Message msg;
};

/// Server-side Communicator: receiver, dispatcher (feeds the handler, i.e.
/// the task scheduler) and sender workers.
class ServerComms {
 public:
  using Handler = std::function<void(Received&&)>;

  ServerComms(Env& env, ServerTransport& transport, LinkTable& links, EventLog& log);
  ~ServerComms();

  void start(Handler handler);
  bool send(DeviceId to, Message msg);
  /// Closes the outbox; the sender drains it and then closes the transport.
  void shutdown();

 private:
  struct Outbound {
    DeviceId to = 0;
    Message msg;
  };

  void receiver_loop();
  void dispatcher_loop();
  void sender_loop();

  Env& env_;
  ServerTransport& transport_;
  LinkTable& links_;
  EventLog& log_;
  Handler handler_;
  Channel<Inbound> received_;
  Channel<Outbound> outbox_;
};

/// Cycles through a shard in seeded random order, reshuffling each pass.
class MinibatchSampler {
 public:
  MinibatchSampler(const Dataset& shard, std::size_t batch_size, std::uint64_t seed);
  Dataset next();
  std::size_t batch_size() const { return batch_; }

 private:
  const Dataset& shard_;
  std::size_t batch_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// Modeled duration of one training step (forward plus backward, counted
/// as three forward passes) over `rows` samples at the given compute rate.
double training_seconds(const NetworkSpec& spec, std::size_t rows, double flops_per_sec);
/// Forward-only duration.
double forward_seconds(const NetworkSpec& spec, std::size_t rows, double flops_per_sec);

/// Forward through device then server network and score on a dataset.
double composed_accuracy(const NetworkSpec& head, const ParameterSet& head_params, const NetworkSpec& tail,
                         const ParameterSet& tail_params, const Dataset& data);
double network_accuracy(const NetworkSpec& spec, const ParameterSet& params, const Dataset& data);

enum class ExitReason { Converged, MaxRounds, TimeLimit, AllDeparted };
const char* to_string(ExitReason reason);

/// One completed global round as seen by the server.
struct RoundRecord {
  std::uint64_t round = 0;
  double time = 0.0;
  double accuracy = 0.0;
};

/// Tracks validation accuracy per round and the patience rule.
class ConvergenceTracker {
 public:
  explicit ConvergenceTracker(std::size_t patience) : patience_(patience) {}
  /// Returns true when accuracy has not improved for `patience` rounds.
  bool update(double accuracy);
  double best() const { return best_; }

 private:
  std::size_t patience_;
  double best_ = -1.0;
  std::size_t stale_ = 0;
};

}  // namespace fedoptima
