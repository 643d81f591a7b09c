#include "fedoptima/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace fedoptima {

const char* to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::FedAvg: return "fedavg";
    case BaselineKind::FedAsync: return "fedasync";
    case BaselineKind::SyncSplit: return "syncsplit";
    case BaselineKind::Oafl: return "oafl";
  }
  return "unknown";
}

ParameterSet fedavg_round(std::span<const std::pair<ParameterSet, std::size_t>> locals) {
  if (locals.empty()) throw std::invalid_argument("fedavg needs at least one local model");
  double total = 0.0;
  for (const auto& [params, n] : locals) {
    if (!params.same_shapes(locals.front().first)) throw ShapeError("local models have different shapes");
    total += static_cast<double>(n);
  }
  if (!(total > 0.0)) throw std::invalid_argument("fedavg needs a positive total shard size");

  ParameterSet out = locals.front().first;
  for (std::size_t t = 0; t < out.tensors.size(); ++t) {
    auto dst = out.tensors[t].data();
    std::vector<double> acc(dst.size(), 0.0);
    for (const auto& [params, n] : locals) {
      const double w = static_cast<double>(n) / total;
      const auto src = params.tensors[t].data();
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += w * static_cast<double>(src[j]);
    }
    for (std::size_t j = 0; j < acc.size(); ++j) dst[j] = static_cast<float>(acc[j]);
  }
  return out;
}

AggregateResult fedasync_aggregate(ParameterSet& global, std::uint64_t& version, const ParameterSet& local,
                                   std::uint64_t local_version, std::uint64_t max_delay) {
  AggregateResult r;
  r.staleness = version > local_version ? version - local_version : 0;
  if (r.staleness > max_delay) return r;
  r.alpha = 1.0F / static_cast<float>(r.staleness + 1);
  mix_into(global, local, r.alpha);
  version += 1;
  global.version = version;
  r.accepted = true;
  return r;
}

ParameterSet centralized_sgd(const NetworkSpec& spec, ParameterSet params, const Dataset& train,
                             std::size_t batch_size, float lr, std::size_t steps, std::uint64_t sampler_seed) {
  MinibatchSampler sampler(train, batch_size, sampler_seed);
  for (std::size_t i = 0; i < steps; ++i) {
    const Dataset batch = sampler.next();
    auto fwd = forward(spec, params, batch.features, true);
    auto loss = cross_entropy_loss(fwd.output, batch.labels);
    auto grads = backward(*fwd.tape, loss.grad);
    sgd_step(params, grads.params, lr);
  }
  return params;
}

Tensor split_step(const NetworkSpec& device_spec, ParameterSet& device_params, const NetworkSpec& server_spec,
                  ParameterSet& server_params, const Dataset& batch, float lr_device, float lr_server) {
  auto dev = forward(device_spec, device_params, batch.features, true);
  ActivationBatch a{dev.output, batch.labels, 1, 0};
  auto step = train_step(server_spec, server_params, a, lr_server);
  auto grads = backward(*dev.tape, step.grads.input);
  sgd_step(device_params, grads.params, lr_device);
  return step.grads.input;
}

// ---------------------------------------------------------------------------
// Devices

namespace {

DeviceResult device_result(const ParameterSet& params, std::uint64_t version, std::uint64_t iterations,
                           std::uint64_t sent, std::uint64_t rounds, bool stopped) {
  DeviceResult r;
  r.device_params = params;
  r.version = version;
  r.iterations = iterations;
  r.activations_sent = sent;
  r.rounds_completed = rounds;
  r.stopped = stopped;
  return r;
}

enum class WaitOutcome { Got, Stopped, Closed };

/// Waits for a message of `kind` from the server, logging the wait as idle.
WaitOutcome wait_for(DeviceComms& comms, Env& env, EventLog& log, MessageKind kind, Message& out,
                     const char* reason, std::int64_t round) {
  const double start = env.now();
  const int entity = static_cast<int>(comms.id());
  for (;;) {
    if (comms.receive(out, kForever) != ChannelStatus::Ok) {
      log.idle(entity, start, env.now(), reason, round);
      return WaitOutcome::Closed;
    }
    if (out.kind == MessageKind::Stop) {
      log.idle(entity, start, env.now(), reason, round);
      return WaitOutcome::Stopped;
    }
    if (out.kind == kind) break;
  }
  log.idle(entity, start, env.now(), reason, round);
  return WaitOutcome::Got;
}

/// Blocks while the device is offline. False when the run ended meanwhile.
bool await_presence(DeviceComms& comms, Env& env, EventLog& log) {
  if (comms.presence().online()) return true;
  const double away = env.now();
  if (!comms.presence().wait_online()) return false;
  log.record(static_cast<int>(comms.id()), "offline", {{"start", away}, {"end", env.now()}});
  return true;
}

}  // namespace

DeviceResult run_full_device(Env& env, DeviceComms& comms, const DeviceConfig& config, const NetworkSpec& spec,
                             const ParameterSet& initial, const Dataset& shard, EventLog& log,
                             const char* wait_reason) {
  comms.start();
  const int entity = static_cast<int>(comms.id());
  ParameterSet params = initial;
  std::uint64_t version = initial.version;
  std::uint64_t iterations = 0;
  std::uint64_t round = 0;
  const double step_seconds = training_seconds(spec, config.batch_size, config.flops_per_sec);

  auto finish = [&](bool stopped) {
    comms.shutdown();
    return device_result(params, version, iterations, 0, round, stopped);
  };
  if (config.rounds == 0) return finish(false);
  MinibatchSampler sampler(shard, config.batch_size, config.seed);

  for (std::size_t e = 0; e < config.rounds; ++e) {
    for (std::size_t h = 0; h < config.iters_per_round; ++h) {
      if (comms.stop_requested() || !await_presence(comms, env, log)) return finish(true);
      const double start = env.now();
      const Dataset batch = sampler.next();
      auto fwd = forward(spec, params, batch.features, true);
      auto loss = cross_entropy_loss(fwd.output, batch.labels);
      if (!std::isfinite(loss.loss)) throw NumericError("device " + std::to_string(entity) + ": non-finite loss");
      auto grads = backward(*fwd.tape, loss.grad);
      sgd_step(params, grads.params, config.lr);
      ++iterations;
      env.sleep_until(start + step_seconds);
      log.record(entity, "iteration",
                 {{"round", round}, {"loss", loss.loss}, {"sent", false}, {"samples", batch.size()}});
    }
    ModelUpdate up{params, {}, version};
    up.device_params.version = version;
    if (!comms.send(Message::model_upload(comms.id(), std::move(up)))) return finish(false);
    Message msg;
    const auto got = wait_for(comms, env, log, MessageKind::GlobalModel, msg, wait_reason,
                              static_cast<std::int64_t>(round));
    if (got != WaitOutcome::Got) return finish(got == WaitOutcome::Stopped);
    params = std::move(msg.model().device_params);
    version = msg.model().version;
    params.version = version;
    ++round;
  }
  return finish(false);
}

DeviceResult run_split_device(Env& env, DeviceComms& comms, const DeviceConfig& config, const SplitPlan& plan,
                              const ParameterSet& initial, const Dataset& shard, EventLog& log,
                              const char* sync_reason) {
  comms.start();
  const int entity = static_cast<int>(comms.id());
  ParameterSet params = initial;
  std::uint64_t version = initial.version;
  std::uint64_t iterations = 0;
  std::uint64_t sequence = 0;
  std::uint64_t round = 0;
  const double fwd_seconds = forward_seconds(plan.device_spec, config.batch_size, config.flops_per_sec);

  auto finish = [&](bool stopped) {
    comms.shutdown();
    return device_result(params, version, iterations, sequence, round, stopped);
  };
  if (config.rounds == 0) return finish(false);
  MinibatchSampler sampler(shard, config.batch_size, config.seed);

  for (std::size_t e = 0; e < config.rounds; ++e) {
    for (std::size_t h = 0; h < config.iters_per_round; ++h) {
      if (comms.stop_requested() || !await_presence(comms, env, log)) return finish(true);
      const double start = env.now();
      const Dataset batch = sampler.next();
      auto fwd = forward(plan.device_spec, params, batch.features, true);
      env.sleep_until(start + fwd_seconds);
      const std::uint64_t seq = sequence++;
      if (!comms.send(Message::activation(ActivationBatch{fwd.output, batch.labels, comms.id(), seq}))) {
        return finish(false);
      }

      Message reply;
      for (;;) {
        const auto got = wait_for(comms, env, log, MessageKind::Activation, reply, "gradient_wait",
                                  static_cast<std::int64_t>(round));
        if (got != WaitOutcome::Got) return finish(got == WaitOutcome::Stopped);
        if (reply.batch().sequence == seq) break;
      }
      const double resumed = env.now();
      auto grads = backward(*fwd.tape, reply.batch().features);
      sgd_step(params, grads.params, config.lr);
      ++iterations;
      env.sleep_until(resumed + 2.0 * fwd_seconds);
      log.record(entity, "iteration", {{"round", round}, {"sent", true}, {"samples", batch.size()}});
    }
    ModelUpdate up{params, {}, version};
    up.device_params.version = version;
    if (!comms.send(Message::model_upload(comms.id(), std::move(up)))) return finish(false);
    Message msg;
    const auto got = wait_for(comms, env, log, MessageKind::GlobalModel, msg, sync_reason,
                              static_cast<std::int64_t>(round));
    if (got != WaitOutcome::Got) return finish(got == WaitOutcome::Stopped);
    params = std::move(msg.model().device_params);
    version = msg.model().version;
    params.version = version;
    ++round;
  }
  return finish(false);
}

// ---------------------------------------------------------------------------
// Servers

namespace {

/// Received messages in arrival order plus who is still around. Shared
/// with the dispatcher worker, which may outlive the server loop briefly.
class Inbox {
 public:
  Inbox(Env& env, ServerComms& comms, EventLog& log, std::size_t devices)
      : env_(env),
        log_(log),
        queue_(std::make_shared<Channel<Received>>(env, 1 << 16)),
        present_(devices, true),
        gone_(devices, false) {
    comms.start([q = queue_](Received&& r) { q->push(std::move(r)); });
  }

  ~Inbox() { queue_->close(); }

  /// Next message or presence event. Time spent waiting is logged as idle.
  ChannelStatus next(Received& out, double deadline, const char* reason, std::int64_t round) {
    const double start = env_.now();
    const auto status = queue_->pop_until(out, deadline);
    log_.idle(0, start, env_.now(), reason, round);
    if (status != ChannelStatus::Ok) return status;
    if (out.from >= 1 && out.from <= present_.size()) {
      const std::size_t k = out.from - 1;
      if (out.event == InboundEvent::Disconnected) {
        present_[k] = false;
        if (out.permanent) gone_[k] = true;
        log_.record(0, "device_left", {{"device", out.from}, {"permanent", out.permanent}});
      } else if (out.event == InboundEvent::Connected) {
        present_[k] = true;
        log_.record(0, "device_joined", {{"device", out.from}});
      }
    }
    return status;
  }

  /// Devices that have not left for good.
  std::size_t remaining() const { return static_cast<std::size_t>(std::count(gone_.begin(), gone_.end(), false)); }
  bool gone(DeviceId id) const { return gone_.at(id - 1); }

 private:
  Env& env_;
  EventLog& log_;
  std::shared_ptr<Channel<Received>> queue_;
  std::vector<bool> present_;
  std::vector<bool> gone_;
};

/// Round bookkeeping shared by the baseline servers.
class Rounds {
 public:
  Rounds(Env& env, const ServerConfig& config, EventLog& log, ServerResult& result)
      : env_(env), config_(config), log_(log), result_(result), convergence_(config.patience), t0_(env.now()) {}

  double deadline() const { return t0_ + config_.time_limit; }
  std::uint64_t round() const { return round_; }
  bool out_of_time() const { return env_.now() >= deadline(); }

  /// Records a completed round. Returns true when training should stop.
  bool complete(double accuracy, std::uint64_t version) {
    ++round_;
    result_.rounds.push_back({round_, env_.now() - t0_, accuracy});
    log_.record(0, "round", {{"round", round_}, {"accuracy", accuracy}, {"version", version}});
    if (convergence_.update(accuracy)) {
      result_.reason = ExitReason::Converged;
      return true;
    }
    if (round_ >= config_.max_rounds) {
      result_.reason = ExitReason::MaxRounds;
      return true;
    }
    return false;
  }

 private:
  Env& env_;
  const ServerConfig& config_;
  EventLog& log_;
  ServerResult& result_;
  ConvergenceTracker convergence_;
  double t0_;
  std::uint64_t round_ = 0;
};

void stop_all(ServerComms& comms, const ServerConfig& config, EventLog& log, const ServerResult& result,
              std::uint64_t round) {
  for (DeviceId k = 1; k <= config.devices; ++k) comms.send(k, Message::stop());
  log.record(0, "stop", {{"reason", to_string(result.reason)}, {"round", round}});
  comms.shutdown();
}

double mixing_seconds(const ParameterSet& params, std::size_t copies, double flops) {
  return 2.0 * static_cast<double>(params.scalar_count() * copies) / flops;
}

/// Server half of a split iteration: train the device's copy, reply with
/// the input gradient.
void serve_activation(Env& env, ServerComms& comms, const ServerConfig& config, const SplitPlan& plan,
                      ParameterSet& copy, const ActivationBatch& batch, EventLog& log, ServerResult& result) {
  const double start = env.now();
  auto step = train_step(plan.server_spec, copy, batch, config.lr);
  env.sleep_until(start + training_seconds(plan.server_spec, batch.labels.size(), config.flops_per_sec));
  ActivationBatch grad{std::move(step.grads.input), batch.labels, kServerId, batch.sequence};
  comms.send(batch.origin, Message::activation(std::move(grad)));
  ++result.train_steps;
  log.record(0, "train_step",
             {{"origin", batch.origin}, {"sequence", batch.sequence}, {"loss", step.loss},
              {"samples", batch.labels.size()}});
}

bool barrier_complete(const std::map<DeviceId, ParameterSet>& uploads, const Inbox& inbox, std::size_t devices) {
  for (DeviceId k = 1; k <= devices; ++k) {
    if (!inbox.gone(k) && uploads.count(k) == 0) return false;
  }
  return !uploads.empty();
}

}  // namespace

ServerResult run_fedavg_server(Env& env, ServerComms& comms, const ServerConfig& config, const NetworkSpec& spec,
                               ParameterSet initial, std::vector<std::size_t> shard_sizes, const Dataset& validation,
                               EventLog& log) {
  if (shard_sizes.size() != config.devices) throw std::invalid_argument("need one shard size per device");
  ServerResult result;
  Inbox inbox(env, comms, log, config.devices);
  Rounds rounds(env, config, log, result);
  ParameterSet global = std::move(initial);
  std::uint64_t version = global.version;
  std::map<DeviceId, ParameterSet> uploads;

  bool done = config.max_rounds == 0;
  while (!done) {
    if (rounds.out_of_time()) {
      result.reason = ExitReason::TimeLimit;
      break;
    }
    if (inbox.remaining() == 0) {
      result.reason = ExitReason::AllDeparted;
      break;
    }
    Received r;
    const auto status = inbox.next(r, rounds.deadline(), "model_wait", static_cast<std::int64_t>(rounds.round()));
    if (status == ChannelStatus::Closed) break;
    if (status == ChannelStatus::Timeout) continue;
    if (r.event == InboundEvent::Frame && r.msg.kind == MessageKind::ModelUpload) {
      uploads[r.from] = std::move(r.msg.model().device_params);
    }
    if (!barrier_complete(uploads, inbox, config.devices)) continue;

    log.record(0, "barrier", {{"round", rounds.round()}});
    std::vector<std::pair<ParameterSet, std::size_t>> locals;
    for (auto& [k, p] : uploads) locals.emplace_back(std::move(p), shard_sizes[k - 1]);
    const double start = env.now();
    global = fedavg_round(locals);
    env.sleep_until(start + mixing_seconds(global, locals.size(), config.flops_per_sec));
    global.version = ++version;
    ++result.accepted;
    for (const auto& [k, p] : uploads) {
      (void)p;
      comms.send(k, Message::global_model(ModelUpdate{global, {}, version}));
    }
    uploads.clear();
    done = rounds.complete(network_accuracy(spec, global, validation), version);
  }

  stop_all(comms, config, log, result, rounds.round());
  result.global.device_params = std::move(global);
  result.global.version = version;
  result.server_models = 1;
  return result;
}

ServerResult run_fedasync_server(Env& env, ServerComms& comms, const ServerConfig& config, const NetworkSpec& spec,
                                 ParameterSet initial, const Dataset& validation, EventLog& log) {
  ServerResult result;
  Inbox inbox(env, comms, log, config.devices);
  Rounds rounds(env, config, log, result);
  ParameterSet global = std::move(initial);
  std::uint64_t version = global.version;

  bool done = config.max_rounds == 0;
  while (!done) {
    if (rounds.out_of_time()) {
      result.reason = ExitReason::TimeLimit;
      break;
    }
    if (inbox.remaining() == 0) {
      result.reason = ExitReason::AllDeparted;
      break;
    }
    Received r;
    const auto status = inbox.next(r, rounds.deadline(), "model_wait", static_cast<std::int64_t>(rounds.round()));
    if (status == ChannelStatus::Closed) break;
    if (status == ChannelStatus::Timeout) continue;
    if (r.event != InboundEvent::Frame || r.msg.kind != MessageKind::ModelUpload) continue;

    const double start = env.now();
    const auto& up = r.msg.model();
    const auto agg = fedasync_aggregate(global, version, up.device_params, up.version, config.max_delay);
    env.sleep_until(start + mixing_seconds(global, 1, config.flops_per_sec));
    log.record(0, "aggregate",
               {{"origin", r.from}, {"accepted", agg.accepted}, {"alpha", agg.alpha},
                {"staleness", agg.staleness}, {"version", version}});
    comms.send(r.from, Message::global_model(ModelUpdate{global, {}, version}));
    if (!agg.accepted) {
      ++result.rejected;
      continue;
    }
    ++result.accepted;
    if (version % config.devices == 0) done = rounds.complete(network_accuracy(spec, global, validation), version);
  }

  stop_all(comms, config, log, result, rounds.round());
  result.global.device_params = std::move(global);
  result.global.version = version;
  result.server_models = 1;
  return result;
}

ServerResult run_sync_split_server(Env& env, ServerComms& comms, const ServerConfig& config, const SplitPlan& plan,
                                   ParameterSet server_init, ParameterSet device_init,
                                   std::vector<std::size_t> shard_sizes, const Dataset& validation, EventLog& log) {
  if (shard_sizes.size() != config.devices) throw std::invalid_argument("need one shard size per device");
  ServerResult result;
  Inbox inbox(env, comms, log, config.devices);
  Rounds rounds(env, config, log, result);
  std::vector<ParameterSet> copies(config.devices, server_init);
  ParameterSet server_avg = std::move(server_init);
  ParameterSet device_avg = std::move(device_init);
  std::uint64_t version = device_avg.version;
  std::map<DeviceId, ParameterSet> uploads;

  bool done = config.max_rounds == 0;
  while (!done) {
    if (rounds.out_of_time()) {
      result.reason = ExitReason::TimeLimit;
      break;
    }
    if (inbox.remaining() == 0) {
      result.reason = ExitReason::AllDeparted;
      break;
    }
    Received r;
    const auto status =
        inbox.next(r, rounds.deadline(), "scheduler_empty", static_cast<std::int64_t>(rounds.round()));
    if (status == ChannelStatus::Closed) break;
    if (status == ChannelStatus::Timeout) continue;
    if (r.event != InboundEvent::Frame) {
      if (!barrier_complete(uploads, inbox, config.devices)) continue;
    } else if (r.msg.kind == MessageKind::Activation) {
      serve_activation(env, comms, config, plan, copies.at(r.from - 1), r.msg.batch(), log, result);
      continue;
    } else if (r.msg.kind == MessageKind::ModelUpload) {
      uploads[r.from] = std::move(r.msg.model().device_params);
      if (!barrier_complete(uploads, inbox, config.devices)) continue;
    } else {
      continue;
    }

    log.record(0, "barrier", {{"round", rounds.round()}});
    const double start = env.now();
    std::vector<std::pair<ParameterSet, std::size_t>> devs;
    std::vector<std::pair<ParameterSet, std::size_t>> servs;
    for (auto& [k, p] : uploads) {
      devs.emplace_back(std::move(p), shard_sizes[k - 1]);
      servs.emplace_back(copies[k - 1], shard_sizes[k - 1]);
    }
    device_avg = fedavg_round(devs);
    server_avg = fedavg_round(servs);
    for (auto& c : copies) c = server_avg;
    env.sleep_until(start + mixing_seconds(device_avg, devs.size(), config.flops_per_sec) +
                    mixing_seconds(server_avg, servs.size(), config.flops_per_sec));
    device_avg.version = ++version;
    ++result.accepted;
    for (const auto& [k, p] : uploads) {
      (void)p;
      comms.send(k, Message::global_model(ModelUpdate{device_avg, {}, version}));
    }
    uploads.clear();
    done = rounds.complete(
        composed_accuracy(plan.device_spec, device_avg, plan.server_spec, server_avg, validation), version);
  }

  stop_all(comms, config, log, result, rounds.round());
  result.server_params = std::move(server_avg);
  result.global.device_params = std::move(device_avg);
  result.global.version = version;
  result.server_models = config.devices + 1;
  return result;
}

ServerResult run_oafl_server(Env& env, ServerComms& comms, const ServerConfig& config, const SplitPlan& plan,
                             ParameterSet server_init, ParameterSet device_init, const Dataset& validation,
                             EventLog& log) {
  ServerResult result;
  Inbox inbox(env, comms, log, config.devices);
  Rounds rounds(env, config, log, result);
  std::vector<ParameterSet> copies(config.devices, server_init);
  ParameterSet server_global = std::move(server_init);
  GlobalDeviceModel global;
  global.device_params = std::move(device_init);
  global.version = global.device_params.version;

  bool done = config.max_rounds == 0;
  while (!done) {
    if (rounds.out_of_time()) {
      result.reason = ExitReason::TimeLimit;
      break;
    }
    if (inbox.remaining() == 0) {
      result.reason = ExitReason::AllDeparted;
      break;
    }
    Received r;
    const auto status =
        inbox.next(r, rounds.deadline(), "scheduler_empty", static_cast<std::int64_t>(rounds.round()));
    if (status == ChannelStatus::Closed) break;
    if (status == ChannelStatus::Timeout || r.event != InboundEvent::Frame) continue;
    if (r.msg.kind == MessageKind::Activation) {
      serve_activation(env, comms, config, plan, copies.at(r.from - 1), r.msg.batch(), log, result);
      continue;
    }
    if (r.msg.kind != MessageKind::ModelUpload) continue;

    const double start = env.now();
    auto& copy = copies.at(r.from - 1);
    const auto agg = aggregate(global, r.msg.model(), config.max_delay);
    if (agg.accepted) mix_into(server_global, copy, agg.alpha);
    // The device restarts from the global model, so its server copy does too.
    copy = server_global;
    env.sleep_until(start + mixing_seconds(global.device_params, 1, config.flops_per_sec) +
                    mixing_seconds(server_global, 1, config.flops_per_sec));
    log.record(0, "aggregate",
               {{"origin", r.from}, {"accepted", agg.accepted}, {"alpha", agg.alpha},
                {"staleness", agg.staleness}, {"version", global.version}});
    comms.send(r.from, Message::global_model(global.as_update()));
    if (!agg.accepted) {
      ++result.rejected;
      continue;
    }
    ++result.accepted;
    if (global.version % config.devices == 0) {
      done = rounds.complete(composed_accuracy(plan.device_spec, global.device_params, plan.server_spec,
                                               server_global, validation),
                             global.version);
    }
  }

  stop_all(comms, config, log, result, rounds.round());
  result.server_params = std::move(server_global);
  result.global = std::move(global);
  result.server_models = config.devices + 1;
  return result;
}

}  // namespace fedoptima
