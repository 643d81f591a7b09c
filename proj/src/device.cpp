#include "fedoptima/device.hpp"

#include <cmath>

namespace fedoptima {

DeviceState make_device_state(DeviceId id, const SplitPlan& plan, const ModelUpdate& initial, float lr) {
  DeviceState s;
  s.id = id;
  s.device_spec = plan.device_spec;
  s.aux_spec = plan.aux_spec;
  s.device_params = initial.device_params;
  s.aux_params = initial.aux_params;
  s.version = initial.version;
  s.lr = lr;
  return s;
}

IterationResult local_iteration(DeviceState& state, SenderGate& gate, const Dataset& batch) {
  IterationResult result;
  auto dev = forward(state.device_spec, state.device_params, batch.features, true);

  if (gate.try_consume()) {
    ActivationBatch a;
    a.features = dev.output;
    a.labels = batch.labels;
    a.origin = state.id;
    a.sequence = state.sequence++;
    result.activation = std::move(a);
  }

  auto aux = forward(state.aux_spec, state.aux_params, dev.output, true);
  auto loss = cross_entropy_loss(aux.output, batch.labels);
  if (!std::isfinite(loss.loss)) {
    throw NumericError("device " + std::to_string(state.id) + " iteration " + std::to_string(state.iteration) +
                       ": non-finite local loss");
  }
  auto aux_grads = backward(*aux.tape, loss.grad);
  auto dev_grads = backward(*dev.tape, aux_grads.input);
  sgd_step(state.aux_params, aux_grads.params, state.lr);
  sgd_step(state.device_params, dev_grads.params, state.lr);

  ++state.iteration;
  result.loss = loss.loss;
  return result;
}

SyncOutcome end_of_round_sync(DeviceState& state, DeviceComms& comms, Env& env, EventLog& log,
                              const char* wait_reason) {
  ModelUpdate up{state.device_params, state.aux_params, state.version};
  up.device_params.version = up.aux_params.version = state.version;
  const double start = env.now();
  if (!comms.send(Message::model_upload(state.id, std::move(up)))) return SyncOutcome::Closed;

  const auto round = static_cast<std::int64_t>(state.round);
  Message msg;
  for (;;) {
    if (comms.receive(msg, kForever) != ChannelStatus::Ok) {
      log.idle(static_cast<int>(state.id), start, env.now(), wait_reason, round);
      return SyncOutcome::Closed;
    }
    if (msg.kind == MessageKind::Stop) {
      log.idle(static_cast<int>(state.id), start, env.now(), wait_reason, round);
      return SyncOutcome::Stopped;
    }
    if (msg.kind == MessageKind::GlobalModel) break;
  }
  log.idle(static_cast<int>(state.id), start, env.now(), wait_reason, round);

  auto& global = msg.model();
  if (!global.device_params.same_shapes(state.device_params) || !global.aux_params.same_shapes(state.aux_params)) {
    throw ShapeError("global model does not match the device networks");
  }
  state.device_params = std::move(global.device_params);
  state.aux_params = std::move(global.aux_params);
  state.version = global.version;
  state.device_params.version = state.aux_params.version = state.version;
  return SyncOutcome::Replaced;
}

DeviceResult run_device(Env& env, DeviceComms& comms, const DeviceConfig& config, const SplitPlan& plan,
                        const ModelUpdate& initial, const Dataset& shard, EventLog& log) {
  comms.start();
  DeviceState state = make_device_state(comms.id(), plan, initial, config.lr);
  DeviceResult result;
  const int entity = static_cast<int>(comms.id());
  const NetworkSpec local = plan.device_spec.concat(plan.aux_spec);
  const double step_seconds = training_seconds(local, config.batch_size, config.flops_per_sec);
  const double forward_done = forward_seconds(plan.device_spec, config.batch_size, config.flops_per_sec);

  auto finish = [&](bool stopped) {
    result.device_params = state.device_params;
    result.aux_params = state.aux_params;
    result.version = state.version;
    result.iterations = state.iteration;
    result.activations_sent = state.sequence;
    result.rounds_completed = state.round;
    result.stopped = stopped;
    comms.shutdown();
    return result;
  };

  if (config.rounds == 0) return finish(false);
  MinibatchSampler sampler(shard, config.batch_size, config.seed);

  for (std::size_t e = 0; e < config.rounds; ++e) {
    for (std::size_t h = 0; h < config.iters_per_round; ++h) {
      if (comms.stop_requested()) return finish(true);
      if (!comms.presence().online()) {
        const double away = env.now();
        if (!comms.presence().wait_online()) return finish(true);
        log.record(entity, "offline", {{"start", away}, {"end", env.now()}});
      }
      const double start = env.now();
      Dataset batch = sampler.next();
      auto it = local_iteration(state, comms.gate(), batch);
      // The activation leaves once the device forward pass is done.
      env.sleep_until(start + forward_done);
      const bool sent = it.activation.has_value();
      if (sent) comms.send(Message::activation(std::move(*it.activation)));
      env.sleep_until(start + step_seconds);
      log.record(entity, "iteration",
                 {{"round", state.round}, {"loss", it.loss}, {"sent", sent}, {"samples", batch.size()}});
    }
    const auto outcome = end_of_round_sync(state, comms, env, log);
    if (outcome != SyncOutcome::Replaced) return finish(outcome == SyncOutcome::Stopped);
    ++state.round;
  }
  return finish(false);
}

}  // namespace fedoptima
