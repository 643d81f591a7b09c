#include "fedoptima/server.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fedoptima {

// ---------------------------------------------------------------------------
// Task Scheduler

std::uint64_t resident_bytes(const ActivationBatch& batch) {
  return 4ULL * (batch.features.size() + batch.labels.size());
}

TaskScheduler::TaskScheduler(Env& env, std::size_t devices, std::size_t omega_dev, GrantSink grants)
    : env_(env),
      devices_(devices),
      omega_dev_(omega_dev),
      grants_(std::move(grants)),
      work_(env.make_condvar()),
      slots_(devices) {
  if (devices == 0) throw std::invalid_argument("scheduler needs at least one device");
  if (omega_dev == 0) throw std::invalid_argument("per-device activation cap must be at least 1");
}

TaskScheduler::DeviceSlot& TaskScheduler::slot(DeviceId id) {
  if (id == 0 || id > devices_) throw std::out_of_range("unknown device id " + std::to_string(id));
  return slots_[id - 1];
}

const TaskScheduler::DeviceSlot& TaskScheduler::slot(DeviceId id) const {
  if (id == 0 || id > devices_) throw std::out_of_range("unknown device id " + std::to_string(id));
  return slots_[id - 1];
}

bool TaskScheduler::flow_control_check(DeviceSlot& s) {
  if (!s.present || s.outstanding || s.queue.size() >= omega_dev_) return false;
  s.outstanding = true;
  ++grants_sent_;
  return true;
}

void TaskScheduler::emit(std::optional<DeviceId> grant) {
  // Called without the lock held: the sink may block on the send queue.
  if (grant && grants_) grants_(*grant);
}

PutResult TaskScheduler::put(Message msg) {
  std::optional<DeviceId> grant;
  {
    std::lock_guard lock(mutex_);
    const DeviceId origin = msg.origin;
    const bool known = origin >= 1 && origin <= devices_;
    switch (msg.kind) {
      case MessageKind::ModelUpload:
        if (!known) {
          ++dropped_;
          return PutResult::Dropped;
        }
        models_.emplace_back(origin, std::move(msg.model()));
        break;
      case MessageKind::Activation: {
        if (!known || slots_[origin - 1].permanent_gone) {
          ++dropped_;
          if (known) slots_[origin - 1].outstanding = false;
          return PutResult::Dropped;
        }
        auto& s = slots_[origin - 1];
        if (s.queue.size() >= omega_dev_) {
          throw ProtocolViolation("activation from device " + std::to_string(origin) + " arrived at a full queue");
        }
        s.outstanding = false;  // the grant has been used
        resident_bytes_ += resident_bytes(msg.batch());
        s.queue.push_back(std::move(msg.batch()));
        ++resident_;
        peak_resident_ = std::max(peak_resident_, resident_);
        peak_queue_ = std::max(peak_queue_, s.queue.size());
        peak_bytes_ = std::max(peak_bytes_, resident_bytes_);
        if (flow_control_check(s)) grant = origin;
        break;
      }
      default:
        throw ProtocolViolation(std::string("scheduler cannot queue ") + to_string(msg.kind));
    }
    work_->notify_all();
  }
  emit(grant);
  return PutResult::Queued;
}

std::optional<Task> TaskScheduler::get() {
  std::optional<DeviceId> grant;
  std::optional<Task> task;
  {
    std::lock_guard lock(mutex_);
    if (!models_.empty()) {
      task.emplace();
      task->kind = Task::Kind::Model;
      task->origin = models_.front().first;
      task->model = std::move(models_.front().second);
      models_.pop_front();
      return task;
    }
    std::size_t best = devices_;
    for (std::size_t k = 0; k < devices_; ++k) {
      if (slots_[k].queue.empty()) continue;
      if (best == devices_ || slots_[k].counter < slots_[best].counter) best = k;
    }
    if (best == devices_) return std::nullopt;

    if (tracing_) {
      DequeueRecord rec;
      rec.chosen = static_cast<DeviceId>(best + 1);
      for (const auto& s : slots_) {
        rec.counters.push_back(s.counter);
        rec.queue_lengths.push_back(s.queue.size());
      }
      trace_.push_back(std::move(rec));
    }

    auto& s = slots_[best];
    task.emplace();
    task->kind = Task::Kind::Activation;
    task->origin = static_cast<DeviceId>(best + 1);
    task->batch = std::move(s.queue.front());
    s.queue.pop_front();
    s.counter += 1;
    --resident_;
    resident_bytes_ -= resident_bytes(task->batch);
    if (flow_control_check(s)) grant = task->origin;
  }
  emit(grant);
  return task;
}

bool TaskScheduler::wait_for_work(double deadline) {
  std::unique_lock lock(mutex_);
  while (models_.empty() && resident_ == 0 && !closed_) {
    if (!work_->wait_until(lock, deadline)) break;
  }
  return !models_.empty() || resident_ > 0;
}

void TaskScheduler::device_left(DeviceId id, bool permanent) {
  std::lock_guard lock(mutex_);
  if (id == 0 || id > devices_) return;
  auto& s = slots_[id - 1];
  s.present = false;
  if (permanent && !s.permanent_gone) {
    s.permanent_gone = true;
    ++departed_;
  }
  work_->notify_all();
}

void TaskScheduler::device_joined(DeviceId id) {
  std::optional<DeviceId> grant;
  {
    std::lock_guard lock(mutex_);
    if (id == 0 || id > devices_) return;
    auto& s = slots_[id - 1];
    if (s.permanent_gone) return;
    s.present = true;
    if (flow_control_check(s)) grant = id;
  }
  emit(grant);
}

void TaskScheduler::close() {
  std::lock_guard lock(mutex_);
  closed_ = true;
  work_->notify_all();
}

std::size_t TaskScheduler::queue_length(DeviceId id) const {
  std::lock_guard lock(mutex_);
  return slot(id).queue.size();
}

std::size_t TaskScheduler::model_queue_length() const {
  std::lock_guard lock(mutex_);
  return models_.size();
}

std::uint64_t TaskScheduler::counter(DeviceId id) const {
  std::lock_guard lock(mutex_);
  return slot(id).counter;
}

bool TaskScheduler::grant_outstanding(DeviceId id) const {
  std::lock_guard lock(mutex_);
  return slot(id).outstanding;
}

bool TaskScheduler::present(DeviceId id) const {
  std::lock_guard lock(mutex_);
  return slot(id).present;
}

std::size_t TaskScheduler::resident_batches() const {
  std::lock_guard lock(mutex_);
  return resident_;
}

std::size_t TaskScheduler::peak_resident_batches() const {
  std::lock_guard lock(mutex_);
  return peak_resident_;
}

std::size_t TaskScheduler::peak_queue_length() const {
  std::lock_guard lock(mutex_);
  return peak_queue_;
}

std::uint64_t TaskScheduler::peak_resident_bytes() const {
  std::lock_guard lock(mutex_);
  return peak_bytes_;
}

std::uint64_t TaskScheduler::grants_sent() const {
  std::lock_guard lock(mutex_);
  return grants_sent_;
}

std::uint64_t TaskScheduler::dropped() const {
  std::lock_guard lock(mutex_);
  return dropped_;
}

bool TaskScheduler::drained_and_departed() const {
  std::lock_guard lock(mutex_);
  return departed_ == devices_ && resident_ == 0 && models_.empty();
}

void TaskScheduler::enable_trace(bool on) {
  std::lock_guard lock(mutex_);
  tracing_ = on;
}

std::vector<DequeueRecord> TaskScheduler::trace() const {
  std::lock_guard lock(mutex_);
  return trace_;
}

// ---------------------------------------------------------------------------
// Aggregation and training

ModelUpdate GlobalDeviceModel::as_update() const {
  ModelUpdate u{device_params, aux_params, version};
  u.device_params.version = u.aux_params.version = version;
  return u;
}

void mix_into(ParameterSet& global, const ParameterSet& local, float alpha) {
  if (!global.same_shapes(local)) throw ShapeError("aggregated model shapes differ from the global model");
  const float keep = 1.0F - alpha;
  for (std::size_t i = 0; i < global.tensors.size(); ++i) {
    auto g = global.tensors[i].data();
    auto l = local.tensors[i].data();
    for (std::size_t j = 0; j < g.size(); ++j) g[j] = alpha * l[j] + keep * g[j];
  }
}

AggregateResult aggregate(GlobalDeviceModel& global, const ModelUpdate& update, std::uint64_t max_delay) {
  AggregateResult r;
  r.staleness = global.version > update.version ? global.version - update.version : 0;
  if (r.staleness > max_delay) return r;
  r.alpha = 1.0F / static_cast<float>(r.staleness + 1);
  mix_into(global.device_params, update.device_params, r.alpha);
  mix_into(global.aux_params, update.aux_params, r.alpha);
  global.version += 1;
  global.device_params.version = global.aux_params.version = global.version;
  r.accepted = true;
  return r;
}

StepResult train_step(const NetworkSpec& server_spec, ParameterSet& server_params, const ActivationBatch& batch,
                      float lr) {
  auto fwd = forward(server_spec, server_params, batch.features, true);
  auto loss = cross_entropy_loss(fwd.output, batch.labels);
  if (!std::isfinite(loss.loss)) {
    throw NumericError("server step on batch " + std::to_string(batch.sequence) + " from device " +
                       std::to_string(batch.origin) + ": non-finite loss");
  }
  StepResult r;
  r.loss = loss.loss;
  r.grads = backward(*fwd.tape, loss.grad);
  sgd_step(server_params, r.grads.params, lr);
  return r;
}

// ---------------------------------------------------------------------------
// Compute Engine

void ServerConfig::validate() const {
  if (devices == 0) throw std::invalid_argument("server needs at least one device");
  if (omega == 0) throw std::invalid_argument("activation budget must be at least 1");
  if (patience == 0) throw std::invalid_argument("patience must be at least 1");
  if (!(lr >= 0.0F)) throw std::invalid_argument("server learning rate must be non-negative");
  if (!(flops_per_sec > 0.0)) throw std::invalid_argument("server compute rate must be positive");
  if (!(poll_seconds > 0.0)) throw std::invalid_argument("poll interval must be positive");
  const std::size_t share = (omega + devices - 1) / devices;
  if (omega_dev > share) {
    throw std::invalid_argument("per-device cap " + std::to_string(omega_dev) + " exceeds ceil(omega/K) = " +
                                std::to_string(share));
  }
}

std::size_t ServerConfig::effective_omega_dev() const {
  return omega_dev != 0 ? omega_dev : (omega + devices - 1) / devices;
}

ServerResult run_server(Env& env, ServerComms& comms, const ServerConfig& config, const SplitPlan& plan,
                        ParameterSet server_params, GlobalDeviceModel global, const Dataset& validation,
                        EventLog& log) {
  config.validate();
  // Shared with the dispatcher worker, which may outlive this call briefly.
  auto sched = std::make_shared<TaskScheduler>(env, config.devices, config.effective_omega_dev(),
                                               [&comms, &log](DeviceId k) {
                                                 if (comms.send(k, Message::turn_on())) {
                                                   log.record(0, "grant", {{"device", k}});
                                                 }
                                               });
  comms.start([sched, &log](Received&& r) {
    switch (r.event) {
      case InboundEvent::Connected:
        sched->device_joined(r.from);
        log.record(0, "device_joined", {{"device", r.from}});
        return;
      case InboundEvent::Disconnected:
        sched->device_left(r.from, r.permanent);
        log.record(0, "device_left", {{"device", r.from}, {"permanent", r.permanent}});
        return;
      case InboundEvent::Frame:
        break;
    }
    const auto kind = r.msg.kind;
    if (kind != MessageKind::Activation && kind != MessageKind::ModelUpload) {
      log.record(0, "unexpected_message", {{"from", r.from}, {"kind", to_string(kind)}});
      return;
    }
    try {
      if (sched->put(std::move(r.msg)) == PutResult::Dropped) {
        log.record(0, "dropped", {{"from", r.from}, {"kind", to_string(kind)}});
      }
    } catch (const ProtocolViolation& e) {
      log.record(0, "protocol_violation", {{"from", r.from}, {"what", e.what()}});
      throw;
    }
  });

  ServerResult result;
  const double t0 = env.now();
  const double deadline = t0 + config.time_limit;
  const double aggregate_seconds =
      3.0 * static_cast<double>(global.device_params.scalar_count() + global.aux_params.scalar_count()) /
      config.flops_per_sec;
  ConvergenceTracker convergence(config.patience);
  std::uint64_t round = 0;
  double idle_start = -1.0;
  auto end_idle = [&] {
    if (idle_start >= 0.0) {
      log.idle(0, idle_start, env.now(), "scheduler_empty", static_cast<std::int64_t>(round));
      idle_start = -1.0;
    }
  };

  bool done = config.max_rounds == 0;
  while (!done) {
    if (env.now() >= deadline) {
      result.reason = ExitReason::TimeLimit;
      break;
    }
    auto task = sched->get();
    if (!task) {
      if (sched->drained_and_departed()) {
        result.reason = ExitReason::AllDeparted;
        break;
      }
      if (idle_start < 0.0) idle_start = env.now();
      sched->wait_for_work(std::min(env.now() + config.poll_seconds, deadline));
      continue;
    }
    end_idle();
    const double start = env.now();

    if (task->kind == Task::Kind::Activation) {
      const auto& batch = task->batch;
      const auto step = train_step(plan.server_spec, server_params, batch, config.lr);
      env.sleep_until(start + training_seconds(plan.server_spec, batch.labels.size(), config.flops_per_sec));
      ++result.train_steps;
      log.record(0, "train_step",
                 {{"origin", batch.origin}, {"sequence", batch.sequence}, {"loss", step.loss},
                  {"samples", batch.labels.size()}});
      continue;
    }

    const auto agg = aggregate(global, task->model, config.max_delay);
    env.sleep_until(start + aggregate_seconds);
    log.record(0, "aggregate",
               {{"origin", task->origin}, {"accepted", agg.accepted}, {"alpha", agg.alpha},
                {"staleness", agg.staleness}, {"version", global.version}});
    // A rejected update still gets the current global model back, otherwise
    // the device would wait forever.
    comms.send(task->origin, Message::global_model(global.as_update()));
    if (!agg.accepted) {
      ++result.rejected;
      continue;
    }
    ++result.accepted;
    if (global.version % config.devices != 0) continue;

    ++round;
    const double acc =
        composed_accuracy(plan.device_spec, global.device_params, plan.server_spec, server_params, validation);
    result.rounds.push_back({round, env.now() - t0, acc});
    log.record(0, "round", {{"round", round}, {"accuracy", acc}, {"version", global.version}});
    if (convergence.update(acc)) {
      result.reason = ExitReason::Converged;
      done = true;
    } else if (round >= config.max_rounds) {
      result.reason = ExitReason::MaxRounds;
      done = true;
    }
  }
  end_idle();

  for (DeviceId k = 1; k <= config.devices; ++k) comms.send(k, Message::stop());
  log.record(0, "stop", {{"reason", to_string(result.reason)}, {"round", round}});
  comms.shutdown();
  sched->close();

  result.server_params = std::move(server_params);
  result.global = std::move(global);
  result.peak_resident_batches = sched->peak_resident_batches();
  result.peak_resident_bytes = sched->peak_resident_bytes();
  return result;
}

}  // namespace fedoptima
