#include "fedoptima/comms.hpp"

#include <algorithm>
#include <numeric>

#include "fedoptima/partitioner.hpp"

namespace fedoptima {

namespace {
constexpr std::size_t kQueueCapacity = 1 << 14;
}

void Presence::set_online(bool online) {
  std::lock_guard lock(mutex_);
  online_ = online;
  cv_->notify_all();
}

bool Presence::online() const {
  std::lock_guard lock(mutex_);
  return online_;
}

bool Presence::wait_online() {
  std::unique_lock lock(mutex_);
  while (!online_ && !aborted_) cv_->wait_until(lock, kForever);
  return !aborted_;
}

void Presence::abort() {
  std::lock_guard lock(mutex_);
  aborted_ = true;
  cv_->notify_all();
}

LinkTable::LinkTable(std::size_t devices) {
  links_.reserve(devices);
  for (std::size_t i = 0; i < devices; ++i) links_.push_back(std::make_unique<LinkStats>());
}

LinkStats& LinkTable::at(DeviceId id) {
  if (id == 0 || id > links_.size()) throw std::out_of_range("unknown device id " + std::to_string(id));
  return *links_[id - 1];
}

const LinkStats& LinkTable::at(DeviceId id) const {
  if (id == 0 || id > links_.size()) throw std::out_of_range("unknown device id " + std::to_string(id));
  return *links_[id - 1];
}

std::uint64_t LinkTable::total_bytes() const {
  std::uint64_t total = 0;
  for (const auto& l : links_) total += l->total_bytes();
  return total;
}

// ---------------------------------------------------------------------------
// Device communicator

DeviceComms::DeviceComms(Env& env, DeviceId id, DeviceTransport& transport, LinkStats& link, EventLog& log)
    : env_(env),
      id_(id),
      transport_(transport),
      link_(link),
      log_(log),
      outbox_(env, kQueueCapacity),
      inbox_(env, kQueueCapacity),
      presence_(env) {}

DeviceComms::~DeviceComms() {
  outbox_.close();
  inbox_.close();
}

void DeviceComms::start() {
  if (started_.exchange(true)) return;
  const std::string tag = "device-" + std::to_string(id_);
  env_.spawn(tag + "-sender", [this] { sender_loop(); });
  env_.spawn(tag + "-receiver", [this] { receiver_loop(); });
}

bool DeviceComms::send(Message msg) { return outbox_.push(std::move(msg)); }

ChannelStatus DeviceComms::receive(Message& out, double deadline) { return inbox_.pop_until(out, deadline); }

void DeviceComms::shutdown() { outbox_.close(); }

void DeviceComms::sender_loop() {
  Message msg;
  while (outbox_.pop_until(msg, kForever) == ChannelStatus::Ok) {
    Bytes frame = encode(msg);
    const std::size_t size = frame.size();
    env_.sleep_for(link_.transfer_seconds(size));
    if (!transport_.send(std::move(frame))) continue;
    link_.bytes_up += size;
    link_.frames_up += 1;
  }
  transport_.close();
}

void DeviceComms::receiver_loop() {
  // Downlink frames are serialized on the link: each one becomes visible
  // only after its transfer time, counted from when the link is free.
  double link_free = 0.0;
  Bytes frame;
  while (transport_.receive(frame, kForever) == ChannelStatus::Ok) {
    const double arrival = std::max(env_.now(), link_free) + link_.transfer_seconds(frame.size());
    link_free = arrival;
    env_.sleep_until(arrival);
    Message msg;
    try {
      msg = decode(frame);
    } catch (const WireError& e) {
      log_.record(static_cast<int>(id_), "wire_error", {{"what", e.what()}});
      continue;
    }
    switch (msg.kind) {
      case MessageKind::TurnOn:
        gate_.grant();
        break;
      case MessageKind::Stop:
        stop_.store(true);
        inbox_.push(std::move(msg));
        presence_.abort();
        break;
      default:
        inbox_.push(std::move(msg));
        break;
    }
  }
  inbox_.close();
  presence_.abort();
}

// ---------------------------------------------------------------------------
// Server communicator

ServerComms::ServerComms(Env& env, ServerTransport& transport, LinkTable& links, EventLog& log)
    : env_(env),
      transport_(transport),
      links_(links),
      log_(log),
      received_(env, kQueueCapacity),
      outbox_(env, kQueueCapacity) {}

ServerComms::~ServerComms() {
  outbox_.close();
  received_.close();
}

void ServerComms::start(Handler handler) {
  handler_ = std::move(handler);
  env_.spawn("server-receiver", [this] { receiver_loop(); });
  env_.spawn("server-scheduler", [this] { dispatcher_loop(); });
  env_.spawn("server-sender", [this] { sender_loop(); });
}

bool ServerComms::send(DeviceId to, Message msg) { return outbox_.push(Outbound{to, std::move(msg)}); }

void ServerComms::shutdown() { outbox_.close(); }

void ServerComms::receiver_loop() {
  Inbound in;
  while (transport_.receive(in, kForever) == ChannelStatus::Ok) {
    if (!received_.push(std::move(in))) break;
  }
  received_.close();
}

void ServerComms::dispatcher_loop() {
  Inbound in;
  while (received_.pop_until(in, kForever) == ChannelStatus::Ok) {
    Received r;
    r.event = in.event;
    r.from = in.from;
    r.permanent = in.permanent;
    if (in.event == InboundEvent::Frame) {
      try {
        r.msg = decode(in.bytes);
      } catch (const WireError& e) {
        log_.record(0, "wire_error", {{"from", in.from}, {"what", e.what()}});
        continue;
      }
      if (r.msg.origin != in.from) {
        log_.record(0, "wire_error", {{"from", in.from}, {"what", "origin does not match connection"}});
        continue;
      }
    }
    handler_(std::move(r));
  }
}

void ServerComms::sender_loop() {
  Outbound out;
  while (outbox_.pop_until(out, kForever) == ChannelStatus::Ok) {
    Bytes frame = encode(out.msg);
    const std::size_t size = frame.size();
    if (!transport_.send(out.to, std::move(frame))) continue;
    auto& link = links_.at(out.to);
    link.bytes_down += size;
    link.frames_down += 1;
  }
  transport_.close();
}

// ---------------------------------------------------------------------------

MinibatchSampler::MinibatchSampler(const Dataset& shard, std::size_t batch_size, std::uint64_t seed)
    : shard_(shard), batch_(batch_size), rng_(seed), order_(shard.size()) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (shard.size() == 0) throw std::invalid_argument("cannot sample from an empty shard");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::shuffle(order_.begin(), order_.end(), rng_);
}

Dataset MinibatchSampler::next() {
  std::vector<std::size_t> picked;
  picked.reserve(batch_);
  while (picked.size() < batch_) {
    if (cursor_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    picked.push_back(order_[cursor_++]);
  }
  return shard_.subset(picked);
}

double forward_seconds(const NetworkSpec& spec, std::size_t rows, double flops_per_sec) {
  if (spec.empty() || rows == 0) return 0.0;
  double flops = 0.0;
  for (const auto& layer : profile(spec, rows)) flops += layer.flops;
  return flops / flops_per_sec;
}

double training_seconds(const NetworkSpec& spec, std::size_t rows, double flops_per_sec) {
  return 3.0 * forward_seconds(spec, rows, flops_per_sec);
}

double network_accuracy(const NetworkSpec& spec, const ParameterSet& params, const Dataset& data) {
  const auto out = forward(spec, params, data.features, false);
  return accuracy(out.output, data.labels);
}

double composed_accuracy(const NetworkSpec& head, const ParameterSet& head_params, const NetworkSpec& tail,
                         const ParameterSet& tail_params, const Dataset& data) {
  const auto mid = forward(head, head_params, data.features, false);
  const auto out = forward(tail, tail_params, mid.output, false);
  return accuracy(out.output, data.labels);
}

const char* to_string(ExitReason reason) {
  switch (reason) {
    case ExitReason::Converged: return "converged";
    case ExitReason::MaxRounds: return "max_rounds";
    case ExitReason::TimeLimit: return "time_limit";
    case ExitReason::AllDeparted: return "all_departed";
  }
  return "unknown";
}

bool ConvergenceTracker::update(double accuracy) {
  if (accuracy > best_) {
    best_ = accuracy;
    stale_ = 0;
    return false;
  }
  return ++stale_ >= patience_;
}

}  // namespace fedoptima
