#pragma once

#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>

#include "fedoptima/env.hpp"

namespace fedoptima {

enum class ChannelStatus { Ok, Timeout, Closed };

/// Bounded multi-producer multi-consumer FIFO built on Env primitives, so it
/// blocks in virtual time under SimEnv and in wall-clock time under RealEnv.
/// Closing wakes everyone: pushes fail immediately, pops drain what is left
/// and then report Closed.
template <typename T>
class Channel {
 public:
  Channel(Env& env, std::size_t capacity)
      : env_(env), capacity_(capacity), not_empty_(env.make_condvar()), not_full_(env.make_condvar()) {
    if (capacity == 0) throw std::invalid_argument("channel capacity must be at least 1");
  }

  Channel(const Channel&) = delete;
  Channel& operator=(const Channel&) = delete;

  /// Blocks while full. Returns false once the channel is closed.
  bool push(T value) { return push_until(std::move(value), kForever) == ChannelStatus::Ok; }

  ChannelStatus push_until(T value, double deadline) {
    std::unique_lock lock(mutex_);
    while (!closed_ && items_.size() >= capacity_) {
      if (!not_full_->wait_until(lock, deadline) && !closed_ && items_.size() >= capacity_) {
        return ChannelStatus::Timeout;
      }
    }
    if (closed_) return ChannelStatus::Closed;
    items_.push_back(std::move(value));
    not_empty_->notify_all();
    return ChannelStatus::Ok;
  }

  /// Blocks until an item arrives, the deadline passes, or the channel is
  /// closed and drained.
  ChannelStatus pop_until(T& out, double deadline) {
    std::unique_lock lock(mutex_);
    while (items_.empty() && !closed_) {
      if (!not_empty_->wait_until(lock, deadline) && items_.empty() && !closed_) {
        return ChannelStatus::Timeout;
      }
    }
    if (items_.empty()) return ChannelStatus::Closed;
    out = std::move(items_.front());
    items_.pop_front();
    not_full_->notify_all();
    return ChannelStatus::Ok;
  }

  ChannelStatus pop_for(T& out, double timeout) { return pop_until(out, env_.now() + timeout); }

  std::optional<T> pop() {
    T value;
    if (pop_until(value, kForever) != ChannelStatus::Ok) return std::nullopt;
    return value;
  }

  std::optional<T> try_pop() {
    std::lock_guard lock(mutex_);
    if (items_.empty()) return std::nullopt;
    T value = std::move(items_.front());
    items_.pop_front();
    not_full_->notify_all();
    return value;
  }

  void close() {
    std::lock_guard lock(mutex_);
    closed_ = true;
    not_empty_->notify_all();
    not_full_->notify_all();
  }

  bool closed() const {
    std::lock_guard lock(mutex_);
    return closed_;
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return items_.size();
  }

  std::size_t capacity() const { return capacity_; }

 private:
  Env& env_;
  std::size_t capacity_;
  mutable std::mutex mutex_;
  std::deque<T> items_;
  bool closed_ = false;
  std::unique_ptr<CondVar> not_empty_;
  std::unique_ptr<CondVar> not_full_;
};

}  // namespace fedoptima
