#pragma once

#include <condition_variable>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedoptima {

inline constexpr double kForever = std::numeric_limits<double>::infinity();

/// Condition variable bound to an Env. Waits release the caller's lock the
/// same way std::condition_variable does.
class CondVar {
 public:
  virtual ~CondVar() = default;
  /// Returns false when the deadline passed without a notification.
  virtual bool wait_until(std::unique_lock<std::mutex>& lock, double deadline) = 0;
  virtual void notify_all() = 0;
};

/// Raised inside every blocked worker when the virtual-time kernel finds
/// that no worker can ever make progress again.
class SimDeadlock : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Execution environment: a clock, sleeping, condition variables and worker
/// threads. RealEnv uses the steady clock. SimEnv runs exactly one worker
/// at a time against a virtual clock, which makes runs reproducible.
class Env {
 public:
  virtual ~Env() = default;

  /// Seconds since the environment was created.
  virtual double now() = 0;
  virtual void sleep_until(double t) = 0;
  void sleep_for(double seconds) { sleep_until(now() + seconds); }

  virtual std::unique_ptr<CondVar> make_condvar() = 0;

  /// Starts a named worker. Under SimEnv the worker only begins running
  /// once run() is called (or immediately if called from another worker).
  virtual void spawn(std::string name, std::function<void()> body) = 0;

  /// Blocks until every spawned worker has finished. Returns the messages of
  /// exceptions that escaped worker bodies.
  virtual std::vector<std::string> run() = 0;

  virtual bool simulated() const = 0;
};

std::unique_ptr<Env> make_real_env();
std::unique_ptr<Env> make_sim_env();

}  // namespace fedoptima
