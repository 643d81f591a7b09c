#include "fedoptima/env.hpp"

#include <algorithm>
#include <chrono>
#include <deque>
#include <map>
#include <thread>

namespace fedoptima {

namespace {

// ---------------------------------------------------------------------------
// Wall-clock environment.

class RealCondVar final : public CondVar {
 public:
  RealCondVar(std::chrono::steady_clock::time_point origin) : origin_(origin) {}

  bool wait_until(std::unique_lock<std::mutex>& lock, double deadline) override {
    if (deadline == kForever) {
      cv_.wait(lock);
      return true;
    }
    const auto tp = origin_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                  std::chrono::duration<double>(deadline));
    return cv_.wait_until(lock, tp) != std::cv_status::timeout;
  }

  void notify_all() override { cv_.notify_all(); }

 private:
  std::chrono::steady_clock::time_point origin_;
  std::condition_variable cv_;
};

class RealEnv final : public Env {
 public:
  RealEnv() : origin_(std::chrono::steady_clock::now()) {}
  ~RealEnv() override { run(); }

  double now() override {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - origin_).count();
  }

  void sleep_until(double t) override {
    const double dt = t - now();
    if (dt > 0) std::this_thread::sleep_for(std::chrono::duration<double>(dt));
  }

  std::unique_ptr<CondVar> make_condvar() override { return std::make_unique<RealCondVar>(origin_); }

  void spawn(std::string name, std::function<void()> body) override {
    std::lock_guard lock(mutex_);
    threads_.emplace_back([this, name = std::move(name), body = std::move(body)] {
      try {
        body();
      } catch (const std::exception& e) {
        std::lock_guard guard(mutex_);
        errors_.push_back(name + ": " + e.what());
      }
    });
  }

  std::vector<std::string> run() override {
    for (;;) {
      std::vector<std::thread> batch;
      {
        std::lock_guard lock(mutex_);
        batch.swap(threads_);
      }
      if (batch.empty()) break;
      for (auto& t : batch) t.join();
    }
    std::lock_guard lock(mutex_);
    return errors_;
  }

  bool simulated() const override { return false; }

 private:
  std::chrono::steady_clock::time_point origin_;
  std::mutex mutex_;
  std::vector<std::thread> threads_;
  std::vector<std::string> errors_;
};

// ---------------------------------------------------------------------------
// Virtual-time environment. One worker holds the baton at a time; a worker
// gives it up only by sleeping, waiting on a condition, or finishing. When
// nobody is runnable the clock jumps to the earliest timer.

class SimEnv;

struct SimWorker {
  std::uint64_t id = 0;
  std::string name;
  std::function<void()> body;
  std::condition_variable cv;
  bool go = false;
  bool has_timer = false;
  std::pair<double, std::uint64_t> timer_key{};
  class SimCondVar* waiting_on = nullptr;
  bool timed_out = false;
  bool deadlocked = false;
  std::thread thread;
};

thread_local SimWorker* tls_worker = nullptr;

class SimCondVar final : public CondVar {
 public:
  explicit SimCondVar(SimEnv& env) : env_(env) {}
  bool wait_until(std::unique_lock<std::mutex>& lock, double deadline) override;
  void notify_all() override;

 private:
  friend class SimEnv;
  SimEnv& env_;
  std::vector<SimWorker*> waiters_;
};

class SimEnv final : public Env {
 public:
  ~SimEnv() override { run(); }

  double now() override {
    std::lock_guard lock(mutex_);
    return now_;
  }

  void sleep_until(double t) override {
    SimWorker* self = require_worker();
    std::unique_lock lock(mutex_);
    if (deadlocked_) throw SimDeadlock("simulation deadlocked");
    if (t <= now_) {
      ready_.push_back(self);
    } else {
      add_timer(self, t);
    }
    block(self, lock);
  }

  std::unique_ptr<CondVar> make_condvar() override { return std::make_unique<SimCondVar>(*this); }

  void spawn(std::string name, std::function<void()> body) override {
    std::unique_lock lock(mutex_);
    auto worker = std::make_unique<SimWorker>();
    SimWorker* w = worker.get();
    w->id = next_id_++;
    w->name = std::move(name);
    w->body = std::move(body);
    workers_.push_back(std::move(worker));
    ++live_;
    ready_.push_back(w);
    w->thread = std::thread([this, w] { trampoline(w); });
    if (running_ && current_ == nullptr) dispatch();
  }

  std::vector<std::string> run() override {
    {
      std::unique_lock lock(mutex_);
      if (live_ > 0) {
        running_ = true;
        if (current_ == nullptr) dispatch();
        done_.wait(lock, [&] { return live_ == 0; });
      }
    }
    for (auto& w : workers_) {
      if (w->thread.joinable()) w->thread.join();
    }
    std::lock_guard lock(mutex_);
    return errors_;
  }

  bool simulated() const override { return true; }

 private:
  friend class SimCondVar;

  SimWorker* require_worker() const {
    if (tls_worker == nullptr) throw std::logic_error("blocking call outside a simulated worker");
    return tls_worker;
  }

  void add_timer(SimWorker* w, double t) {
    w->timer_key = {t, seq_++};
    w->has_timer = true;
    timers_.emplace(w->timer_key, w);
  }

  void remove_timer(SimWorker* w) {
    if (!w->has_timer) return;
    timers_.erase(w->timer_key);
    w->has_timer = false;
  }

  // Gives up the baton and waits until the dispatcher hands it back.
  void block(SimWorker* self, std::unique_lock<std::mutex>& lock) {
    current_ = nullptr;
    dispatch();
    self->cv.wait(lock, [&] { return self->go; });
    self->go = false;
  }

  void dispatch() {
    if (ready_.empty()) {
      if (!timers_.empty()) {
        auto it = timers_.begin();
        now_ = std::max(now_, it->first.first);
        SimWorker* w = it->second;
        timers_.erase(it);
        w->has_timer = false;
        if (w->waiting_on != nullptr) {
          auto& ws = w->waiting_on->waiters_;
          ws.erase(std::remove(ws.begin(), ws.end(), w), ws.end());
          w->waiting_on = nullptr;
          w->timed_out = true;
        }
        ready_.push_back(w);
      } else if (live_ > 0) {
        deadlocked_ = true;
        for (auto& worker : workers_) {
          SimWorker* w = worker.get();
          if (w->waiting_on == nullptr) continue;
          auto& ws = w->waiting_on->waiters_;
          ws.erase(std::remove(ws.begin(), ws.end(), w), ws.end());
          w->waiting_on = nullptr;
          w->deadlocked = true;
          ready_.push_back(w);
        }
      }
    }
    if (ready_.empty()) return;
    SimWorker* next = ready_.front();
    ready_.pop_front();
    current_ = next;
    next->go = true;
    next->cv.notify_one();
  }

  void trampoline(SimWorker* w) {
    tls_worker = w;
    {
      std::unique_lock lock(mutex_);
      w->cv.wait(lock, [&] { return w->go; });
      w->go = false;
    }
    try {
      w->body();
    } catch (const std::exception& e) {
      std::lock_guard lock(mutex_);
      errors_.push_back(w->name + ": " + e.what());
    }
    std::unique_lock lock(mutex_);
    --live_;
    current_ = nullptr;
    if (live_ == 0) {
      done_.notify_all();
    } else {
      dispatch();
    }
  }

  std::mutex mutex_;
  double now_ = 0.0;
  std::uint64_t seq_ = 0;
  std::uint64_t next_id_ = 0;
  std::deque<SimWorker*> ready_;
  std::map<std::pair<double, std::uint64_t>, SimWorker*> timers_;
  std::vector<std::unique_ptr<SimWorker>> workers_;
  std::size_t live_ = 0;
  bool running_ = false;
  bool deadlocked_ = false;
  SimWorker* current_ = nullptr;
  std::condition_variable done_;
  std::vector<std::string> errors_;
};

bool SimCondVar::wait_until(std::unique_lock<std::mutex>& lock, double deadline) {
  SimWorker* self = env_.require_worker();
  std::unique_lock kernel(env_.mutex_);
  if (env_.deadlocked_) throw SimDeadlock("simulation deadlocked");
  waiters_.push_back(self);
  self->waiting_on = this;
  self->timed_out = false;
  if (deadline != kForever) env_.add_timer(self, std::max(deadline, env_.now_));
  lock.unlock();
  env_.block(self, kernel);
  const bool deadlocked = self->deadlocked;
  const bool timed_out = self->timed_out;
  self->deadlocked = false;
  kernel.unlock();
  lock.lock();
  if (deadlocked) throw SimDeadlock("simulation deadlocked: every worker is blocked");
  return !timed_out;
}

void SimCondVar::notify_all() {
  std::lock_guard kernel(env_.mutex_);
  for (SimWorker* w : waiters_) {
    env_.remove_timer(w);
    w->waiting_on = nullptr;
    env_.ready_.push_back(w);
  }
  waiters_.clear();
}

}  // namespace

std::unique_ptr<Env> make_real_env() { return std::make_unique<RealEnv>(); }
std::unique_ptr<Env> make_sim_env() { return std::make_unique<SimEnv>(); }

}  // namespace fedoptima
