#pragma once

#include <iosfwd>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedoptima/env.hpp"

namespace fedoptima {

/// One timestamped record. Entity 0 is the server, 1..K the devices, and
/// -1 the harness itself.
struct Event {
  double time = 0.0;
  int entity = 0;
  std::string type;
  nlohmann::json data = nlohmann::json::object();
};

inline constexpr int kHarnessEntity = -1;

/// Thread-safe append-only log shared by all workers of an experiment.
class EventLog {
 public:
  explicit EventLog(Env& env) : env_(&env) {}
  EventLog() = default;  // for logs read back from disk

  void record(int entity, std::string type, nlohmann::json data = nlohmann::json::object());
  void record_at(double time, int entity, std::string type, nlohmann::json data = nlohmann::json::object());

  /// Records an idle interval. Reasons map to idle types in measure_idle.
  void idle(int entity, double start, double end, const std::string& reason, std::int64_t round = -1);

  std::vector<Event> snapshot() const;
  std::size_t size() const;

  void write_jsonl(std::ostream& out) const;
  static std::vector<Event> read_jsonl(std::istream& in);

 private:
  Env* env_ = nullptr;
  mutable std::mutex mutex_;
  std::vector<Event> events_;
};

nlohmann::json to_json(const Event& event);
Event event_from_json(const nlohmann::json& j);

}  // namespace fedoptima
