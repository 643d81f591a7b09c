#include "fedoptima/event_log.hpp"

#include <istream>
#include <ostream>

namespace fedoptima {

void EventLog::record(int entity, std::string type, nlohmann::json data) {
  record_at(env_ != nullptr ? env_->now() : 0.0, entity, std::move(type), std::move(data));
}

void EventLog::record_at(double time, int entity, std::string type, nlohmann::json data) {
  std::lock_guard lock(mutex_);
  events_.push_back(Event{time, entity, std::move(type), std::move(data)});
}

void EventLog::idle(int entity, double start, double end, const std::string& reason, std::int64_t round) {
  if (end <= start) return;
  nlohmann::json data{{"start", start}, {"end", end}, {"reason", reason}};
  if (round >= 0) data["round"] = round;
  record_at(end, entity, "idle", std::move(data));
}

std::vector<Event> EventLog::snapshot() const {
  std::lock_guard lock(mutex_);
  return events_;
}

std::size_t EventLog::size() const {
  std::lock_guard lock(mutex_);
  return events_.size();
}

nlohmann::json to_json(const Event& event) {
  nlohmann::json j = event.data;
  j["t"] = event.time;
  j["entity"] = event.entity;
  j["type"] = event.type;
  return j;
}

Event event_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("t") || !j.contains("entity") || !j.contains("type")) {
    throw std::invalid_argument("event record needs t, entity and type");
  }
  Event e;
  e.time = j.at("t").get<double>();
  e.entity = j.at("entity").get<int>();
  e.type = j.at("type").get<std::string>();
  e.data = j;
  e.data.erase("t");
  e.data.erase("entity");
  e.data.erase("type");
  return e;
}

void EventLog::write_jsonl(std::ostream& out) const {
  std::lock_guard lock(mutex_);
  for (const auto& e : events_) out << to_json(e).dump() << '\n';
}

std::vector<Event> EventLog::read_jsonl(std::istream& in) {
  std::vector<Event> events;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::invalid_argument(std::string("malformed event line: ") + e.what());
    }
    events.push_back(event_from_json(j));
  }
  return events;
}

}  // namespace fedoptima
