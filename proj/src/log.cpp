#include "docqa/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>

namespace docqa::log {

namespace {

Level from_env() {
  const char* v = std::getenv("DOCQA_LOG");
  if (!v) return Level::Warn;
  const std::string_view s(v);
  if (s == "debug") return Level::Debug;
  if (s == "info") return Level::Info;
  if (s == "error") return Level::Error;
  if (s == "off") return Level::Off;
  return Level::Warn;
}

std::atomic<Level>& level_ref() {
  static std::atomic<Level> level{from_env()};
  return level;
}

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

constexpr std::string_view kNames[] = {"debug", "info", "warn", "error", "off"};

}  // namespace

Level threshold() { return level_ref().load(std::memory_order_relaxed); }
void set_threshold(Level level) { level_ref().store(level); }

void write(Level level, std::string_view message) {
  std::lock_guard lock(sink_mutex());
  std::cerr << "[docqa " << kNames[static_cast<int>(level)] << "] " << message << '\n';
}

}  // namespace docqa::log
