#pragma once

#include <sstream>
#include <string>
#include <string_view>

// Diagnostics go to stderr only; stdout is reserved for machine output.
// Level is read once from DOCQA_LOG (debug|info|warn|error|off), default warn.

namespace docqa::log {

enum class Level { Debug = 0, Info = 1, Warn = 2, Error = 3, Off = 4 };

Level threshold();
void set_threshold(Level level);
void write(Level level, std::string_view message);

template <typename... Args>
void emit(Level level, const Args&... args) {
  if (level < threshold()) return;
  std::ostringstream os;
  (os << ... << args);
  write(level, os.str());
}

template <typename... Args> void debug(const Args&... a) { emit(Level::Debug, a...); }
template <typename... Args> void info(const Args&... a) { emit(Level::Info, a...); }
template <typename... Args> void warn(const Args&... a) { emit(Level::Warn, a...); }
template <typename... Args> void error(const Args&... a) { emit(Level::Error, a...); }

}  // namespace docqa::log
