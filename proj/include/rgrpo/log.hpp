#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>

namespace rgrpo {

enum class LogLevel { Debug, Info, Warn, Error };

namespace detail {

struct LogState {
  std::mutex mutex;
  LogLevel threshold = LogLevel::Warn;
  std::function<void(LogLevel, std::string_view)> sink;
};

inline LogState& log_state() {
  static LogState state;
  return state;
}

inline const char* level_name(LogLevel level) {
  switch (level) {
    case LogLevel::Debug: return "debug";
    case LogLevel::Info: return "info";
    case LogLevel::Warn: return "warn";
    case LogLevel::Error: return "error";
  }
  return "?";
}

}  // namespace detail

inline void set_log_level(LogLevel level) {
  auto& s = detail::log_state();
  std::lock_guard lock(s.mutex);
  s.threshold = level;
}

/// Replace the default stderr sink (tests use this to capture messages).
inline void set_log_sink(std::function<void(LogLevel, std::string_view)> sink) {
  auto& s = detail::log_state();
  std::lock_guard lock(s.mutex);
  s.sink = std::move(sink);
}

inline void log(LogLevel level, std::string_view message) {
  auto& s = detail::log_state();
  std::lock_guard lock(s.mutex);
  if (level < s.threshold) return;
  if (s.sink) {
    s.sink(level, message);
    return;
  }
  std::cerr << "[rgrpo " << detail::level_name(level) << "] " << message << '\n';
}

inline void log_info(std::string_view m) { log(LogLevel::Info, m); }
inline void log_warn(std::string_view m) { log(LogLevel::Warn, m); }
inline void log_error(std::string_view m) { log(LogLevel::Error, m); }

}  // namespace rgrpo
