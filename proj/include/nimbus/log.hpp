#pragma once

#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>

namespace nimbus::log {

enum class Level { Error = 0, Warn = 1, Info = 2, Debug = 3 };

/// Verbosity from NIMBUS_LOG (error|warn|info|debug or 0-3). Defaults to warn.
inline Level threshold() {
  static const Level level = [] {
    const char* env = std::getenv("NIMBUS_LOG");
    if (!env) return Level::Warn;
    std::string_view v(env);
    if (v == "error" || v == "0") return Level::Error;
    if (v == "info" || v == "2") return Level::Info;
    if (v == "debug" || v == "3") return Level::Debug;
    return Level::Warn;
  }();
  return level;
}

inline void write(Level lvl, std::string_view msg) {
  if (lvl > threshold()) return;
  static std::mutex mu;
  static constexpr const char* names[] = {"error", "warn", "info", "debug"};
  std::lock_guard lock(mu);
  std::cerr << "[nimbus " << names[static_cast<int>(lvl)] << "] " << msg << '\n';
}

inline void error(std::string_view m) { write(Level::Error, m); }
inline void warn(std::string_view m) { write(Level::Warn, m); }
inline void info(std::string_view m) { write(Level::Info, m); }
inline void debug(std::string_view m) { write(Level::Debug, m); }

}  // namespace nimbus::log
