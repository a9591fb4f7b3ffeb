#include "privlab/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string>

namespace privlab::log {

namespace {

Level from_env() {
  const char* env = std::getenv("PRIVLAB_LOG");
  if (!env) return Level::Warn;
  const std::string v(env);
  if (v == "debug") return Level::Debug;
  if (v == "info") return Level::Info;
  if (v == "error") return Level::Error;
  if (v == "off") return Level::Off;
  return Level::Warn;
}

std::atomic<int>& current() {
  static std::atomic<int> level{static_cast<int>(from_env())};
  return level;
}

std::mutex g_mutex;

}  // namespace

Level threshold() { return static_cast<Level>(current().load()); }
void set_threshold(Level level) { current().store(static_cast<int>(level)); }

void write(Level level, std::string_view message) {
  if (static_cast<int>(level) < current().load()) return;
  static constexpr const char* names[] = {"debug", "info", "warn", "error"};
  std::lock_guard lock(g_mutex);
  std::cerr << "[privlab " << names[static_cast<int>(level)] << "] " << message << '\n';
}

}  // namespace privlab::log
