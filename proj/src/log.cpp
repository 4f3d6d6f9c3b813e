#include "tal/log.hpp"

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <mutex>
#include <string>

#include "tal/errors.hpp"

namespace tal::log {

namespace {

Level initial_level() {
  const char* env = std::getenv("TAL_LOG");
  if (env == nullptr || *env == '\0') return Level::Warn;
  try {
    return parse_level(env);
  } catch (const ConfigError&) {
    std::fprintf(stderr, "warning: ignoring unknown TAL_LOG value '%s'\n", env);
    return Level::Warn;
  }
}

std::atomic<Level>& current() {
  static std::atomic<Level> value{initial_level()};
  return value;
}

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

Level level() { return current().load(); }
void set_level(Level l) { current().store(l); }

Level parse_level(std::string_view name) {
  if (name == "error") return Level::Error;
  if (name == "warn" || name == "warning") return Level::Warn;
  if (name == "info") return Level::Info;
  if (name == "debug") return Level::Debug;
  throw ConfigError("unknown log level '" + std::string(name) + "'");
}

void write(Level l, std::string_view message) {
  if (static_cast<int>(l) > static_cast<int>(level())) return;
  static constexpr const char* tags[] = {"error", "warning", "info", "debug"};
  std::lock_guard lock(sink_mutex());
  std::fprintf(stderr, "%s: %.*s\n", tags[static_cast<int>(l)], static_cast<int>(message.size()), message.data());
}

}  // namespace tal::log
