#pragma once

#include <string_view>

// Minimal stderr logger. Verbosity comes from TAL_LOG
// (error, warn, info, debug; default warn).
namespace tal::log {

enum class Level { Error = 0, Warn = 1, Info = 2, Debug = 3 };

Level level();
void set_level(Level level);
/// Parses a level name; throws ConfigError on unknown names.
Level parse_level(std::string_view name);

void write(Level level, std::string_view message);
inline void error(std::string_view m) { write(Level::Error, m); }
inline void warn(std::string_view m) { write(Level::Warn, m); }
inline void info(std::string_view m) { write(Level::Info, m); }
inline void debug(std::string_view m) { write(Level::Debug, m); }

}  // namespace tal::log
