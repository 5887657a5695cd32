#pragma once

#include <string_view>

namespace mmt {

enum class LogLevel { debug, info, warn, error };

void set_log_level(LogLevel level);
void log_msg(LogLevel level, std::string_view msg);
inline void log_info(std::string_view msg) { log_msg(LogLevel::info, msg); }
inline void log_warn(std::string_view msg) { log_msg(LogLevel::warn, msg); }

}  // namespace mmt
