#include "mmt/log.hpp"

#include <iostream>

namespace mmt {

namespace {
LogLevel g_level = LogLevel::info;
}

void set_log_level(LogLevel level) { g_level = level; }

void log_msg(LogLevel level, std::string_view msg) {
  if (level < g_level) return;
  static constexpr const char* kTags[] = {"debug", "info", "warn", "error"};
  std::cerr << '[' << kTags[static_cast<int>(level)] << "] " << msg << '\n';
}

}  // namespace mmt
