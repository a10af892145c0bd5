#pragma once

// Process-wide logger writing to stderr. ILU_LOG=<spdlog level name> sets the
// level (default info, unknown names silence it).

#include <cstdlib>
#include <memory>

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

namespace ilu {

inline spdlog::logger& logger() {
  static std::shared_ptr<spdlog::logger> log = [] {
    auto l = spdlog::stderr_logger_mt("ilu");
    l->set_pattern("[%l] %v");
    l->set_level(spdlog::level::info);
    if (const char* env = std::getenv("ILU_LOG")) l->set_level(spdlog::level::from_str(env));
    return l;
  }();
  return *log;
}

}  // namespace ilu
