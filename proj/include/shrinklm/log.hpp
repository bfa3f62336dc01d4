#pragma once

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <memory>

namespace shrinklm {

/// Library-wide stderr logger; SHRINKLM_LOG sets the level (trace..off).
inline spdlog::logger& logger() {
  static std::shared_ptr<spdlog::logger> instance = [] {
    auto l = spdlog::stderr_color_st("shrinklm");
    l->set_pattern("[%H:%M:%S] [%^%l%$] %v");
    const char* level = std::getenv("SHRINKLM_LOG");
    l->set_level(level ? spdlog::level::from_str(level) : spdlog::level::info);
    return l;
  }();
  return *instance;
}

}  // namespace shrinklm
