#pragma once

#include <cstdlib>
#include <memory>
#include <mutex>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace fedul {

// Library logger on stderr. Level comes from FEDUL_LOG_LEVEL
// (trace|debug|info|warn|error|off), default warn.
inline spdlog::logger& logger() {
    static std::shared_ptr<spdlog::logger> instance = [] {
        auto existing = spdlog::get("fedul");
        if (existing) return existing;
        auto l = spdlog::stderr_color_mt("fedul");
        l->set_pattern("[%l] %v");
        const char* env = std::getenv("FEDUL_LOG_LEVEL");
        l->set_level(env ? spdlog::level::from_str(env) : spdlog::level::warn);
        return l;
    }();
    return *instance;
}

}  // namespace fedul
