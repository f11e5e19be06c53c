#include "nlkacz/log.hpp"

#include <cstdlib>
#include <string_view>

#include <spdlog/sinks/stdout_color_sinks.h>

namespace nlkacz {

namespace {

spdlog::level::level_enum level_from_env() {
    const char* env = std::getenv("NLKACZ_LOG");
    if (env == nullptr) return spdlog::level::warn;
    const std::string_view v(env);
    if (v == "error") return spdlog::level::err;
    if (v == "warn") return spdlog::level::warn;
    if (v == "info") return spdlog::level::info;
    if (v == "debug") return spdlog::level::debug;
    return spdlog::level::warn;
}

}  // namespace

std::shared_ptr<spdlog::logger> logger() {
    static std::shared_ptr<spdlog::logger> instance = [] {
        auto l = spdlog::stderr_color_mt("nlkacz");
        l->set_level(level_from_env());
        l->set_pattern("[%l] %v");
        return l;
    }();
    return instance;
}

}  // namespace nlkacz
