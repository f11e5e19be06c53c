#pragma once

#include <memory>

#include <spdlog/logger.h>

namespace nlkacz {

/// Shared stderr logger. Level comes from NLKACZ_LOG (error|warn|info|debug),
/// default warn.
std::shared_ptr<spdlog::logger> logger();

}  // namespace nlkacz
