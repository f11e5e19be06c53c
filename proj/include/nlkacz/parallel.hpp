#pragma once

#include <cstddef>
#include <functional>

namespace nlkacz {

/// Calls fn(i) for i in [0, n) on up to `threads` workers. Each worker owns a
/// contiguous block, so results written per index do not depend on the
/// thread count. The first exception thrown (lowest block) is rethrown.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace nlkacz
