#pragma once

#include <cstddef>
#include <functional>

namespace mptq {

/// Worker count: MPTQ_THREADS if set and positive, otherwise the hardware
/// concurrency (at least 1).
std::size_t worker_count();

/// Runs body(i) for i in [0, n). Each index is handled exactly once; callers
/// write results into per-index slots and reduce afterwards.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace mptq
