#pragma once

#include <cstddef>
#include <functional>

namespace fabme {

/// FABME_THREADS if set to a positive integer, else the hardware concurrency.
std::size_t worker_count();

/// Runs fn(0..n-1) across worker_count() threads. The first exception thrown
/// by any task is rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace fabme
