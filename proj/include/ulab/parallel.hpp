#pragma once

#include <cstddef>
#include <functional>

namespace ulab {

// Worker cap: ULAB_NUM_THREADS if set to a positive integer, else the
// hardware concurrency (at least 1).
std::size_t worker_count();

// Runs fn(0..n-1) across up to worker_count() threads. Callers write results
// into per-index slots and reduce them in index order, so output never
// depends on the thread count. The first exception is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace ulab
