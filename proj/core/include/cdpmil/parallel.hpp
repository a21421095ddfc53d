#pragma once

#include <functional>

namespace cdpmil {

// Number of workers used for shared-nothing per-bag work: hardware
// concurrency, capped by the CDPMIL_THREADS environment variable when it
// parses to a positive integer.  Always at least 1.
int worker_count();

// Runs fn(0..n-1) across up to worker_count() threads.  Tasks must be
// independent; callers get deterministic results by writing into
// index-addressed slots.  The first exception thrown by any task is
// rethrown on the calling thread after all workers join.
void parallel_for(int n, const std::function<void(int)> &fn);

}  // namespace cdpmil
