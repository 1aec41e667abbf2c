#pragma once

#include <cstddef>
#include <functional>

namespace depthlab {

// Process-wide worker count used by metric, evaluation and recovery loops.
// Defaults to std::thread::hardware_concurrency().
void set_num_threads(std::size_t n);
std::size_t num_threads();

// Runs task(i) for every i in [0, n_tasks) on up to num_threads() workers.
// Tasks are claimed dynamically, so callers must write results into
// per-index slots and reduce them in index order afterwards; that keeps
// every reduction independent of the worker count. The first exception (by
// task index) is rethrown after all workers finish.
void parallel_for(std::size_t n_tasks, const std::function<void(std::size_t)>& task);

}  // namespace depthlab
