#pragma once

#include <cstddef>
#include <functional>

namespace mctseg {

/// Calls fn(i) for every i in [0, n) using up to `jobs` worker threads.
/// Work is claimed index by index; callers write results into pre-sized
/// slots so output order never depends on scheduling. If any call throws,
/// the exception from the lowest failing index is rethrown.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

}  // namespace mctseg
