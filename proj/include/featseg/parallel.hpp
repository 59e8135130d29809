#pragma once

#include <cstddef>
#include <functional>

namespace featseg {

/// Worker count: FEATSEG_THREADS if set to a positive integer, otherwise
/// the hardware concurrency (at least 1).
unsigned default_thread_count();

/// Resolves a user request where 0 means "use the default".
unsigned resolve_threads(unsigned requested);

/// Calls fn(i) for every i in [0, n) on up to `threads` workers. Work
/// items must write only to their own output slot; callers reduce the
/// slots in index order afterwards, which keeps results independent of
/// scheduling. The first exception thrown by any item is rethrown.
void parallel_for(std::size_t n, unsigned threads,
                  const std::function<void(std::size_t)>& fn);

}  // namespace featseg
