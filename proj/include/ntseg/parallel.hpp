#pragma once

#include <cstddef>
#include <functional>

namespace ntseg {

// Global worker count for spatial loops. 1 = fully sequential. Parallel and
// sequential modes produce bit-identical results: every output cell is owned
// by exactly one worker and its reduction order does not depend on the split.
void set_num_threads(size_t n);
size_t num_threads();

// Runs fn(i) for i in [0, count). Splits into contiguous chunks when more
// than one worker is configured and the range is worth splitting.
void parallel_for(size_t count, const std::function<void(size_t)>& fn);

}  // namespace ntseg
