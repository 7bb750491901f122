#pragma once

#include <cstddef>
#include <functional>

namespace thrid {

// Worker-pool parallelism with static chunking. Every index writes only its
// own outputs and each chunk runs its indices in ascending order, so results
// are byte-identical for any thread count.

// Caps the number of workers (including the calling thread). n <= 0 resets to
// the hardware default.
void set_threads(int n);
int thread_count();

// Calls fn(begin, end) on disjoint ascending ranges covering [0, n).
void parallel_chunks(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

// Calls fn(i) for each i in [0, n).
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace thrid
