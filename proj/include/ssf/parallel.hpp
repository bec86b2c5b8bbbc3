#pragma once

#include <algorithm>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace ssf {

// Worker cap shared by every parallel section. Results are bitwise
// independent of this value: work is partitioned into a fixed number of
// chunks and any cross-chunk reduction happens in chunk order.
int thread_count();
void set_thread_count(int n);

// Number of chunks heavy batched kernels partition into.
inline constexpr int kFixedChunks = 8;

// Runs fn(chunk_index, begin, end) for n_chunks contiguous slices of
// [0, n_items). Chunk boundaries depend only on n_items and n_chunks.
void parallel_chunks(int n_items, int n_chunks,
                     const std::function<void(int, int, int)>& fn);

}  // namespace ssf
