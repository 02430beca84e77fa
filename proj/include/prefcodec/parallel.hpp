#pragma once

#include <cstddef>
#include <functional>
#include <span>

namespace prefcodec {

// Runs fn(i) for i in [0, n) on up to `workers` threads. The first exception
// thrown by any call is rethrown after all threads join.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

// Items per gradient chunk. Chunks are accumulated independently and then
// summed in chunk order, so the reduction never depends on the worker count.
inline constexpr std::size_t kReduceChunk = 4;

// out += sum_i contribution(i); contribution(i, acc) adds item i into acc.
void reduce_ordered(std::size_t n, int workers, std::span<double> out,
                    const std::function<void(std::size_t, std::span<double>)>& contribution);

int default_workers();

}  // namespace prefcodec
