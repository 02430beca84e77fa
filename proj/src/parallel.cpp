#include "prefcodec/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace prefcodec {

int default_workers() {
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto run = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(threads - 1);
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

void reduce_ordered(std::size_t n, int workers, std::span<double> out,
                    const std::function<void(std::size_t, std::span<double>)>& contribution) {
  const std::size_t chunks = (n + kReduceChunk - 1) / kReduceChunk;
  std::vector<std::vector<double>> partial(chunks);
  parallel_for(chunks, workers, [&](std::size_t c) {
    partial[c].assign(out.size(), 0.0);
    const std::size_t end = std::min(n, (c + 1) * kReduceChunk);
    for (std::size_t i = c * kReduceChunk; i < end; ++i) contribution(i, partial[c]);
  });
  for (const auto& p : partial) {
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += p[j];
  }
}

}  // namespace prefcodec
