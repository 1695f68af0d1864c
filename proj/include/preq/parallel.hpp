#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <stop_token>
#include <thread>
#include <vector>

namespace preq {

/// Runs fn(i) for i in [0, n) on up to `workers` threads. The first exception stops the
/// remaining work and is rethrown on the calling thread. Indices not yet started when
/// `stop` fires are skipped.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn, std::stop_token stop = {}) {
  if (n == 0) return;
  const std::size_t threads = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), 1, n);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mu;

  auto body = [&] {
    while (!failed.load(std::memory_order_relaxed) && !stop.stop_requested()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        failed.store(true);
      }
    }
  };

  if (threads == 1) {
    body();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(body);
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace preq
