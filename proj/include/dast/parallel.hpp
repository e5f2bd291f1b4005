#pragma once

// Index-based parallel loop. Work items write results into caller-owned
// slots keyed by index, so outputs are identical for any thread count.

#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace dast {

inline unsigned default_threads() {
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : n;
}

inline void parallel_for(std::size_t n_items,
                         const std::function<void(std::size_t)>& fn,
                         unsigned n_threads = 0) {
  if (n_threads == 0) n_threads = default_threads();
  if (n_threads <= 1 || n_items <= 1) {
    for (std::size_t i = 0; i < n_items; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&]() {
    while (true) {
      std::size_t i = next.fetch_add(1);
      if (i >= n_items) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  unsigned workers = static_cast<unsigned>(
      std::min<std::size_t>(n_threads, n_items));
  pool.reserve(workers);
  for (unsigned t = 0; t < workers; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace dast
