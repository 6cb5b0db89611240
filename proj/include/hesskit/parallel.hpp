#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace hesskit {

/// Worker count: explicit argument > HESSKIT_THREADS env var > hardware.
inline int resolve_thread_count(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("HESSKIT_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

/// Splits [0, n) into one contiguous range per worker. Each worker sees a
/// fixed range regardless of scheduling, so callers that write disjoint
/// outputs are bitwise reproducible for any thread count.
inline void parallel_ranges(std::int64_t n, int threads,
                            const std::function<void(std::int64_t, std::int64_t)>& body) {
  threads = resolve_thread_count(threads);
  if (n <= 0) return;
  if (threads <= 1 || n == 1) {
    body(0, n);
    return;
  }
  const std::int64_t workers = std::min<std::int64_t>(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  const std::int64_t chunk = (n + workers - 1) / workers;
  for (std::int64_t w = 0; w < workers; ++w) {
    const std::int64_t lo = w * chunk;
    const std::int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace hesskit
