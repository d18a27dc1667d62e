#include "ntseg/parallel.hpp"

#include <atomic>
#include <thread>
#include <vector>

namespace ntseg {

namespace {
std::atomic<size_t> g_threads{1};
}

void set_num_threads(size_t n) { g_threads.store(n == 0 ? 1 : n); }

size_t num_threads() { return g_threads.load(); }

void parallel_for(size_t count, const std::function<void(size_t)>& fn) {
  size_t workers = g_threads.load();
  if (workers > count) workers = count;
  if (workers <= 1 || count < 2) {
    for (size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  size_t chunk = (count + workers - 1) / workers;
  for (size_t w = 0; w < workers; ++w) {
    size_t lo = w * chunk;
    size_t hi = lo + chunk < count ? lo + chunk : count;
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace ntseg
