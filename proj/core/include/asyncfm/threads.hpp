#pragma once

#include <cstddef>
#include <thread>
#include <vector>

namespace asyncfm {

// Process-wide worker cap (the CLI --threads flag). Default 1.
int thread_cap();
void set_thread_cap(int n);

// Runs fn(i) for i in [0, n); strided across at most thread_cap() workers.
// Callers merge results by index, so parallel runs stay deterministic.
template <class F>
void parallel_for(size_t n, F&& fn) {
  const size_t workers = std::min<size_t>(std::max(1, thread_cap()), n);
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (size_t i = w; i < n; i += workers) fn(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace asyncfm
