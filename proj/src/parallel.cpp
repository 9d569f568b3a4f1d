#include "nls/parallel.hpp"

#include <atomic>

namespace nls {

namespace {
std::atomic<int> g_threads{0};
}

void set_thread_budget(int threads) { g_threads.store(std::max(1, threads)); }

int thread_budget() {
  int t = g_threads.load();
  if (t > 0) return t;
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace nls
