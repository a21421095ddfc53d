#include "cdpmil/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace cdpmil {

int worker_count() {
  int workers = static_cast<int>(std::thread::hardware_concurrency());
  if (workers < 1) workers = 1;
  if (const char *env = std::getenv("CDPMIL_THREADS")) {
    try {
      const int cap = std::stoi(env);
      if (cap >= 1 && cap < workers) workers = cap;
    } catch (const std::exception &) {
      // Unparseable cap: fall through to the hardware count.
    }
  }
  return workers;
}

void parallel_for(int n, const std::function<void(int)> &fn) {
  if (n <= 0) return;
  const int workers = std::min(worker_count(), n);
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }

  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto drain = [&] {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };

  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) pool.emplace_back(drain);
  for (std::thread &t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace cdpmil
