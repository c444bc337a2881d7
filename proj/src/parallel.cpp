#include "boxseg/parallel.hpp"

#include <cstdlib>
#include <string>
#include <thread>

#include <tbb/blocked_range.h>
#include <tbb/global_control.h>
#include <tbb/parallel_for.h>

namespace boxseg {

std::size_t thread_limit() {
  static const std::size_t limit = [] {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("BOXSEG_THREADS")) {
      try {
        const long v = std::stol(env);
        if (v > 0) n = static_cast<std::size_t>(v);
      } catch (const std::exception&) {
      }
    }
    return n;
  }();
  return limit;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
  if (n == 0) return;
  if (n == 1 || thread_limit() == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  static tbb::global_control control(tbb::global_control::max_allowed_parallelism, thread_limit());
  tbb::parallel_for(tbb::blocked_range<std::size_t>(0, n), [&](const tbb::blocked_range<std::size_t>& r) {
    for (std::size_t i = r.begin(); i != r.end(); ++i) body(i);
  });
}

}  // namespace boxseg
