#pragma once

#include <cstddef>
#include <functional>

namespace boxseg {

// Worker cap from BOXSEG_THREADS (unset or invalid: hardware concurrency).
std::size_t thread_limit();

/// Runs body(i) for i in [0, n). Each index must write only its own outputs,
/// which keeps results independent of scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace boxseg
