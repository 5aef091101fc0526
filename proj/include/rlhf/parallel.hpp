#pragma once

#include <cstddef>
#include <exception>

#include "rlhf/common.hpp"

#if defined(_OPENMP)
#include <omp.h>
#else
inline int omp_get_max_threads() { return 1; }
#endif

namespace rlhf {

/// Runs body(i) for i in [0, n). Exec::serial is the reference loop;
/// Exec::parallel distributes iterations over OpenMP threads. Bodies must only
/// write to slots owned by their own index. If bodies throw, the exception of
/// the lowest failing index is rethrown, as in the serial loop.
template <typename Body>
void parallel_for(std::size_t n, Exec exec, Body&& body) {
  if (exec == Exec::serial || n < 2) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  const auto count = static_cast<long long>(n);
  std::exception_ptr error;
  std::size_t error_index = n;
#pragma omp parallel for schedule(dynamic, 1)
  for (long long i = 0; i < count; ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical(rlhf_parallel_for_error)
      if (static_cast<std::size_t>(i) < error_index) {
        error_index = static_cast<std::size_t>(i);
        error = std::current_exception();
      }
    }
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace rlhf
