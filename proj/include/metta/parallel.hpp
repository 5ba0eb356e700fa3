#pragma once

// Index-parallel map with a fixed result layout. Workers only ever write the
// slot of the index they evaluate; any reduction over the results is done by
// the caller in ascending index order, so output is independent of the
// worker count.

#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace metta {

/// Worker cap from METTA_THREADS; 0, unset or unparsable means sequential.
inline std::size_t configured_threads() {
  const char* env = std::getenv("METTA_THREADS");
  if (!env || !*env) return 0;
  char* end = nullptr;
  const unsigned long n = std::strtoul(env, &end, 10);
  if (end == env || *end != '\0') return 0;
  return static_cast<std::size_t>(n);
}

namespace detail {
inline thread_local bool in_worker = false;
}

template <class Fn>
auto parallel_map(std::size_t count, Fn&& fn) -> std::vector<decltype(fn(std::size_t{}))> {
  using Result = decltype(fn(std::size_t{}));
  std::vector<Result> out(count);
  const std::size_t threads = detail::in_worker ? 0 : configured_threads();
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) out[i] = fn(i);
    return out;
  }
  const std::size_t workers = std::min(threads, count);
  std::exception_ptr error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        detail::in_worker = true;
        try {
          for (std::size_t i = w; i < count; i += workers) out[i] = fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      });
    }
  }
  if (error) std::rethrow_exception(error);
  return out;
}

}  // namespace metta
