#include "vmlab/kernels.hpp"

#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vmlab::kern {

namespace {
std::atomic<Exec> g_default{Exec::Auto};
}

void set_default_exec(Exec e) { g_default.store(e, std::memory_order_relaxed); }

Exec default_exec() { return g_default.load(std::memory_order_relaxed); }

namespace detail {

bool run_parallel(Exec e, std::size_t flops) {
  if (e == Exec::Auto) e = default_exec();
  switch (e) {
    case Exec::Serial:
      return false;
    case Exec::Parallel:
      return true;
    case Exec::Auto:
    default:
#ifdef _OPENMP
      return flops >= kAutoParallelMinFlops && omp_get_max_threads() > 1;
#else
      return false;
#endif
  }
}

}  // namespace detail
}  // namespace vmlab::kern
