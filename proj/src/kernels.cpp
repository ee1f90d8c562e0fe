#include "wassalign/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

namespace wassalign::kernels {

namespace {
std::atomic<int> g_max_threads{1};
}

int max_threads() { return g_max_threads.load(std::memory_order_relaxed); }

void set_max_threads(int n) {
  if (n < 1) n = 1;
#ifdef _OPENMP
  int hw = omp_get_max_threads();
  if (n > hw) n = hw;
#else
  n = 1;
#endif
  g_max_threads.store(n, std::memory_order_relaxed);
}

bool openmp_compiled() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

int threads_from_env(int fallback) {
  const char* env = std::getenv("WASSALIGN_THREADS");
  if (!env || !*env) return fallback;
  try {
    int n = std::stoi(env);
    return n < 1 ? 1 : n;
  } catch (...) {
    throw ValueError(std::string("WASSALIGN_THREADS is not an integer: ") + env);
  }
}

}  // namespace wassalign::kernels
