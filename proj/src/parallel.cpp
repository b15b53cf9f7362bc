#include "dgmr/parallel.hpp"

#include <omp.h>

#include <cstdlib>
#include <string>

namespace dgmr::parallel {
namespace {

bool g_configured = false;

}  // namespace

void configure_from_env() {
  g_configured = true;
  const char* env = std::getenv("DGMR_THREADS");
  if (env == nullptr || *env == '\0') return;
  try {
    const int cap = std::stoi(env);
    if (cap >= 1 && cap < omp_get_max_threads()) omp_set_num_threads(cap);
  } catch (const std::exception&) {
    // ignore malformed values; keep the runtime default
  }
}

int thread_count() {
  if (!g_configured) configure_from_env();
  return omp_get_max_threads();
}

void set_thread_count(int n) {
  g_configured = true;
  if (n >= 1) omp_set_num_threads(n);
}

}  // namespace dgmr::parallel
