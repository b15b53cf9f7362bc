#pragma once

namespace dgmr::parallel {

/// Number of OpenMP threads the kernels will use. Honors DGMR_THREADS as an
/// upper bound on the first call.
int thread_count();

/// Re-read DGMR_THREADS and apply it to the OpenMP runtime.
void configure_from_env();

void set_thread_count(int n);

}  // namespace dgmr::parallel
