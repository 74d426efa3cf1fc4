#pragma once

namespace sgdm {

// Initializes thread limits once per process. Honors SGDM_NUM_THREADS when
// set; otherwise uses the hardware concurrency. BLAS is pinned to one thread
// per call so that batch-level OpenMP parallelism composes without
// oversubscription.
void init_threads();

// Number of worker threads batch-level loops may use.
int num_threads();

}  // namespace sgdm
