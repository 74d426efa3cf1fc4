#include "sgdm/parallel.hpp"

#include <omp.h>

#include <algorithm>
#include <cstdlib>
#include <thread>

extern "C" void openblas_set_num_threads(int);

namespace sgdm {

namespace {
int g_threads = 0;
}

void init_threads() {
    if (g_threads > 0) return;
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (n <= 0) n = 1;
    if (const char* env = std::getenv("SGDM_NUM_THREADS")) {
        int cap = std::atoi(env);
        if (cap >= 1) n = std::min(n, cap);
    }
    g_threads = n;
    omp_set_num_threads(n);
    openblas_set_num_threads(1);
}

int num_threads() {
    if (g_threads == 0) init_threads();
    return g_threads;
}

}  // namespace sgdm
