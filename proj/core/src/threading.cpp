#include "ddn/threading.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ddn {

namespace {
int g_thread_cap = 0; // 0 = hardware default
}

void set_threads(int n) {
    g_thread_cap = n > 0 ? n : 0;
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#endif
}

int max_threads() {
#ifdef _OPENMP
    return g_thread_cap > 0 ? g_thread_cap : omp_get_max_threads();
#else
    return 1;
#endif
}

namespace detail {

bool in_parallel_region() {
#ifdef _OPENMP
    return omp_in_parallel() != 0;
#else
    return false;
#endif
}

void run_parallel(std::int64_t n, void* ctx, void (*fn)(void*, std::int64_t)) {
#ifdef _OPENMP
    if (!in_parallel_region() && max_threads() > 1 && n > 1) {
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < n; ++i) fn(ctx, i);
        return;
    }
#endif
    for (std::int64_t i = 0; i < n; ++i) fn(ctx, i);
}

} // namespace detail
} // namespace ddn
