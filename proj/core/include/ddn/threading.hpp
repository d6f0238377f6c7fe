#pragma once

#include <cstdint>

namespace ddn {

/// Caps worker parallelism for all parallel loops. n <= 0 resets to the
/// hardware default.
void set_threads(int n);
int max_threads();

namespace detail {
bool in_parallel_region();
void run_parallel(std::int64_t n, void* ctx, void (*fn)(void*, std::int64_t));
} // namespace detail

/// Static-partition parallel loop over [0, n). Results must not depend on
/// the partition: every index writes disjoint outputs, and any reduction
/// is sequenced inside a single index. Nested calls run sequentially.
template <class F>
void parallel_for(std::int64_t n, F&& f) {
    if (n <= 0) return;
    auto thunk = [](void* ctx, std::int64_t i) { (*static_cast<F*>(ctx))(i); };
    detail::run_parallel(n, &f, thunk);
}

} // namespace ddn
