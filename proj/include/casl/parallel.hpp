#pragma once

// Minimal deterministic parallelism. parallel_for splits [0, n) into
// contiguous chunks; bodies must write disjoint outputs. Reductions are the
// caller's job and must run in a fixed order (see the sharded trainers).

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace casl {

inline int hardware_threads() {
    if (const char* env = std::getenv("CASL_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

/// Runs fn(i) for i in [0, n). Thread count never changes results because
/// chunk boundaries only partition the index space.
template <class F>
void parallel_for(int64_t n, F&& fn) {
    if (n <= 0) return;
    const int threads = std::min<int64_t>(hardware_threads(), n);
    if (threads <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    std::exception_ptr first_error;
    std::mutex err_mu;
    const int64_t chunk = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        const int64_t lo = t * chunk;
        const int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&, lo, hi] {
            try {
                for (int64_t i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> g(err_mu);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

/// Fixed number of gradient-accumulation shards. Constant (not tied to the
/// machine) so reduction order, and therefore every result, is identical on
/// any host.
constexpr int kGradShards = 8;

} // namespace casl
