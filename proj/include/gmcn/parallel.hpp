#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace gmcn {

inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

// Static range split across nthreads. Work items must be independent or
// write to disjoint outputs; any cross-item reduction must happen afterwards
// in index order so results do not depend on the thread count. The first
// worker exception is rethrown on the calling thread.
template <typename Fn>
void parallel_for(size_t n, int nthreads, Fn&& fn) {
    nthreads = resolve_threads(nthreads);
    if (n == 0) return;
    if (nthreads <= 1 || n == 1) {
        fn(size_t{0}, n);
        return;
    }
    const size_t workers = std::min<size_t>(nthreads, n);
    const size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::exception_ptr error;
    std::mutex error_mutex;
    for (size_t t = 0; t < workers; ++t) {
        const size_t lo = t * chunk;
        const size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&fn, &error, &error_mutex, lo, hi] {
            try {
                fn(lo, hi);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace gmcn
