#pragma once

#include <atomic>
#include <cstdlib>
#include <functional>
#include <string>
#include <thread>
#include <vector>

namespace kuq {

/// Worker budget: hardware concurrency, capped by KOOPMAN_UQ_THREADS.
inline int worker_count() {
    static const int cached = [] {
        int n = static_cast<int>(std::thread::hardware_concurrency());
        if (n < 1) n = 1;
        if (const char* env = std::getenv("KOOPMAN_UQ_THREADS")) {
            try {
                const int cap = std::stoi(env);
                if (cap >= 1 && cap < n) n = cap;
            } catch (...) {
                // Unparseable value: keep the hardware default.
            }
        }
        return n;
    }();
    return cached;
}

namespace detail {
inline thread_local bool inside_parallel_region = false;
}

/// Runs fn(0..count-1). Results must be written to index-disjoint slots, so
/// the outcome is independent of the worker count. Nested calls run serially.
inline void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) {
    const int workers = worker_count();
    if (count < 2 || workers < 2 || detail::inside_parallel_region) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    const std::size_t thread_count = std::min<std::size_t>(static_cast<std::size_t>(workers), count);
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(thread_count);
    for (std::size_t t = 0; t < thread_count; ++t) {
        pool.emplace_back([&] {
            detail::inside_parallel_region = true;
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= count) break;
                fn(i);
            }
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace kuq
