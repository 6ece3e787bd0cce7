#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace templaudit {

namespace detail {
inline std::atomic<std::size_t>& worker_count() {
    static std::atomic<std::size_t> count{1};
    return count;
}
}  // namespace detail

/// Process-wide worker count for the parallel loops below. Work is always
/// partitioned by index, so results never depend on this value.
inline void set_worker_count(std::size_t n) { detail::worker_count() = std::max<std::size_t>(1, n); }
inline std::size_t worker_count() { return detail::worker_count(); }

/// Calls fn(i) for every i in [0, n). Each index runs exactly once; the first
/// exception thrown by any worker is rethrown on the calling thread.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers = std::min(worker_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto run = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    std::vector<std::jthread> pool;
    pool.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run);
    run();
    pool.clear();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace templaudit
