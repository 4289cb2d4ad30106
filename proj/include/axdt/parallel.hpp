// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace axdt {

/// Worker thread count: AXDT_THREADS if set (clamped to >= 1), otherwise
/// std::thread::hardware_concurrency().
inline int max_threads() {
    static const int cached = [] {
        if (const char* env = std::getenv("AXDT_THREADS")) {
            char* end = nullptr;
            long v = std::strtol(env, &end, 10);
            if (end != env && v >= 1) return static_cast<int>(std::min(v, 1024L));
        }
        unsigned hw = std::thread::hardware_concurrency();
        return hw ? static_cast<int>(hw) : 1;
    }();
    return cached;
}

/// Runs fn(i) for i in [0, n), split into contiguous chunks, one per worker.
/// fn must write only to state that is disjoint per index; under that
/// contract the result does not depend on the thread count.
template <class F>
void parallel_for(std::size_t n, F&& fn) {
    const int nt = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(max_threads()), n));
    if (nt <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(nt));
    std::exception_ptr err;
    std::mutex err_mtx;
    for (int t = 0; t < nt; ++t) {
        const std::size_t lo = n * static_cast<std::size_t>(t) / static_cast<std::size_t>(nt);
        const std::size_t hi = n * static_cast<std::size_t>(t + 1) / static_cast<std::size_t>(nt);
        pool.emplace_back([&, lo, hi] {
            try {
                for (std::size_t i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mtx);
                if (!err) err = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

/// Deterministic parallel sum of fn(i) over [0, n): fixed 1024-element blocks
/// are summed independently, then combined in block order, so the result is
/// bit-identical for any thread count.
template <class F>
double blocked_sum(std::size_t n, F&& fn) {
    constexpr std::size_t kBlock = 1024;
    const std::size_t nb = (n + kBlock - 1) / kBlock;
    std::vector<double> partial(nb, 0.0);
    parallel_for(nb, [&](std::size_t b) {
        const std::size_t lo = b * kBlock;
        const std::size_t hi = std::min(n, lo + kBlock);
        double s = 0.0;
        for (std::size_t i = lo; i < hi; ++i) s += fn(i);
        partial[b] = s;
    });
    double total = 0.0;
    for (double s : partial) total += s;
    return total;
}

}  // namespace axdt
