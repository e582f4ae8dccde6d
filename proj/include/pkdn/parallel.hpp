#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace pkdn {

inline int worker_count() {
    static const int n = [] {
        if (const char* env = std::getenv("PKDN_THREADS")) {
            const int v = std::atoi(env);
            if (v >= 1) return std::min(v, 64);
        }
        const unsigned hc = std::thread::hardware_concurrency();
        return hc == 0 ? 1 : static_cast<int>(std::min(hc, 16u));
    }();
    return n;
}

// Static range split across threads. Each index is processed by exactly one
// thread, so results are independent of the worker count as long as the body
// writes only to locations owned by its index.
template <class Fn>
void parallel_for(std::int64_t begin, std::int64_t end, Fn&& fn, std::int64_t grain = 1024) {
    const std::int64_t n = end - begin;
    if (n <= 0) return;
    const int workers = worker_count();
    if (workers <= 1 || n < 2 * grain) {
        for (std::int64_t i = begin; i < end; ++i) fn(i);
        return;
    }
    const int parts = static_cast<int>(std::min<std::int64_t>(workers, (n + grain - 1) / grain));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(parts - 1));
    const std::int64_t chunk = (n + parts - 1) / parts;
    for (int p = 1; p < parts; ++p) {
        const std::int64_t lo = begin + p * chunk;
        const std::int64_t hi = std::min(end, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (std::int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    const std::int64_t hi0 = std::min(end, begin + chunk);
    for (std::int64_t i = begin; i < hi0; ++i) fn(i);
    for (auto& t : pool) t.join();
}

}  // namespace pkdn
