#pragma once

#include <functional>
#include <thread>
#include <vector>

namespace shield {

// Fans f(i) out across workers and returns results indexed by i. Callers
// reduce the results in index order, so outputs are identical for any
// worker count.
template <typename R, typename F>
std::vector<R> parallel_map(size_t n, F&& f, unsigned threads = 0) {
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    std::vector<R> results(n);
    if (threads <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) results[i] = f(i);
        return results;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (unsigned w = 0; w < threads; ++w) {
        pool.emplace_back([&, w]() {
            for (size_t i = w; i < n; i += threads) results[i] = f(i);
        });
    }
    for (auto& t : pool) t.join();
    return results;
}

}  // namespace shield
