#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace flowscope {

inline int hardware_workers() {
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

// Runs f(i) for i in [0, n) split into contiguous chunks across `workers`
// threads. Each index must write only its own output slot; the partitioning
// never affects results, so output is identical for any worker count.
template <class F>
void parallel_for(std::size_t n, int workers, F&& f) {
    if (n == 0) return;
    workers = std::max(1, workers);
    const std::size_t nworkers = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
    if (nworkers == 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::thread> threads;
    threads.reserve(nworkers);
    std::vector<std::exception_ptr> errors(nworkers);
    const std::size_t chunk = (n + nworkers - 1) / nworkers;
    for (std::size_t w = 0; w < nworkers; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(begin + chunk, n);
        threads.emplace_back([&, w, begin, end] {
            try {
                for (std::size_t i = begin; i < end; ++i) f(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace flowscope
