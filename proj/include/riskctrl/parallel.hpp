#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace riskctrl {

/// Worker count used by scenario loops; 0 means hardware concurrency.
struct Parallelism {
    unsigned workers = 1;

    unsigned resolved() const noexcept {
        if (workers != 0) return workers;
        return std::max(1u, std::thread::hardware_concurrency());
    }
};

/// Calls body(i) for i in [0, count). Indices are split into contiguous
/// blocks, so each body must only write to storage owned by its index.
/// The first exception thrown (lowest index) is rethrown after all workers join.
template <class Body>
void parallel_for(std::size_t count, Parallelism par, Body&& body) {
    const std::size_t workers = std::min<std::size_t>(par.resolved(), count);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }

    std::mutex guard;
    std::exception_ptr first_error;
    std::size_t first_index = count;

    auto run_block = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            try {
                body(i);
            } catch (...) {
                std::lock_guard lock(guard);
                if (i < first_index) {
                    first_index = i;
                    first_error = std::current_exception();
                }
                return;
            }
        }
    };

    std::vector<std::thread> threads;
    threads.reserve(workers - 1);
    const std::size_t chunk = (count + workers - 1) / workers;
    for (std::size_t w = 1; w < workers; ++w) {
        const std::size_t begin = std::min(count, w * chunk);
        const std::size_t end = std::min(count, begin + chunk);
        threads.emplace_back(run_block, begin, end);
    }
    run_block(0, std::min(count, chunk));
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace riskctrl
