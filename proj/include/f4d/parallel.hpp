#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace f4d {

/// Number of work chunks used for sample-parallel loops. Fixed so that
/// per-chunk partial sums, reduced in chunk order, are independent of the
/// machine's thread count.
inline constexpr std::size_t kWorkChunks = 8;

/// Splits [0, n) into kWorkChunks contiguous ranges and runs
/// fn(chunk, begin, end) on each, concurrently when hardware allows and n
/// reaches min_parallel.
template <class Fn>
void parallel_chunks(std::size_t n, Fn&& fn, std::size_t min_parallel = 1024) {
    const std::size_t chunks = kWorkChunks;
    auto range = [&](std::size_t c) {
        return std::pair<std::size_t, std::size_t>{n * c / chunks, n * (c + 1) / chunks};
    };
    const unsigned hw = std::thread::hardware_concurrency();
    if (hw <= 1 || n < min_parallel) {
        for (std::size_t c = 0; c < chunks; ++c) {
            const auto [b, e] = range(c);
            fn(c, b, e);
        }
        return;
    }
    std::vector<std::exception_ptr> errors(chunks);
    std::vector<std::thread> pool;
    pool.reserve(chunks);
    for (std::size_t c = 0; c < chunks; ++c) {
        pool.emplace_back([&, c] {
            try {
                const auto [b, e] = range(c);
                fn(c, b, e);
            } catch (...) {
                errors[c] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

} // namespace f4d
