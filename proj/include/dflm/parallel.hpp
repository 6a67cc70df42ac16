#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace dflm {

/// Resolves a requested thread count: positive values are taken as-is, otherwise
/// the DFLM_THREADS environment variable, otherwise hardware concurrency.
inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("DFLM_THREADS")) {
        try {
            const int v = std::stoi(env);
            if (v > 0) return v;
        } catch (...) {
        }
    }
    return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

/// Runs body(begin, end) over [0, n) split into fixed chunks of `chunk` indices.
/// Chunk boundaries depend only on n and chunk, never on the thread count, so any
/// per-chunk computation is reproducible. The first exception thrown is rethrown.
template <class Body>
void parallel_for_chunks(std::size_t n, std::size_t chunk, int threads, Body&& body) {
    if (n == 0) return;
    chunk = std::max<std::size_t>(chunk, 1);
    const std::size_t n_chunks = (n + chunk - 1) / chunk;
    const auto workers = static_cast<std::size_t>(std::clamp<long>(threads, 1, static_cast<long>(n_chunks)));

    if (workers == 1) {
        for (std::size_t c = 0; c < n_chunks; ++c) {
            body(c * chunk, std::min(n, (c + 1) * chunk));
        }
        return;
    }

    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&] {
        for (;;) {
            const std::size_t c = next.fetch_add(1);
            if (c >= n_chunks) return;
            try {
                body(c * chunk, std::min(n, (c + 1) * chunk));
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
                next.store(n_chunks);
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

} // namespace dflm
