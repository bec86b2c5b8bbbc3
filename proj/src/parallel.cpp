#include "ssf/parallel.hpp"

#include <atomic>
#include <mutex>

namespace ssf {

namespace {
std::atomic<int> g_threads{0};  // 0 = unset, resolve to hardware
}

int thread_count() {
    int n = g_threads.load(std::memory_order_relaxed);
    if (n > 0) return n;
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

void set_thread_count(int n) { g_threads.store(n < 1 ? 1 : n, std::memory_order_relaxed); }

void parallel_chunks(int n_items, int n_chunks,
                     const std::function<void(int, int, int)>& fn) {
    if (n_items <= 0) return;
    n_chunks = std::min(n_chunks, n_items);
    auto bound = [&](int c) { return static_cast<int>(static_cast<long long>(n_items) * c / n_chunks); };

    int workers = std::min(thread_count(), n_chunks);
    if (workers <= 1) {
        for (int c = 0; c < n_chunks; ++c) fn(c, bound(c), bound(c + 1));
        return;
    }

    std::atomic<int> next{0};
    std::exception_ptr err;
    std::mutex err_mu;
    auto body = [&] {
        int c;
        while ((c = next.fetch_add(1)) < n_chunks) {
            try {
                fn(c, bound(c), bound(c + 1));
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!err) err = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (int t = 1; t < workers; ++t) pool.emplace_back(body);
    body();
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace ssf
