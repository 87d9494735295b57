#pragma once

// Bounded worker pool with deterministic static partitioning. Work items
// write disjoint output slabs, so results are identical for any pool size.

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace hclsm {

// HCLSM_THREADS caps every worker pool in the process.
inline std::size_t env_thread_cap() {
    if (const char* s = std::getenv("HCLSM_THREADS")) {
        long v = std::strtol(s, nullptr, 10);
        if (v > 0) return static_cast<std::size_t>(v);
    }
    std::size_t hw = std::thread::hardware_concurrency();
    return hw ? hw : 1;
}

class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool(env_thread_cap());
        return pool;
    }

    std::size_t thread_count() const { return workers_.size() + 1; }

    // Runs fn(block) for block in [0, nblocks). The caller participates;
    // blocks are claimed via an atomic ticket so no block runs twice.
    void run(std::size_t nblocks, const std::function<void(std::size_t)>& fn) {
        if (nblocks == 0) return;
        if (nblocks == 1 || workers_.empty() || in_region()) {
            for (std::size_t b = 0; b < nblocks; ++b) fn(b);
            return;
        }
        {
            std::lock_guard<std::mutex> lock(mutex_);
            fn_ = &fn;
            next_.store(0, std::memory_order_relaxed);
            limit_ = nblocks;
            busy_ = workers_.size();
            ++epoch_;
        }
        cv_.notify_all();
        in_region() = true;
        drain();
        in_region() = false;
        std::unique_lock<std::mutex> lock(mutex_);
        done_cv_.wait(lock, [&] { return busy_ == 0; });
        fn_ = nullptr;
        if (error_) {
            auto e = error_;
            error_ = nullptr;
            std::rethrow_exception(e);
        }
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lock(mutex_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

private:
    explicit ThreadPool(std::size_t threads) {
        std::size_t n = threads > 0 ? threads - 1 : 0;
        workers_.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            workers_.emplace_back([this] { worker_loop(); });
        }
    }

    static bool& in_region() {
        static thread_local bool flag = false;
        return flag;
    }

    void drain() {
        while (true) {
            std::size_t b = next_.fetch_add(1, std::memory_order_relaxed);
            if (b >= limit_) break;
            try {
                (*fn_)(b);
            } catch (...) {
                std::lock_guard<std::mutex> lock(mutex_);
                if (!error_) error_ = std::current_exception();
            }
        }
    }

    void worker_loop() {
        std::uint64_t seen = 0;
        while (true) {
            {
                std::unique_lock<std::mutex> lock(mutex_);
                cv_.wait(lock, [&] { return stop_ || epoch_ != seen; });
                if (stop_) return;
                seen = epoch_;
            }
            in_region() = true;
            drain();
            in_region() = false;
            {
                std::lock_guard<std::mutex> lock(mutex_);
                if (--busy_ == 0) done_cv_.notify_all();
            }
        }
    }

    std::vector<std::thread> workers_;
    std::mutex mutex_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const std::function<void(std::size_t)>* fn_ = nullptr;
    std::atomic<std::size_t> next_{0};
    std::size_t limit_ = 0;
    std::size_t busy_ = 0;
    std::uint64_t epoch_ = 0;
    bool stop_ = false;
    std::exception_ptr error_;
};

// Splits [0, n) into `workers` contiguous ranges and runs fn(lo, hi) on each.
// The partition depends only on (n, workers), never on scheduling, so output
// is bit-identical across runs and pool sizes.
inline void parallel_for(std::size_t n, std::size_t workers,
                         const std::function<void(std::size_t, std::size_t)>& fn) {
    if (n == 0) return;
    std::size_t w = workers == 0 ? ThreadPool::instance().thread_count() : workers;
    if (w > n) w = n;
    if (w <= 1) {
        fn(0, n);
        return;
    }
    ThreadPool::instance().run(w, [&](std::size_t b) {
        std::size_t lo = b * n / w;
        std::size_t hi = (b + 1) * n / w;
        if (lo < hi) fn(lo, hi);
    });
}

}  // namespace hclsm
