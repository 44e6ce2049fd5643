#include "balancekit/engine.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <memory>
#include <string>

#include "balancekit/errors.hpp"

namespace balancekit {

EngineConfig EngineConfig::resolve(std::optional<std::size_t> explicit_workers, bool ordered_reduce) {
    EngineConfig cfg;
    cfg.ordered_reduce = ordered_reduce;
    if (const char* env = std::getenv("BK_WORKERS"); env && *env) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (*end != '\0' || v < 1) throw ValidationError("BK_WORKERS must be a positive integer");
        cfg.worker_count = static_cast<std::size_t>(v);
    }
    if (explicit_workers) {
        if (*explicit_workers < 1) throw ValidationError("worker count must be at least 1");
        cfg.worker_count = *explicit_workers;
    }
    return cfg;
}

WorkerPool& WorkerPool::shared() {
    static WorkerPool pool;
    return pool;
}

WorkerPool::~WorkerPool() {
    {
        std::lock_guard lock(mutex_);
        stopping_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
}

void WorkerPool::ensure_threads(std::size_t n) {
    std::lock_guard lock(mutex_);
    while (threads_.size() < n) threads_.emplace_back([this] { worker_loop(); });
}

std::size_t WorkerPool::thread_count() const {
    std::lock_guard lock(mutex_);
    return threads_.size();
}

void WorkerPool::submit(std::function<void()> task) {
    {
        std::lock_guard lock(mutex_);
        queue_.push_back(std::move(task));
    }
    cv_.notify_one();
}

void WorkerPool::worker_loop() {
    while (true) {
        std::function<void()> task;
        {
            std::unique_lock lock(mutex_);
            cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
            if (stopping_ && queue_.empty()) return;
            task = std::move(queue_.front());
            queue_.pop_front();
        }
        task();
    }
}

namespace {

struct ForState {
    std::atomic<std::size_t> next{0};
    std::mutex mutex;
    std::condition_variable idle;
    bool closed = false;
    std::size_t active = 0;
    std::size_t error_index = static_cast<std::size_t>(-1);
    std::string error_message;

    void record_error(std::size_t i, std::string msg) {
        std::lock_guard lock(mutex);
        if (i < error_index) {
            error_index = i;
            error_message = std::move(msg);
        }
    }
};

void run_lane(ForState& st, std::size_t n, const std::function<void(std::size_t)>& body) {
    while (true) {
        const std::size_t i = st.next.fetch_add(1, std::memory_order_relaxed);
        if (i >= n) return;
        try {
            body(i);
        } catch (const std::exception& e) {
            st.record_error(i, e.what());
        } catch (...) {
            st.record_error(i, "unknown exception");
        }
    }
}

}  // namespace

void parallel_for(std::size_t n, std::size_t workers,
                  const std::function<void(std::size_t)>& body) {
    if (n == 0) return;
    const std::size_t lanes = std::max<std::size_t>(1, std::min(workers, n));
    auto st = std::make_shared<ForState>();
    if (lanes > 1) {
        auto& pool = WorkerPool::shared();
        pool.ensure_threads(lanes - 1);
        for (std::size_t h = 0; h + 1 < lanes; ++h) {
            // A helper that starts after the caller has closed the loop never
            // touches `body`; the caller only waits for helpers that started.
            pool.submit([st, n, &body] {
                {
                    std::lock_guard lock(st->mutex);
                    if (st->closed) return;
                    ++st->active;
                }
                run_lane(*st, n, body);
                std::lock_guard lock(st->mutex);
                if (--st->active == 0) st->idle.notify_all();
            });
        }
    }
    run_lane(*st, n, body);
    {
        std::unique_lock lock(st->mutex);
        st->closed = true;
        st->idle.wait(lock, [&] { return st->active == 0; });
    }
    if (st->error_index != static_cast<std::size_t>(-1))
        throw ReductionError(st->error_index, st->error_message);
}

void for_each_shard(const Dataset& ds, const EngineConfig& cfg,
                    const std::function<void(const Shard&, std::size_t)>& fn) {
    parallel_for(ds.shard_count(), cfg.worker_count, [&](std::size_t s) { fn(ds.shard(s), s); });
}

std::vector<double> add_vectors(std::vector<double> a, const std::vector<double>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
}

}  // namespace balancekit
