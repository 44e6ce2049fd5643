#pragma once

#include <condition_variable>
#include <cstddef>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <thread>
#include <utility>
#include <vector>

#include "balancekit/data_model.hpp"

namespace balancekit {

struct EngineConfig {
    std::size_t worker_count = 1;
    bool ordered_reduce = true;

    /// BK_WORKERS overrides the default of 1; an explicit value (the CLI
    /// --workers flag) overrides both.
    static EngineConfig resolve(std::optional<std::size_t> explicit_workers = std::nullopt,
                                bool ordered_reduce = true);
};

/// Process-wide pool of helper threads. Grows on demand, never shrinks.
class WorkerPool {
public:
    static WorkerPool& shared();

    WorkerPool(const WorkerPool&) = delete;
    WorkerPool& operator=(const WorkerPool&) = delete;
    ~WorkerPool();

    void ensure_threads(std::size_t n);
    void submit(std::function<void()> task);
    std::size_t thread_count() const;

private:
    WorkerPool() = default;
    void worker_loop();

    mutable std::mutex mutex_;
    std::condition_variable cv_;
    std::deque<std::function<void()>> queue_;
    std::vector<std::thread> threads_;
    bool stopping_ = false;
};

/// Runs body(i) for i in [0, n) on up to `workers` lanes; the calling thread
/// is always one of them, so nested calls cannot deadlock. If any body
/// throws, a ReductionError naming the lowest failing index is raised after
/// all claimed items finish.
void parallel_for(std::size_t n, std::size_t workers,
                  const std::function<void(std::size_t)>& body);

template <class Acc>
struct Reduction {
    std::function<Acc(const Shard&, std::size_t)> map;
    std::function<Acc(Acc, const Acc&)> combine;
    Acc identity{};
};

namespace detail {

template <class Acc>
Acc tree_fold(std::vector<Acc> level, const Reduction<Acc>& r) {
    if (level.empty()) return r.identity;
    while (level.size() > 1) {
        std::vector<Acc> next;
        next.reserve((level.size() + 1) / 2);
        for (std::size_t i = 0; i + 1 < level.size(); i += 2) {
            next.push_back(r.combine(std::move(level[i]), level[i + 1]));
        }
        if (level.size() % 2 == 1) next.push_back(std::move(level.back()));
        level = std::move(next);
    }
    return r.combine(r.identity, level.front());
}

}  // namespace detail

/// Folds r.map over every shard. In ordered mode the combine tree is fixed
/// by shard index, so the result is bit-identical for any worker count.
template <class Acc>
Acc run_reduction(const Dataset& ds, const Reduction<Acc>& r, const EngineConfig& cfg) {
    const std::size_t n = ds.shard_count();
    if (cfg.ordered_reduce) {
        std::vector<std::optional<Acc>> parts(n);
        parallel_for(n, cfg.worker_count,
                     [&](std::size_t s) { parts[s].emplace(r.map(ds.shard(s), s)); });
        std::vector<Acc> level;
        level.reserve(n);
        for (auto& p : parts) level.push_back(std::move(*p));
        return detail::tree_fold(std::move(level), r);
    }
    std::mutex m;
    Acc total = r.identity;
    parallel_for(n, cfg.worker_count, [&](std::size_t s) {
        Acc part = r.map(ds.shard(s), s);
        std::lock_guard lock(m);
        total = r.combine(std::move(total), part);
    });
    return total;
}

/// Map-only pass (e.g. writing per-unit outputs into preallocated slices).
void for_each_shard(const Dataset& ds, const EngineConfig& cfg,
                    const std::function<void(const Shard&, std::size_t)>& fn);

/// Element-wise sum combine for vector accumulators.
std::vector<double> add_vectors(std::vector<double> a, const std::vector<double>& b);

}  // namespace balancekit
