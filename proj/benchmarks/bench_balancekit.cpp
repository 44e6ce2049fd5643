#include <random>

#include <benchmark/benchmark.h>

#include "balancekit/diagnostics.hpp"
#include "balancekit/engine.hpp"
#include "balancekit/solvers.hpp"

using namespace balancekit;

namespace {

// n units, d standard-normal covariates, a fifth treated with a 0.2 shift.
Dataset synthetic(std::size_t n, std::size_t d) {
    std::mt19937_64 rng(n * 31 + d);
    std::normal_distribution<double> nd;
    Schema schema;
    for (std::size_t j = 0; j < d; ++j) schema.covariates.push_back("x" + std::to_string(j));
    std::vector<Shard> shards;
    std::size_t id = 0;
    for (std::size_t start = 0; start < n; start += kDefaultShardRows) {
        const std::size_t rows = std::min(kDefaultShardRows, n - start);
        const std::size_t nt = rows / 5, nc = rows - nt;
        Shard sh;
        sh.control = ColumnBlock(nc, d, 0);
        sh.treated = ColumnBlock(nt, d, 0);
        for (std::size_t j = 0; j < d; ++j) {
            for (double& v : sh.control.covariate(j)) v = nd(rng);
            for (double& v : sh.treated.covariate(j)) v = nd(rng) + 0.2;
        }
        for (std::size_t i = 0; i < nc; ++i) sh.control_ids.push_back("c" + std::to_string(id++));
        for (std::size_t i = 0; i < nt; ++i) sh.treated_ids.push_back("t" + std::to_string(id++));
        shards.push_back(std::move(sh));
    }
    return Dataset(std::move(schema), std::move(shards));
}

SolverConfig fixed_iterations(std::size_t k, std::size_t workers) {
    SolverConfig cfg;
    cfg.max_iterations = k;
    cfg.tolerance = 1e-300;
    cfg.engine = EngineConfig{workers, true};
    return cfg;
}

void BM_TargetMoments(benchmark::State& state) {
    const Dataset ds = synthetic(static_cast<std::size_t>(state.range(0)), 20);
    const auto spec = MomentSpec::first_moments(20);
    const EngineConfig engine{static_cast<std::size_t>(state.range(1)), true};
    for (auto _ : state) benchmark::DoNotOptimize(compute_target_moments(ds, spec, engine));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_TargetMoments)->ArgsProduct({{100000, 1000000}, {1, 4}})->Unit(benchmark::kMillisecond);

void BM_SolveMs(benchmark::State& state) {
    const Dataset ds = synthetic(static_cast<std::size_t>(state.range(0)), 20);
    const auto cfg = fixed_iterations(30, static_cast<std::size_t>(state.range(1)));
    for (auto _ : state) benchmark::DoNotOptimize(solve_ms(ds, MomentSpec::first_moments(20), cfg));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SolveMs)
    ->ArgsProduct({{50000, 100000, 200000, 400000, 800000}, {1}})
    ->Args({1000000, 1})
    ->Args({1000000, 4})
    ->Unit(benchmark::kMillisecond);

void BM_SolveEb(benchmark::State& state) {
    const Dataset ds = synthetic(static_cast<std::size_t>(state.range(0)), 20);
    const auto cfg = fixed_iterations(30, 1);
    for (auto _ : state) benchmark::DoNotOptimize(solve_eb(ds, MomentSpec::first_moments(20), cfg));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SolveEb)->Arg(50000)->Arg(200000)->Arg(800000)->Unit(benchmark::kMillisecond);

void BM_BalanceReport(benchmark::State& state) {
    const Dataset ds = synthetic(static_cast<std::size_t>(state.range(0)), 10);
    WeightVector w;
    w.unit_ids = ds.control_ids();
    w.weights.assign(ds.n_control(), 1.0 / static_cast<double>(ds.n_control()));
    for (auto _ : state) benchmark::DoNotOptimize(balance_report(ds, w));
}
BENCHMARK(BM_BalanceReport)->Arg(10000)->Arg(100000)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
