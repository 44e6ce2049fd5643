#include <cmath>
#include <random>

#include "doctest.h"

#include "balancekit/diagnostics.hpp"
#include "balancekit/simulation.hpp"
#include "fixtures.hpp"

using namespace balancekit;

namespace {

SimulationSpec small_spec(std::size_t n, DgpKind kind = DgpKind::linear, std::uint64_t seed = 1) {
    SimulationSpec s;
    s.n_units = n;
    s.d_continuous = 4;
    s.d_binary = 2;
    s.dgp = kind;
    s.seed = seed;
    return s;
}

// Hand-made linear models: outcome k = k + sum_j (j + 1) x_j / 10, residual
// pool chosen by the caller.
DgpModels handmade(std::size_t d, std::vector<double> residuals, std::vector<double> treatment_coef) {
    DgpModels m;
    m.kind = DgpKind::linear;
    m.dimension = d;
    m.outcome_names = {"y0", "y1"};
    for (std::size_t k = 0; k < 2; ++k) {
        std::vector<double> c{static_cast<double>(k)};
        for (std::size_t j = 0; j < d; ++j) c.push_back((j + 1.0) / 10.0);
        m.outcome_coef.push_back(c);
    }
    m.treatment_coef = std::move(treatment_coef);
    m.residual_rows = residuals.size() / 2;
    m.residuals = std::move(residuals);
    return m;
}

BasePopulation test_half(std::size_t n, std::size_t d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    BasePopulation p;
    for (std::size_t j = 0; j < d; ++j) p.covariate_names.push_back("x" + std::to_string(j));
    p.d_continuous = d;
    p.rows = n;
    for (std::size_t i = 0; i < n * d; ++i) p.x.push_back(nd(rng));
    return p;
}

}  // namespace

TEST_CASE("base population: a fixed seed is deterministic") {
    const auto a = generate_base_population(small_spec(2000));
    const auto b = generate_base_population(small_spec(2000));
    CHECK(a.x == b.x);
    CHECK(a.y == b.y);
    CHECK(a.treatment == b.treatment);
    const auto c = generate_base_population(small_spec(2000, DgpKind::linear, 2));
    CHECK(a.x != c.x);
}

TEST_CASE("base population: zero inflation of 1 empties every continuous column") {
    auto spec = small_spec(1000);
    spec.zero_inflation = 1.0;
    const auto p = generate_base_population(spec);
    for (std::size_t i = 0; i < p.rows; ++i)
        for (std::size_t j = 0; j < p.d_continuous; ++j) REQUIRE(p.at(i, j) == 0.0);
}

TEST_CASE("base population: zero share tracks the inflation probability at n = 100k") {
    const auto p = generate_base_population(small_spec(100000));
    for (std::size_t j = 0; j < p.d_continuous; ++j) {
        std::size_t zeros = 0;
        for (std::size_t i = 0; i < p.rows; ++i) zeros += p.at(i, j) == 0.0;
        const double share = static_cast<double>(zeros) / static_cast<double>(p.rows);
        CHECK(std::abs(share - p.params.zero_prob[j]) <= 0.03);
    }
    for (std::size_t j = p.d_continuous; j < p.dimension(); ++j)
        for (std::size_t i = 0; i < 1000; ++i) REQUIRE((p.at(i, j) == 0.0 || p.at(i, j) == 1.0));
}

TEST_CASE("dgp models: noiseless least squares recovers the coefficients") {
    auto spec = small_spec(400);
    auto pop = generate_base_population(spec);
    const std::size_t d = pop.dimension(), m = pop.outcome_count();
    std::vector<std::vector<double>> truth(m, std::vector<double>(d + 1));
    for (std::size_t k = 0; k < m; ++k)
        for (std::size_t j = 0; j <= d; ++j) truth[k][j] = 0.5 * static_cast<double>(k) - 0.1 * static_cast<double>(j);
    for (std::size_t i = 0; i < pop.rows; ++i)
        for (std::size_t k = 0; k < m; ++k) {
            double y = truth[k][0];
            for (std::size_t j = 0; j < d; ++j) y += truth[k][j + 1] * pop.at(i, j);
            pop.y[i * m + k] = y;
        }
    const auto md = fit_dgp_models(pop, spec);
    for (std::size_t k = 0; k < m; ++k)
        for (std::size_t j = 0; j <= d; ++j) CHECK(std::abs(md.outcome_coef[k][j] - truth[k][j]) <= 1e-6);
    for (double r : md.residuals) CHECK(std::abs(r) <= 1e-6);
}

TEST_CASE("dgp models: the interaction family has 2d + 1 features") {
    auto spec = small_spec(400, DgpKind::linear_interactions);
    const auto md = fit_dgp_models(generate_base_population(spec), spec);
    CHECK(md.feature_count() == 2 * 6 + 1);
    CHECK(md.outcome_coef[0].size() == 13);
    CHECK(md.treatment_coef.size() == 13);
    std::vector<double> row{1, 2, 3, 4, 1, 0};
    const auto f = md.features(row.data());
    CHECK(f[0] == 1.0);
    CHECK(f[7] == 1.0 * row[md.anchor_column]);
    CHECK(f[8] == 2.0 * row[md.anchor_column]);
}

TEST_CASE("forest: a depth-1 single tree on a step function gives the two leaf means") {
    std::vector<double> x, y;
    for (int i = 0; i < 40; ++i) {
        x.push_back(i / 40.0);
        y.push_back(i < 15 ? 1.0 : 3.0);
    }
    ForestOptions o;
    o.trees = 1;
    o.max_depth = 1;
    o.bootstrap = false;
    const Forest f = fit_forest(x, 40, 1, y, false, o);
    const double lo = 0.1, hi = 0.9;
    CHECK(f.predict(&lo) == 1.0);
    CHECK(f.predict(&hi) == 3.0);
    CHECK(f.trees[0].nodes.size() == 3);
}

TEST_CASE("forest: classification leaves hold class-1 shares") {
    std::vector<double> x, y;
    for (int i = 0; i < 100; ++i) {
        x.push_back(i);
        y.push_back(i >= 50 ? 1.0 : 0.0);
    }
    ForestOptions o;
    o.trees = 3;
    o.max_depth = 4;
    const Forest f = fit_forest(x, 100, 1, y, true, o);
    const double a = 5, b = 95;
    CHECK(f.predict(&a) == doctest::Approx(0.0));
    CHECK(f.predict(&b) == doctest::Approx(1.0));
}

TEST_CASE("synthesize: zero residuals give the fitted outcomes") {
    const auto test = test_half(500, 3, 1);
    const auto md = handmade(3, std::vector<double>(20, 0.0), {0.0, 0.5, 0.0, -0.5});
    std::mt19937_64 rng(2);
    const Dataset ds = synthesize(test, md, rng, 64);
    const auto records = ds.records();
    for (const auto& r : records)
        for (std::size_t k = 0; k < 2; ++k) CHECK(r.outcomes[k] == md.predict_outcome(k, r.covariates.data()));
}

TEST_CASE("synthesize: a propensity of 0.5 treats about half at n = 10k") {
    const auto test = test_half(10000, 3, 3);
    const auto md = handmade(3, std::vector<double>(20, 0.0), {0.0, 0.0, 0.0, 0.0});
    std::mt19937_64 rng(4);
    const Dataset ds = synthesize(test, md, rng);
    CHECK(std::abs(static_cast<double>(ds.n_treated()) / 10000.0 - 0.5) <= 0.02);
}

TEST_CASE("synthesize: a fixed seed is deterministic") {
    const auto test = test_half(300, 3, 5);
    std::vector<double> res;
    for (int i = 0; i < 40; ++i) res.push_back(std::sin(i));
    const auto md = handmade(3, res, {0.1, 0.2, -0.3, 0.0});
    std::mt19937_64 a(9), b(9);
    const auto ra = synthesize(test, md, a).records();
    const auto rb = synthesize(test, md, b).records();
    REQUIRE(ra.size() == rb.size());
    for (std::size_t i = 0; i < ra.size(); ++i) {
        CHECK(ra[i].treatment == rb[i].treatment);
        CHECK(ra[i].outcomes == rb[i].outcomes);
    }
}

TEST_CASE("synthesize: residual resampling preserves the pool mean") {
    const std::size_t n = 20000;
    const auto test = test_half(n, 2, 6);
    std::mt19937_64 rng(7);
    std::gamma_distribution<double> skewed(0.5, 4.0);
    std::vector<double> res;
    for (int i = 0; i < 2000; ++i) res.push_back(skewed(rng) - 1.0);
    double pool_mean[2] = {0, 0}, pool_var[2] = {0, 0};
    for (std::size_t i = 0; i < 1000; ++i)
        for (std::size_t k = 0; k < 2; ++k) pool_mean[k] += res[i * 2 + k] / 1000.0;
    for (std::size_t i = 0; i < 1000; ++i)
        for (std::size_t k = 0; k < 2; ++k)
            pool_var[k] += (res[i * 2 + k] - pool_mean[k]) * (res[i * 2 + k] - pool_mean[k]) / 1000.0;
    const auto md = handmade(2, res, {0.0, 0.3, 0.0});
    const Dataset ds = synthesize(test, md, rng);
    double got[2] = {0, 0};
    for (const auto& r : ds.records())
        for (std::size_t k = 0; k < 2; ++k)
            got[k] += (r.outcomes[k] - md.predict_outcome(k, r.covariates.data())) / static_cast<double>(n);
    for (std::size_t k = 0; k < 2; ++k) {
        const double se = std::sqrt(pool_var[k] / static_cast<double>(n));
        CHECK(std::abs(got[k] - pool_mean[k]) <= 3.0 * se);
    }
}

TEST_CASE("benchmark: one replication of one method") {
    BenchmarkOptions o;
    o.replications = 1;
    o.methods = {"ms"};
    o.shard_rows = 256;
    const auto r = run_benchmark(small_spec(2000), o);
    REQUIRE(r.methods.size() == 1);
    CHECK(r.methods[0].method == "ms");
    CHECK(r.test_units == 1000);
    // One replication row per outcome.
    CHECK(r.rows.size() == r.outcome_names.size());
    for (const auto& row : r.rows) {
        CHECK(row.replication == 0);
        CHECK(row.method == "ms");
        CHECK_FALSE(row.failed);
    }
    for (const auto& est : r.methods[0].estimates) CHECK(est.size() == 1);
}

TEST_CASE("benchmark: replication datasets match the benchmark's own draws") {
    const auto spec = small_spec(1000, DgpKind::random_forest, 4);
    const auto fit = fit_reference(spec);
    BenchmarkOptions o;
    o.replications = 2;
    o.methods = {"eb"};
    o.diagnostics = false;
    const auto r = run_benchmark(spec, o);
    for (std::size_t b = 0; b < 2; ++b) {
        const Dataset ds = replication_dataset(spec, fit, b, 500);
        SolverConfig sc;
        const auto w = solve_eb(ds, MomentSpec::first_moments(ds.dimension()), sc);
        for (std::size_t k = 0; k < r.outcome_names.size(); ++k)
            CHECK(r.methods[0].estimates[k][b] == doctest::Approx(patt(ds, w.weights, k).pct_change).epsilon(1e-9));
    }
}

TEST_CASE("simulation spec validation") {
    auto s = small_spec(7);
    CHECK_THROWS(s.validate());
    s = small_spec(100);
    s.zero_inflation = 1.5;
    CHECK_THROWS(s.validate());
    s = small_spec(100, DgpKind::linear_interactions);
    s.interaction_anchor = 5;
    CHECK_THROWS(s.validate());
}
