#include <cmath>
#include <random>

#include "doctest.h"

#include "balancekit/errors.hpp"
#include "balancekit/estimation.hpp"
#include "fixtures.hpp"

using namespace balancekit;

namespace {

WeightVector uniform(const Dataset& ds) {
    WeightVector w;
    w.unit_ids = ds.control_ids();
    w.weights.assign(ds.n_control(), 1.0);
    return w;
}

// Outcome depends on the covariates only, so the true effect is zero, while
// the treated group is shifted so unweighted comparisons are biased.
Dataset effect_free(std::mt19937_64& rng, std::size_t n) {
    std::normal_distribution<double> nd;
    std::bernoulli_distribution coin(0.5);
    std::vector<UnitRecord> recs(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto& r = recs[i];
        r.unit_id = "u" + std::to_string(i);
        r.treatment = coin(rng);
        const double x0 = nd(rng) + 0.5 * r.treatment, x1 = nd(rng);
        r.covariates = {x0, x1};
        r.outcomes = {1.0 + x0 - 0.5 * x1 + nd(rng)};
    }
    return Dataset::from_records(Schema{{"x0", "x1"}, {"y"}}, recs, 512);
}

}  // namespace

TEST_CASE("patt: equal means give 0") {
    bk_test::Matrix c(2, 1), t(2, 1), yc(2, 1), yt(2, 1);
    c << 0, 1;
    t << 0, 1;
    yc << 8, 12;
    yt << 9, 11;
    const Dataset ds = bk_test::make_dataset(c, t, 64, yc, yt);
    const auto e = patt(ds, uniform(ds), 0);
    CHECK(e.patt == 0.0);
    CHECK(e.pct_change == 0.0);
}

TEST_CASE("patt: means 12 against 10") {
    bk_test::Matrix c(2, 1), t(1, 1), yc(2, 1), yt(1, 1);
    c << 0, 1;
    t << 0.5;
    yc << 9, 11;
    yt << 12;
    const Dataset ds = bk_test::make_dataset(c, t, 64, yc, yt);
    const auto e = patt(ds, uniform(ds), 0);
    CHECK(e.treated_mean == 12.0);
    CHECK(e.control_mean == 10.0);
    CHECK(e.patt == 2.0);
    CHECK(e.pct_change == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("patt: matches the serial formula") {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> u(0.01, 1.0);
    for (int rep = 0; rep < 1000; ++rep) {
        const std::size_t n0 = 2 + rep % 40, n1 = 1 + rep % 15;
        bk_test::Matrix c(n0, 1), t(n1, 1), yc(n0, 1), yt(n1, 1);
        c.setZero();
        t.setZero();
        for (std::size_t i = 0; i < n0; ++i) yc(i, 0) = 10.0 + nd(rng);
        for (std::size_t i = 0; i < n1; ++i) yt(i, 0) = 11.0 + nd(rng);
        const Dataset ds = bk_test::make_dataset(c, t, 1 + rep % 5, yc, yt);
        WeightVector w;
        w.unit_ids = ds.control_ids();
        for (std::size_t i = 0; i < n0; ++i) w.weights.push_back(u(rng));
        double tm = 0.0, cm = 0.0, ws = 0.0;
        for (std::size_t i = 0; i < n1; ++i) tm += yt(i, 0);
        tm /= static_cast<double>(n1);
        for (std::size_t i = 0; i < n0; ++i) {
            cm += w.weights[i] * yc(i, 0);
            ws += w.weights[i];
        }
        cm /= ws;
        const auto e = patt(ds, w, 0);
        CHECK(e.patt == doctest::Approx(tm - cm).epsilon(1e-12));
        CHECK(e.pct_change == doctest::Approx((tm - cm) / cm).epsilon(1e-12));
    }
}

TEST_CASE("patt: a zero control mean leaves the percent change undefined") {
    bk_test::Matrix c(2, 1), t(1, 1), yc(2, 1), yt(1, 1);
    c << 0, 1;
    t << 0.5;
    yc << -1, 1;
    yt << 3;
    const Dataset ds = bk_test::make_dataset(c, t, 64, yc, yt);
    CHECK_FALSE(patt(ds, uniform(ds), 0).pct_change_defined);
}

TEST_CASE("bootstrap: effect-free data at N = 2000 covers 0 in at least 90 of 100 runs") {
    std::mt19937_64 rng(2000);
    MethodSpec m;
    m.method = Method::ms;
    BootstrapOptions opt;
    opt.replicates = 100;
    opt.shard_rows = 512;
    std::size_t covered = 0, contains_point = 0;
    for (std::uint64_t run = 0; run < 100; ++run) {
        const Dataset ds = effect_free(rng, 2000);
        opt.seed = run;
        const auto e = bootstrap_ci(ds, m, 0, opt);
        REQUIRE(e.ci_lower.has_value());
        covered += *e.ci_lower <= 0.0 && 0.0 <= *e.ci_upper;
        contains_point += *e.ci_lower <= e.patt && e.patt <= *e.ci_upper;
        CHECK(*e.ci_lower <= *e.ci_upper);
    }
    CHECK(covered >= 90);
    CHECK(contains_point == 100);
}

TEST_CASE("bootstrap: identical units give a zero-width interval") {
    std::vector<UnitRecord> recs;
    for (int i = 0; i < 40; ++i) recs.push_back({"u" + std::to_string(i), i % 2, {i % 4 < 2 ? 1.0 : 2.0}, {5.0}});
    const Dataset ds = Dataset::from_records(Schema{{"x"}, {"y"}}, recs, 16);
    MethodSpec m;
    m.method = Method::eb;
    BootstrapOptions opt;
    opt.replicates = 100;
    const auto e = bootstrap_ci(ds, m, 0, opt);
    CHECK(*e.ci_lower == *e.ci_upper);
    CHECK(e.patt == 0.0);
}

TEST_CASE("bootstrap: fewer than 100 replicates is an error") {
    std::mt19937_64 rng(3);
    const Dataset ds = effect_free(rng, 100);
    BootstrapOptions opt;
    opt.replicates = 2;
    CHECK_THROWS_AS(bootstrap_ci(ds, MethodSpec{}, 0, opt), ValidationError);
}

TEST_CASE("bootstrap: the same seed gives the same interval for any worker count") {
    std::mt19937_64 rng(4);
    const Dataset ds = effect_free(rng, 600);
    MethodSpec m;
    m.method = Method::eb;
    BootstrapOptions opt;
    opt.replicates = 100;
    opt.seed = 17;
    const auto a = bootstrap_ci(ds, m, 0, opt);
    opt.engine.worker_count = 4;
    const auto b = bootstrap_ci(ds, m, 0, opt);
    CHECK(*a.ci_lower == *b.ci_lower);
    CHECK(*a.ci_upper == *b.ci_upper);
}

TEST_CASE("meta metrics: estimates equal to the truth") {
    const std::vector<double> est{0.3, 0.3, 0.3, 0.3};
    const auto m = meta_metrics(est, 0.3);
    CHECK(m.amb == 0.0);
    CHECK(m.sd == 0.0);
}

TEST_CASE("meta metrics: estimates {-1, 1}") {
    const std::vector<double> est{-1.0, 1.0};
    const auto m = meta_metrics(est);
    CHECK(m.amb == 0.0);
    CHECK(m.sd == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
}

TEST_CASE("meta metrics: rmse^2 = amb^2 + sd^2") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd;
    for (int rep = 0; rep < 1000; ++rep) {
        std::vector<double> est(2 + rep % 50);
        for (double& v : est) v = nd(rng) * 0.1 + 0.02;
        const double truth = nd(rng) * 0.01;
        const auto m = meta_metrics(est, truth);
        CHECK(std::abs(m.rmse * m.rmse - (m.amb * m.amb + m.sd * m.sd)) <= 1e-12);
        // The population variant is the root mean square error itself.
        double mse = 0.0;
        for (double v : est) mse += (v - truth) * (v - truth);
        mse /= static_cast<double>(est.size());
        CHECK(std::abs(m.rmse_population * m.rmse_population - mse) <= 1e-12);
    }
    const std::vector<double> one{1.0};
    CHECK_THROWS_AS(meta_metrics(one), ValidationError);
}
