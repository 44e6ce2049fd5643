#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"

#include "balancekit/solvers.hpp"
#include "fixtures.hpp"

using namespace balancekit;

namespace {

SolverConfig tight(double tol = 1e-10) {
    SolverConfig c;
    c.tolerance = tol;
    c.max_iterations = 200000;
    return c;
}

}  // namespace

TEST_CASE("ms weights from dual: xi = 0 gives all ones") {
    std::mt19937_64 rng(2);
    auto in = bk_test::shifted_instance(rng, 9, 3, 2, 0.0, 4);
    const std::vector<double> xi(3, 0.0);
    const auto w = ms_weights_from_dual(in.ds, xi, MomentSpec::first_moments(2));
    for (double v : w.weights) CHECK(v == 1.0);
}

TEST_CASE("ms weights from dual: negative slack clips to exactly 0") {
    const Dataset ds = bk_test::column_dataset({1.3, 0.5}, {1.0});
    const std::vector<double> xi{0.0, 1.0};  // 1 - 1.3 = -0.3 for the first unit
    const auto w = ms_weights_from_dual(ds, xi, MomentSpec::first_moments(1));
    CHECK(w.weights[0] == 0.0);
    CHECK(w.weights[1] == 0.5);
}

TEST_CASE("ms weights from dual: equals a serial evaluation exactly") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    for (int rep = 0; rep < 1000; ++rep) {
        auto in = bk_test::shifted_instance(rng, 5 + rep % 50, 3, 3, 0.0, 1 + rep % 13);
        const std::vector<double> xi{u(rng), u(rng), u(rng), u(rng)};
        const auto w = ms_weights_from_dual(in.ds, xi, MomentSpec::first_moments(3));
        REQUIRE(w.size() == static_cast<std::size_t>(in.control.rows()));
        bool exact = true;
        for (Eigen::Index i = 0; i < in.control.rows(); ++i) {
            double v = 1.0 - xi[0];
            for (Eigen::Index j = 0; j < 3; ++j) v -= xi[j + 1] * in.control(i, j);
            exact = exact && w.weights[i] == std::max(0.0, v);
        }
        CHECK(exact);
    }
}

TEST_CASE("solve_ms: control {0, 2} against 1") {
    const Dataset ds = bk_test::column_dataset({0.0, 2.0}, {1.0});
    const auto r = solve_ms(ds, MomentSpec::first_moments(1), tight());
    REQUIRE(r.converged);
    CHECK(r.weights.weights[0] == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(r.weights.weights[1] == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("solve_ms: control {0, 1, 3} against 1") {
    const Dataset ds = bk_test::column_dataset({0.0, 1.0, 3.0}, {0.5, 1.5});
    const auto r = solve_ms(ds, MomentSpec::first_moments(1), tight());
    REQUIRE(r.converged);
    CHECK(r.weights.weights[0] == doctest::Approx(3.0 / 7.0).epsilon(1e-9));
    CHECK(r.weights.weights[1] == doctest::Approx(5.0 / 14.0).epsilon(1e-9));
    CHECK(r.weights.weights[2] == doctest::Approx(3.0 / 14.0).epsilon(1e-9));
    const auto ref = bk_test::min_norm_enumerate((bk_test::Matrix(3, 1) << 0, 1, 3).finished(),
                                                 (bk_test::Vector(1) << 1.0).finished());
    CHECK(bk_test::max_abs_diff(ref, r.weights.weights) <= 1e-9);
}

TEST_CASE("solve_ms: 200x5 instance matches the quadratic-program reference") {
    std::mt19937_64 rng(77);
    auto in = bk_test::feasible_instance(rng, 200, 60, 5, 2.0, 32);
    const auto r = solve_ms(in.ds, MomentSpec::first_moments(5), tight(1e-9));
    REQUIRE(r.converged);
    const auto ref = bk_test::min_norm_alternating(in.control, in.target, 20000);
    CHECK(bk_test::max_abs_diff(ref, r.weights.weights) <= 1e-5);
    // A sparse optimum: some controls get exactly zero weight.
    CHECK(std::count(r.weights.weights.begin(), r.weights.weights.end(), 0.0) > 0);
}

TEST_CASE("solve_ms: small instances match support enumeration") {
    std::mt19937_64 rng(5);
    for (int rep = 0; rep < 12; ++rep) {
        const std::size_t n0 = 5 + rep % 6, d = 1 + rep % 3;
        auto in = bk_test::feasible_instance(rng, n0, 4, d, 1.5, 3);
        const auto r = solve_ms(in.ds, MomentSpec::first_moments(d), tight(1e-10));
        REQUIRE(r.converged);
        const auto ref = bk_test::min_norm_enumerate(in.control, in.target);
        CHECK(bk_test::max_abs_diff(ref, r.weights.weights) <= 1e-7);
    }
}

TEST_CASE("solve_ms: both quadratic objectives rank feasible points identically") {
    std::mt19937_64 rng(19);
    auto in = bk_test::feasible_instance(rng, 40, 20, 3, 1.0, 8);
    const MomentSpec spec = MomentSpec::first_moments(3);
    const auto ms = solve_ms(in.ds, spec, tight(1e-10));
    const auto eb = solve_eb(in.ds, spec, tight(1e-10));
    REQUIRE(ms.converged);
    REQUIRE(eb.converged);
    const bk_test::Vector a = bk_test::to_vector(ms.weights.weights);
    const bk_test::Vector b = bk_test::to_vector(eb.weights.weights);
    const double n0 = static_cast<double>(a.size());
    auto centred = [](const bk_test::Vector& w) { return 0.5 * (w.array() - 1.0).square().sum(); };
    auto plain = [](const bk_test::Vector& w) { return 0.5 * w.squaredNorm(); };
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int k = 0; k < 1000; ++k) {
        // Convex combinations of two feasible points stay feasible.
        const double t = u(rng);
        const bk_test::Vector p = t * a + (1.0 - t) * b;
        CHECK(centred(p) - plain(p) == doctest::Approx(n0 / 2.0 - p.sum()).epsilon(1e-12));
        CHECK((centred(p) >= centred(a) - 1e-12) == (plain(p) >= plain(a) - 1e-12));
        CHECK(plain(p) >= plain(a) - 1e-12);
    }
}

TEST_CASE("solve_ms: reported multipliers regenerate the weights") {
    std::mt19937_64 rng(23);
    auto in = bk_test::feasible_instance(rng, 60, 20, 2, 1.0, 16);
    const MomentSpec spec = MomentSpec::first_moments(2);
    const auto r = solve_ms(in.ds, spec, tight());
    REQUIRE(r.converged);
    const auto raw = ms_weights_from_dual(in.ds, r.dual.xi, spec);
    const double s = raw.sum();
    for (std::size_t i = 0; i < raw.size(); ++i)
        CHECK(raw.weights[i] / s == doctest::Approx(r.weights.weights[i]).epsilon(1e-8));
}

TEST_CASE("solve_ms: converged runs satisfy the balance residual bound") {
    std::mt19937_64 rng(44);
    for (int rep = 0; rep < 10; ++rep) {
        auto in = bk_test::feasible_instance(rng, 100 + 20 * rep, 50, 4, 1.0, 32);
        SolverConfig cfg;
        cfg.max_iterations = 50000;
        const auto r = solve_ms(in.ds, MomentSpec::first_moments(4), cfg);
        REQUIRE(r.converged);
        const auto res = balance_residual(in.ds, r.weights, MomentSpec::first_moments(4));
        for (double v : res) CHECK(std::abs(v) <= cfg.tolerance);
        CHECK(std::abs(r.weights.sum() - 1.0) <= 1e-12);
        for (double v : r.weights.weights) CHECK(v >= 0.0);
    }
}

TEST_CASE("solve_ms: target outside the control hull is not reported converged") {
    const Dataset ds = bk_test::column_dataset({0.0, 1.0, 2.0}, {5.0, 6.0});
    const auto r = solve_ms(ds, MomentSpec::first_moments(1), SolverConfig{});
    CHECK_FALSE(r.converged);
    CHECK(r.stagnated);
    CHECK(r.iterations_used < SolverConfig{}.max_iterations);
}
