#include <cmath>
#include <random>

#include "doctest.h"

#include "balancekit/solvers.hpp"
#include "fixtures.hpp"

using namespace balancekit;

TEST_CASE("oscillation: a monotone trace is left alone") {
    SolverConfig cfg;
    DualState st;
    st.velocity = {0.3, -0.2};
    const std::vector<double> trace{5, 4, 3, 2, 1};
    CHECK_FALSE(detect_oscillation_and_decay(st, trace, cfg));
    CHECK(cfg.alpha == 0.01);
    CHECK(st.velocity == std::vector<double>{0.3, -0.2});
}

TEST_CASE("oscillation: trace {1,2,1,2,3} halves alpha and zeroes velocity") {
    SolverConfig cfg;
    DualState st;
    st.velocity = {0.3, -0.2};
    const std::vector<double> trace{1, 2, 1, 2, 3};
    CHECK(detect_oscillation_and_decay(st, trace, cfg));
    CHECK(cfg.alpha == 0.005);
    CHECK(st.velocity == std::vector<double>{0.0, 0.0});
}

TEST_CASE("oscillation: two rises in four steps are not enough") {
    SolverConfig cfg;
    DualState st;
    const std::vector<double> trace{3, 4, 3, 4, 3};
    CHECK_FALSE(detect_oscillation_and_decay(st, trace, cfg));
    CHECK(cfg.alpha == 0.01);
}

TEST_CASE("oscillation: decay rescues a step size that oscillates when fixed") {
    // Nearly collinear covariates make the dual badly conditioned; alpha = 2
    // is far beyond the stable step for the stiff direction.
    std::mt19937_64 rng(6);
    std::normal_distribution<double> nd;
    bk_test::Matrix c(150, 2), t(50, 2);
    for (Eigen::Index i = 0; i < 150; ++i) {
        c(i, 0) = nd(rng);
        c(i, 1) = c(i, 0) + 0.05 * nd(rng);
    }
    for (Eigen::Index i = 0; i < 50; ++i) {
        t(i, 0) = 0.3 + 0.8 * nd(rng);
        t(i, 1) = t(i, 0) + 0.05 * nd(rng);
    }
    const Dataset ds = bk_test::make_dataset(c, t, 32);
    const MomentSpec spec = MomentSpec::first_moments(2);
    SolverConfig cfg;
    cfg.alpha = 2.0;
    cfg.max_iterations = 3000;
    cfg.tolerance = 1e-6;

    cfg.decay_enabled = false;
    const auto fixed = solve_eb(ds, spec, cfg);
    CHECK_FALSE(fixed.converged);
    CHECK(fixed.iterations_used == cfg.max_iterations);

    cfg.decay_enabled = true;
    const auto decayed = solve_eb(ds, spec, cfg);
    CHECK(decayed.converged);
    CHECK(decayed.decay_events > 0);
    CHECK(decayed.final_alpha < cfg.alpha);
}
