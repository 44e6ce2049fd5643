#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "balancekit/data_model.hpp"
#include "balancekit/engine.hpp"

namespace balancekit {

struct SolverConfig {
    double alpha = 0.01;
    double momentum_beta = 0.9;     // entropy balancing only
    std::size_t max_iterations = 5000;
    double tolerance = 1e-4;
    double decay_factor = 0.5;
    bool decay_enabled = true;
    std::uint64_t seed = 0;
    bool random_init = true;        // entropy balancing: false starts from xi = 0
    bool standardize = true;
    std::size_t stagnation_window = 200;
    double stagnation_min_improvement = 1e-12;
    double divergence_factor = 1e6;
    /// Starting multipliers in the solver's internal coordinates
    /// (SolveResult::internal_xi of an earlier run on similar data).
    std::optional<std::vector<double>> initial_dual;
    EngineConfig engine;

    void validate() const;
};

struct DualState {
    std::vector<double> xi;
    std::vector<double> velocity;
    double beta_seq = 1.0;
    std::size_t iteration = 0;
};

/// Control-unit weights in dataset-wide control order.
struct WeightVector {
    std::vector<std::string> unit_ids;
    std::vector<double> weights;

    std::size_t size() const noexcept { return weights.size(); }
    double sum() const;
};

struct SolveResult {
    WeightVector weights;
    /// Multipliers mapped back to the original moment coordinates, so that
    /// the *_weights_from_dual functions reproduce `weights` (before any
    /// final renormalisation).
    DualState dual;
    /// Multipliers in the solver's own (standardised, reduced) coordinates.
    std::vector<double> internal_xi;
    std::vector<double> residual_trace;
    bool converged = false;
    bool stagnated = false;
    std::size_t iterations_used = 0;
    double final_residual = 0.0;
    double final_alpha = 0.0;
    std::size_t decay_events = 0;
    /// Weighted control moment minus treated moment, original coordinates.
    std::vector<double> moment_residuals;
    std::vector<std::string> moment_names;
    std::vector<std::string> dropped_moments;
    std::vector<std::string> infeasible_moments;
    /// Names of the worst-balanced moments when the run did not converge.
    std::vector<std::string> worst_moments;
};

WeightVector eb_weights_from_dual(const Dataset& ds, std::span<const double> xi,
                                  const MomentSpec& spec, const EngineConfig& engine = {});

/// Gradient of log sum_{control} exp(-xi.c) + xi.target.
std::vector<double> eb_dual_gradient(const Dataset& ds, std::span<const double> xi,
                                     const MomentSpec& spec, const TargetMoments& target,
                                     const EngineConfig& engine = {});

double eb_dual_objective(const Dataset& ds, std::span<const double> xi, const MomentSpec& spec,
                         const TargetMoments& target, const EngineConfig& engine = {});

/// w_i = max(0, 1 - xi.(1, c(X_i))); no normalisation.
WeightVector ms_weights_from_dual(const Dataset& ds, std::span<const double> xi,
                                  const MomentSpec& spec, const EngineConfig& engine = {});

SolveResult solve_eb(const Dataset& ds, const MomentSpec& spec, const SolverConfig& cfg);
SolveResult solve_ms(const Dataset& ds, const MomentSpec& spec, const SolverConfig& cfg);

/// If the residual rose on at least 3 of the last 4 steps, scales alpha by
/// the decay factor, zeroes the velocity and returns true.
bool detect_oscillation_and_decay(DualState& state, std::span<const double> trace,
                                  SolverConfig& cfg);

/// sum_control w_i c(X_i) - mean_treated c(X_i), one entry per moment.
std::vector<double> balance_residual(const Dataset& ds, const WeightVector& w,
                                     const MomentSpec& spec, const EngineConfig& engine = {});

}  // namespace balancekit
