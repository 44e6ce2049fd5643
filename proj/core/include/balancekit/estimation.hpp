#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "balancekit/baselines.hpp"
#include "balancekit/data_model.hpp"
#include "balancekit/engine.hpp"
#include "balancekit/solvers.hpp"

namespace balancekit {

enum class Method { eb, ms, ipw, ipw_tuned };

std::string method_name(Method m);
Method parse_method(const std::string& name);

/// Everything needed to turn a dataset into control weights.
struct MethodSpec {
    Method method = Method::eb;
    /// Balancing constraints; empty means first moments of every covariate.
    MomentSpec moments;
    SolverConfig solver;
    Regularization regularization;   // ipw
    std::size_t folds = 0;           // ipw
    TuningGrid grid;                 // ipw_tuned
    LogisticOptions logistic;
};

struct WeightingResult {
    WeightVector weights;
    bool converged = true;
    std::optional<SolveResult> solve;
    std::optional<PropensityModel> propensity;
    std::vector<TuningPoint> tuning;
};

WeightingResult compute_weights(const Dataset& ds, const MethodSpec& spec);

struct EffectEstimate {
    std::string outcome;
    std::string method;
    double treated_mean = 0.0;
    double control_mean = 0.0;      // weighted
    double patt = 0.0;
    double pct_change = 0.0;
    bool pct_change_defined = true;
    double level = 0.0;
    std::optional<double> ci_lower;
    std::optional<double> ci_upper;
    std::optional<double> pct_ci_lower;
    std::optional<double> pct_ci_upper;
    std::size_t replicates = 0;
    std::size_t failed_replicates = 0;
    bool doubly_robust = false;
};

/// Treated mean minus weighted control mean for one outcome.
EffectEstimate patt(const Dataset& ds, const WeightVector& w, std::size_t outcome);

/// Same with the regression residual correction applied.
EffectEstimate patt_dr(const Dataset& ds, const WeightVector& w, std::size_t outcome,
                       const OutcomeModel& model);

struct BootstrapOptions {
    std::size_t replicates = 500;
    double level = 0.95;
    std::uint64_t seed = 0;
    /// Start each replicate's solver from the full-sample multipliers.
    bool warm_start = true;
    bool doubly_robust = false;
    std::size_t shard_rows = kDefaultShardRows;
    EngineConfig engine;
};

inline constexpr std::size_t kMinBootstrapReplicates = 100;

/// Stratified resampling (control and treated independently, with
/// replacement), weights re-solved per replicate, percentile intervals.
std::vector<EffectEstimate> bootstrap_ci(const Dataset& ds, const MethodSpec& method,
                                         std::span<const std::size_t> outcomes,
                                         const BootstrapOptions& options);
EffectEstimate bootstrap_ci(const Dataset& ds, const MethodSpec& method, std::size_t outcome,
                            const BootstrapOptions& options);

struct MetaMetrics {
    double amb = 0.0;
    double sd = 0.0;               // sample (n - 1) standard deviation
    double rmse = 0.0;             // sqrt(amb^2 + sd^2)
    double sd_population = 0.0;    // n denominator
    double rmse_population = 0.0;  // sqrt(amb^2 + sd_population^2) = root mean square error
    std::size_t replications = 0;
};

MetaMetrics meta_metrics(std::span<const double> estimates, double truth = 0.0);

}  // namespace balancekit
