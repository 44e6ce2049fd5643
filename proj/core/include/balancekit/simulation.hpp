#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "balancekit/data_model.hpp"
#include "balancekit/diagnostics.hpp"
#include "balancekit/engine.hpp"
#include "balancekit/estimation.hpp"

namespace balancekit {

enum class DgpKind { linear, linear_interactions, random_forest };

std::string dgp_name(DgpKind k);
DgpKind parse_dgp(const std::string& name);

struct SimulationSpec {
    std::size_t n_units = 20000;       // even; first half trains the models
    std::size_t d_continuous = 16;
    std::size_t d_binary = 4;
    DgpKind dgp = DgpKind::linear;
    std::uint64_t seed = 0;
    std::size_t interaction_anchor = 0;  // index among the binary covariates
    /// Forces every continuous column's zero probability (testing aid).
    std::optional<double> zero_inflation;

    std::size_t dimension() const { return d_continuous + d_binary; }
    void validate() const;
};

/// Column-level parameters drawn once from the seed.
struct PopulationParams {
    std::vector<double> zero_prob;      // per continuous column
    std::vector<double> nb_mean;
    std::vector<double> nb_dispersion;
    std::vector<std::size_t> binary_parent_a, binary_parent_b;
    std::vector<double> binary_intercept, binary_slope_a, binary_slope_b;
    // Coefficients of the reference mechanism producing raw outcomes and
    // treatment for the training half.
    std::vector<std::vector<double>> outcome_coef;  // [outcome][covariate]
    std::vector<double> treatment_coef;
};

/// Row-major covariates plus the raw outcomes and treatment produced by the
/// reference mechanism.
struct BasePopulation {
    std::vector<std::string> covariate_names;
    std::vector<std::string> outcome_names;
    std::size_t d_continuous = 0;
    std::size_t rows = 0;
    std::vector<double> x;           // rows * d
    std::vector<double> y;           // rows * m
    std::vector<int> treatment;
    PopulationParams params;

    std::size_t dimension() const { return covariate_names.size(); }
    std::size_t outcome_count() const { return outcome_names.size(); }
    double at(std::size_t i, std::size_t j) const { return x[i * dimension() + j]; }
    BasePopulation slice(std::size_t begin, std::size_t end) const;
};

PopulationParams make_population_params(const SimulationSpec& spec);
BasePopulation draw_units(const SimulationSpec& spec, const PopulationParams& params, std::size_t n,
                          std::mt19937_64& rng);
BasePopulation generate_base_population(const SimulationSpec& spec);

// ---------------------------------------------------------------------------
// Regression / classification trees and forests.

struct ForestOptions {
    std::size_t trees = 10;
    std::size_t max_depth = 10;
    std::size_t min_samples_split = 2;
    bool bootstrap = true;
    /// Features tried per split; 0 means ceil(sqrt(d)).
    std::size_t max_features = 0;
    std::uint64_t seed = 0;
};

struct TreeNode {
    int feature = -1;        // -1 marks a leaf
    double threshold = 0.0;  // go left when x <= threshold
    int left = -1, right = -1;
    double value = 0.0;      // leaf mean (regression) or class-1 fraction
};

struct Tree {
    std::vector<TreeNode> nodes;
    double predict(const double* row) const;
};

struct Forest {
    std::vector<Tree> trees;
    double predict(const double* row) const;
};

/// Variance-reduction splits for regression; Gini splits on a 0/1 target for
/// classification (leaf value = class-1 fraction).
Forest fit_forest(const std::vector<double>& x, std::size_t rows, std::size_t d, const std::vector<double>& y,
                  bool classification, const ForestOptions& options);

// ---------------------------------------------------------------------------

struct DgpModels {
    DgpKind kind = DgpKind::linear;
    std::size_t dimension = 0;
    std::size_t anchor_column = 0;                   // covariate index of the anchor
    std::vector<std::vector<double>> outcome_coef;   // linear kinds, intercept first
    std::vector<double> treatment_coef;
    std::vector<Forest> outcome_forests;
    Forest treatment_forest;
    std::vector<std::string> outcome_names;
    std::vector<std::string> covariate_names;
    std::vector<double> residuals;                   // training rows * m
    std::size_t residual_rows = 0;

    std::size_t feature_count() const;
    std::vector<double> features(const double* row) const;  // linear kinds
    double predict_outcome(std::size_t j, const double* row) const;
    double predict_propensity(const double* row) const;
};

DgpModels fit_dgp_models(const BasePopulation& train, const SimulationSpec& spec);

inline constexpr double kPropensityFloor = 0.02;
inline constexpr std::size_t kSynthesisAttempts = 5;

Dataset synthesize(const BasePopulation& test, const DgpModels& models, std::mt19937_64& rng,
                   std::size_t shard_rows = kDefaultShardRows);

// ---------------------------------------------------------------------------

struct BenchmarkOptions {
    std::size_t replications = 20;
    /// Methods: eb, ms, ipw, ipw-tuned, each optionally suffixed "-dr".
    std::vector<std::string> methods{"eb", "ms", "ipw", "ipw-dr"};
    SolverConfig solver;
    TuningGrid grid;
    bool diagnostics = true;
    /// Test-half size; defaults to n_units / 2.
    std::optional<std::size_t> test_units;
    std::size_t shard_rows = kDefaultShardRows;
    EngineConfig engine;
};

struct MethodSummary {
    std::string method;
    std::vector<MetaMetrics> per_outcome;
    std::vector<std::vector<double>> estimates;   // [outcome][replication]
    BalanceReport::Summary balance;               // averaged over replications
    StabilityReport stability;                    // averaged over replications
    std::size_t failures = 0;
    std::size_t nonconverged = 0;
    double median_amb = 0.0;
    double mean_seconds = 0.0;
};

struct ReplicationRow {
    std::size_t replication = 0;
    std::string method;
    std::string outcome;
    double pct_change = 0.0;
    double patt = 0.0;
    double mean_smd = 0.0;
    double ess_ratio = 0.0;
    bool converged = true;
    bool failed = false;
};

struct BenchmarkResult {
    SimulationSpec spec;
    std::size_t test_units = 0;
    std::vector<std::string> outcome_names;
    std::vector<MethodSummary> methods;
    std::vector<ReplicationRow> rows;
};

/// Population parameters plus models fitted on the training half drawn from
/// the spec's seed.
struct FittedDgp {
    PopulationParams params;
    DgpModels models;
};
FittedDgp fit_reference(const SimulationSpec& spec);

/// The evaluation dataset of one replication: a fresh test half from the
/// replication's own seed stream pushed through the fitted models.
Dataset replication_dataset(const SimulationSpec& spec, const FittedDgp& fit, std::size_t replication,
                            std::size_t test_units, std::size_t shard_rows = kDefaultShardRows);

BenchmarkResult run_benchmark(const SimulationSpec& spec, const BenchmarkOptions& options);
/// Reuses already fitted models (e.g. to compare test sizes on one fit).
BenchmarkResult run_benchmark(const SimulationSpec& spec, const DgpModels& models,
                              const PopulationParams& params, const BenchmarkOptions& options);

}  // namespace balancekit
