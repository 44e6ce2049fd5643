#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "balancekit/data_model.hpp"
#include "balancekit/engine.hpp"
#include "balancekit/solvers.hpp"

namespace balancekit {

struct Thresholds {
    double smd = 0.1;
    double variance_ratio = 0.5;   // on |1 - VR|
    double overlap = 0.1;          // on 1 - OVL; chosen by convention, no standard value exists
    double ks = 0.1;
    double mahalanobis = 1.0;
};

/// One standardized-mean-difference family (first moments, squares or
/// pairwise products). `infinite` marks entries whose pooled variance is
/// zero while the means differ; their value is +inf.
struct SmdFamily {
    std::vector<std::string> names;
    std::vector<double> values;
    std::vector<bool> infinite;
};

struct BalanceReport {
    std::vector<std::string> covariates;
    SmdFamily smd;
    SmdFamily smd_squares;
    SmdFamily smd_interactions;   // empty unless computed
    std::vector<double> variance_ratio;      // |1 - VR| per covariate
    std::vector<bool> variance_ratio_flagged; // treated variance zero
    std::vector<double> overlap;             // 1 - OVL per covariate
    std::vector<double> ks;
    std::optional<double> mahalanobis;       // unset when d > N
    std::string mahalanobis_error;

    struct Summary {
        double smd = 0.0;
        double smd_squares = 0.0;
        std::optional<double> smd_interactions;
        double variance_ratio = 0.0;
        double overlap = 0.0;
        double ks = 0.0;
        std::optional<double> mahalanobis;
    } summary;

    Thresholds thresholds;
    /// Summary families above threshold, e.g. "smd", "ks".
    std::vector<std::string> failing_metrics;
    /// Covariates whose own first-moment SMD is above threshold.
    std::vector<std::string> failing_covariates;

    bool passed() const { return failing_metrics.empty() && failing_covariates.empty(); }
};

struct StabilityReport {
    double sd_normalized = 0.0;
    double max_weight = 0.0;
    double p99_weight = 0.0;
    double ess = 0.0;
    double ess_ratio = 0.0;
};

enum class SmdKind { covariate, square, interaction };

struct DiagnosticsOptions {
    Thresholds thresholds;
    /// Pairwise-product SMDs: computed when d <= 100 unless forced either way.
    std::optional<bool> interactions;
    std::optional<std::size_t> overlap_bins;  // overrides the bin rule
    EngineConfig engine;
};

/// Variance of x under normalised weights w: sum w (x - xbar_w)^2 / (1 - sum w^2).
double weighted_variance(std::span<const double> x, std::span<const double> w);

/// First-moment SMD per covariate, or SMD of squares (binary columns
/// skipped) or of pairwise products.
SmdFamily smd(const Dataset& ds, const WeightVector& w, SmdKind kind, const EngineConfig& engine = {});

/// Mean first-moment SMD; the selection criterion for propensity tuning.
double mean_smd(const Dataset& ds, const WeightVector& w, const EngineConfig& engine = {});

struct VarianceRatio {
    double value = 0.0;   // |1 - VR|
    bool flagged = false; // treated variance zero
};
VarianceRatio variance_ratio(const Dataset& ds, const WeightVector& w, std::size_t covariate);

/// 1 - OVL on a shared histogram grid.
double overlap_coefficient(const Dataset& ds, const WeightVector& w, std::size_t covariate,
                           std::optional<std::size_t> bins = std::nullopt);

double ks_distance(const Dataset& ds, const WeightVector& w, std::size_t covariate);

/// Throws ValidationError when d > N.
double mahalanobis_balance(const Dataset& ds, const WeightVector& w, const EngineConfig& engine = {});

StabilityReport stability(const WeightVector& w);

/// Linear-interpolation quantile of a sample.
double quantile(std::vector<double> values, double q);

BalanceReport balance_report(const Dataset& ds, const WeightVector& w,
                             const DiagnosticsOptions& options = {});

/// Treated (or control) values of one covariate in dataset-wide order.
std::vector<double> gather_covariate(const Dataset& ds, std::size_t covariate, bool treated);
std::vector<double> gather_outcome(const Dataset& ds, std::size_t outcome, bool treated);

}  // namespace balancekit
