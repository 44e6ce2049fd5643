#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "balancekit/data_model.hpp"
#include "balancekit/engine.hpp"
#include "balancekit/solvers.hpp"

namespace balancekit {

/// Elastic-net penalty in the usual "inverse strength" parameterisation:
/// C * sum(logloss) + (1 - l1_ratio) / 2 * |b|^2 + l1_ratio * |b|_1,
/// intercept unpenalised. C = +inf fits the plain likelihood.
struct Regularization {
    double C = std::numeric_limits<double>::infinity();
    double l1_ratio = 0.0;
};

struct LogisticOptions {
    std::size_t max_iterations = 200;    // outer Newton steps
    double tolerance = 1e-9;    // on the proximal-gradient mapping, standardized scale
    std::uint64_t fold_seed = 0;
    EngineConfig engine;
};

struct PropensityModel {
    /// Intercept followed by one coefficient per covariate, original scale.
    /// With cross-fitting this is the average of the fold models.
    std::vector<double> coefficients;
    Regularization regularization;
    std::size_t folds = 0;
    /// Clipped scores for control and treated units (dataset-wide order);
    /// out-of-fold when folds > 0.
    std::vector<double> control_scores;
    std::vector<double> treated_scores;
    std::size_t iterations = 0;
};

inline constexpr double kScoreClip = 1e-6;

/// folds: 0 fits and scores on all units; k >= 2 cross-fits.
PropensityModel fit_logistic(const Dataset& ds, const Regularization& reg, std::size_t folds,
                             const LogisticOptions& options = {});

/// Odds-of-treatment weights over control units, normalised to sum 1.
WeightVector ipw_weights(const Dataset& ds, const PropensityModel& model);

struct TuningGrid {
    std::vector<std::size_t> folds{0, 3, 5};
    std::vector<double> C{0.0001, 0.0003, 0.001, 0.003, 0.01, 0.03};
    std::vector<double> l1_ratio{0.0, 0.25, 0.5, 0.75, 1.0};
};

struct TuningPoint {
    std::size_t folds = 0;
    double C = 0.0;
    double l1_ratio = 0.0;
    double mean_smd = 0.0;
    bool failed = false;
    std::string error;
};

struct TuningResult {
    PropensityModel model;
    WeightVector weights;
    std::vector<TuningPoint> grid;
    std::size_t selected = 0;
};

/// Fits every grid point and keeps the one with the lowest mean first-moment
/// SMD; ties prefer larger C, then smaller l1_ratio, then fewer folds.
TuningResult tune_ipw(const Dataset& ds, const TuningGrid& grid = {}, const LogisticOptions& options = {});

/// Per-outcome least squares on control units.
struct OutcomeModel {
    std::vector<std::vector<double>> coefficients;  // [outcome][intercept, covariates...]
    std::vector<bool> ridge_applied;
};

OutcomeModel fit_outcome_model(const Dataset& ds, const EngineConfig& engine = {});

/// Regression-adjusted effect: treated mean residual minus weighted control
/// mean residual, residuals taken from a control-only linear fit.
double dr_correct(const Dataset& ds, const WeightVector& w, std::size_t outcome,
                  const OutcomeModel& model);
double dr_correct(const Dataset& ds, const WeightVector& w, std::size_t outcome);

}  // namespace balancekit
