#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "balancekit/baselines.hpp"
#include "balancekit/diagnostics.hpp"
#include "balancekit/estimation.hpp"
#include "balancekit/solvers.hpp"

namespace balancekit::cli {

/// Flat `key = value` analysis configuration. `#` starts a comment; list
/// values are comma separated.
struct AnalysisConfig {
    std::filesystem::path data;
    char delimiter = ',';
    std::string id_column = "unit_id";
    std::string treatment_column = "treatment";
    std::vector<std::string> covariates;           // empty: every unassigned column
    std::vector<std::string> outcomes;             // post-treatment metrics
    std::vector<std::string> validation_outcomes;  // pre-treatment hold-out metrics
    Method method = Method::ms;
    std::string moments = "first";                 // first | first+second
    SolverConfig solver;
    Regularization regularization;                 // ipw
    std::size_t folds = 0;                         // ipw
    Thresholds thresholds;
    std::size_t bootstrap = 500;
    double level = 0.95;
    std::uint64_t seed = 0;
    bool doubly_robust = false;
    std::size_t shard_rows = kDefaultShardRows;
    std::filesystem::path report = "report.json";
    std::filesystem::path timeseries;              // empty: report path with .csv

    std::filesystem::path timeseries_path() const;
    bool operator==(const AnalysisConfig& other) const;
};

/// Throws ValidationError with the offending line number on syntax errors,
/// unknown or repeated keys and role conflicts.
AnalysisConfig parse_config(std::istream& in);
AnalysisConfig parse_config(const std::filesystem::path& path);

/// Every effective setting, in a form parse_config reads back identically.
std::string emit_config(const AnalysisConfig& cfg);

/// Role conflicts: a column in two roles, duplicates within a role,
/// validation outcomes overlapping post-treatment outcomes.
void validate_roles(const AnalysisConfig& cfg);

}  // namespace balancekit::cli
