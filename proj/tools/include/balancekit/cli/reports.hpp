#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

#include "balancekit/data_model.hpp"
#include "balancekit/diagnostics.hpp"
#include "balancekit/estimation.hpp"
#include "balancekit/simulation.hpp"
#include "balancekit/solvers.hpp"

namespace balancekit::cli {

using Json = nlohmann::ordered_json;

/// Bumped whenever a report field changes meaning or disappears.
inline constexpr int kReportSchemaVersion = 1;

enum ExitCode : int { kExitOk = 0, kExitError = 1, kExitBalance = 2, kExitNonConvergence = 3 };

/// Where a dataset comes from: a directory written by `ingest`, or a CSV
/// file read with the given roles. Empty covariates take every column not
/// otherwise assigned.
struct DataSource {
    std::filesystem::path path;
    SchemaConfig roles{"unit_id", "treatment", {}, {}, ','};
    std::size_t shard_rows = kDefaultShardRows;
};

/// Fills in default covariates from the CSV header.
SchemaConfig resolve_roles(const DataSource& src);
Dataset load_dataset(const DataSource& src);

void write_weights_csv(const WeightVector& w, std::ostream& out);
void write_weights_csv(const WeightVector& w, const std::filesystem::path& path);
/// Reads `unit_id,weight` rows and aligns them to the dataset's control order.
WeightVector read_weights_csv(const std::filesystem::path& path, const Dataset& ds);

/// Machine-readable code for an exception ("ingest_error", ...).
std::string error_code(const std::exception& e);

Json report_header(const std::string& type);
Json error_report(const std::string& type, const std::exception& e);

Json to_json(const SolveResult& r, bool include_trace = true);
Json to_json(const BalanceReport& r);
Json to_json(const StabilityReport& r);
Json to_json(const EffectEstimate& e);
Json to_json(const TuningPoint& p);
Json to_json(const MetaMetrics& m);
Json to_json(const BenchmarkResult& r, bool include_timings = false);

/// One Figure-style summary row: metric, group values, % change, CI.
Json summary_row(const EffectEstimate& e);

/// Finite doubles as numbers, non-finite as null.
Json number(double v);

void write_json(const Json& j, const std::filesystem::path& path);
std::string dump(const Json& j);

/// Per-replication rows of a benchmark as CSV.
void write_benchmark_csv(const BenchmarkResult& r, std::ostream& out);

}  // namespace balancekit::cli
