#include "balancekit/cli/reports.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "balancekit/errors.hpp"

namespace balancekit::cli {

namespace {

std::vector<std::string> csv_header(const std::filesystem::path& path, char delim) {
    std::ifstream in(path);
    if (!in) throw IngestError("cannot open data file '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw IngestError("data file '" + path.string() + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, delim)) {
        const auto b = f.find_first_not_of(" \t");
        const auto e = f.find_last_not_of(" \t");
        out.push_back(b == std::string::npos ? std::string() : f.substr(b, e - b + 1));
    }
    return out;
}

Json optional_number(const std::optional<double>& v) { return v ? number(*v) : Json(nullptr); }

Json family(const SmdFamily& f) {
    Json j = Json::object();
    j["names"] = f.names;
    Json values = Json::array();
    for (double v : f.values) values.push_back(number(v));
    j["values"] = values;
    std::vector<std::string> inf;
    for (std::size_t i = 0; i < f.names.size(); ++i)
        if (f.infinite[i]) inf.push_back(f.names[i]);
    j["infinite"] = inf;
    return j;
}

}  // namespace

SchemaConfig resolve_roles(const DataSource& src) {
    SchemaConfig roles = src.roles;
    if (!roles.covariate_columns.empty()) return roles;
    std::set<std::string> taken{roles.id_column, roles.treatment_column};
    taken.insert(roles.outcome_columns.begin(), roles.outcome_columns.end());
    for (const auto& col : csv_header(src.path, roles.delimiter))
        if (!taken.count(col)) roles.covariate_columns.push_back(col);
    if (roles.covariate_columns.empty())
        throw ValidationError("no covariate columns left in '" + src.path.string() + "'");
    return roles;
}

Dataset load_dataset(const DataSource& src) {
    if (std::filesystem::is_directory(src.path)) return read_dataset(src.path);
    if (!std::filesystem::exists(src.path)) throw IngestError("data path '" + src.path.string() + "' does not exist");
    return ingest_csv(src.path, resolve_roles(src), src.shard_rows);
}

void write_weights_csv(const WeightVector& w, std::ostream& out) {
    out << "unit_id,weight\n";
    for (std::size_t i = 0; i < w.size(); ++i) out << w.unit_ids[i] << ',' << format_double(w.weights[i]) << '\n';
}

void write_weights_csv(const WeightVector& w, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IngestError("cannot write weights file '" + path.string() + "'");
    write_weights_csv(w, out);
}

WeightVector read_weights_csv(const std::filesystem::path& path, const Dataset& ds) {
    std::ifstream in(path);
    if (!in) throw IngestError("cannot open weights file '" + path.string() + "'");
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line)) throw IngestError("weights file '" + path.string() + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "unit_id,weight") throw IngestError("weights file header must be 'unit_id,weight'");
    std::map<std::string, double> by_id;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.rfind(',');
        if (comma == std::string::npos) throw IngestError("weights row " + std::to_string(lineno) + ": missing comma");
        const std::string id = line.substr(0, comma);
        double v = 0.0;
        try {
            std::size_t used = 0;
            v = std::stod(line.substr(comma + 1), &used);
            if (used != line.size() - comma - 1) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw IngestError("weights row " + std::to_string(lineno) + ": bad weight '" + line.substr(comma + 1) + "'");
        }
        if (!(v >= 0.0) || !std::isfinite(v))
            throw IngestError("weights row " + std::to_string(lineno) + ": weight must be finite and non-negative");
        if (!by_id.emplace(id, v).second)
            throw IngestError("weights row " + std::to_string(lineno) + ": duplicate unit id '" + id + "'");
    }
    WeightVector w;
    w.unit_ids = ds.control_ids();
    w.weights.reserve(w.unit_ids.size());
    for (const auto& id : w.unit_ids) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw ValidationError("weights file has no weight for control unit '" + id + "'");
        w.weights.push_back(it->second);
        by_id.erase(it);
    }
    if (!by_id.empty())
        throw ValidationError("weights file names unit '" + by_id.begin()->first + "' which is not a control unit");
    return w;
}

std::string error_code(const std::exception& e) {
    if (dynamic_cast<const IngestError*>(&e)) return "ingest_error";
    if (dynamic_cast<const ReductionError*>(&e)) return "reduction_error";
    if (dynamic_cast<const SolverError*>(&e)) return "solver_error";
    if (dynamic_cast<const ValidationError*>(&e)) return "validation_error";
    return "internal_error";
}

Json number(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

Json report_header(const std::string& type) {
    Json j = Json::object();
    j["schema_version"] = kReportSchemaVersion;
    j["report_type"] = type;
    return j;
}

Json error_report(const std::string& type, const std::exception& e) {
    Json j = report_header(type);
    j["status"] = "error";
    j["error"] = {{"code", error_code(e)}, {"message", e.what()}};
    return j;
}

Json to_json(const SolveResult& r, bool include_trace) {
    Json j = Json::object();
    j["converged"] = r.converged;
    j["stagnated"] = r.stagnated;
    j["iterations"] = r.iterations_used;
    j["final_residual"] = number(r.final_residual);
    j["final_alpha"] = number(r.final_alpha);
    j["decay_events"] = r.decay_events;
    j["moment_names"] = r.moment_names;
    Json res = Json::array();
    for (double v : r.moment_residuals) res.push_back(number(v));
    j["moment_residuals"] = res;
    j["dropped_moments"] = r.dropped_moments;
    j["infeasible_moments"] = r.infeasible_moments;
    j["worst_moments"] = r.worst_moments;
    Json dual = Json::array();
    for (double v : r.dual.xi) dual.push_back(number(v));
    j["dual"] = dual;
    if (include_trace) {
        Json t = Json::array();
        for (double v : r.residual_trace) t.push_back(number(v));
        j["residual_trace"] = t;
    }
    return j;
}

Json to_json(const BalanceReport& r) {
    Json j = Json::object();
    j["passed"] = r.passed();
    j["failing_metrics"] = r.failing_metrics;
    j["failing_covariates"] = r.failing_covariates;
    j["thresholds"] = {{"smd", r.thresholds.smd},
                       {"variance_ratio", r.thresholds.variance_ratio},
                       {"overlap", r.thresholds.overlap},
                       {"ks", r.thresholds.ks},
                       {"mahalanobis", r.thresholds.mahalanobis}};
    const auto& s = r.summary;
    j["summary"] = {{"smd", number(s.smd)},
                    {"smd_squares", number(s.smd_squares)},
                    {"smd_interactions", optional_number(s.smd_interactions)},
                    {"variance_ratio", number(s.variance_ratio)},
                    {"overlap", number(s.overlap)},
                    {"ks", number(s.ks)},
                    {"mahalanobis", optional_number(s.mahalanobis)}};
    Json cov = Json::array();
    for (std::size_t i = 0; i < r.covariates.size(); ++i) {
        cov.push_back({{"name", r.covariates[i]},
                       {"smd", number(r.smd.values[i])},
                       {"variance_ratio", number(r.variance_ratio[i])},
                       {"variance_ratio_flagged", static_cast<bool>(r.variance_ratio_flagged[i])},
                       {"overlap", number(r.overlap[i])},
                       {"ks", number(r.ks[i])}});
    }
    j["covariates"] = cov;
    j["smd"] = family(r.smd);
    j["smd_squares"] = family(r.smd_squares);
    j["smd_interactions"] = family(r.smd_interactions);
    if (!r.mahalanobis_error.empty()) j["mahalanobis_error"] = r.mahalanobis_error;
    return j;
}

Json to_json(const StabilityReport& r) {
    return {{"sd_normalized", number(r.sd_normalized)}, {"max_weight", number(r.max_weight)},
            {"p99_weight", number(r.p99_weight)},       {"ess", number(r.ess)},
            {"ess_ratio", number(r.ess_ratio)}};
}

Json to_json(const EffectEstimate& e) {
    Json j = Json::object();
    j["outcome"] = e.outcome;
    j["method"] = e.method;
    j["treated_mean"] = number(e.treated_mean);
    j["control_mean"] = number(e.control_mean);
    j["patt"] = number(e.patt);
    j["pct_change"] = e.pct_change_defined ? number(e.pct_change) : Json(nullptr);
    j["doubly_robust"] = e.doubly_robust;
    if (e.ci_lower) {
        j["level"] = e.level;
        j["ci_lower"] = number(*e.ci_lower);
        j["ci_upper"] = number(*e.ci_upper);
        j["pct_ci_lower"] = number(*e.pct_ci_lower);
        j["pct_ci_upper"] = number(*e.pct_ci_upper);
        j["replicates"] = e.replicates;
        j["failed_replicates"] = e.failed_replicates;
    }
    return j;
}

Json summary_row(const EffectEstimate& e) {
    Json j = Json::object();
    j["metric"] = e.outcome;
    j["treated_value"] = number(e.treated_mean);
    j["synthetic_control_value"] = number(e.control_mean);
    j["difference"] = number(e.patt);
    j["pct_change"] = e.pct_change_defined ? number(e.pct_change) : Json(nullptr);
    j["ci_lower"] = optional_number(e.pct_ci_lower);
    j["ci_upper"] = optional_number(e.pct_ci_upper);
    return j;
}

Json to_json(const TuningPoint& p) {
    Json j = {{"folds", p.folds}, {"C", number(p.C)}, {"l1_ratio", p.l1_ratio},
              {"mean_smd", p.failed ? Json(nullptr) : number(p.mean_smd)}, {"failed", p.failed}};
    if (p.failed) j["error"] = p.error;
    return j;
}

Json to_json(const MetaMetrics& m) {
    return {{"amb", number(m.amb)},
            {"sd", number(m.sd)},
            {"rmse", number(m.rmse)},
            {"sd_population", number(m.sd_population)},
            {"rmse_population", number(m.rmse_population)},
            {"replications", m.replications}};
}

Json to_json(const BenchmarkResult& r, bool include_timings) {
    Json j = Json::object();
    j["dgp"] = dgp_name(r.spec.dgp);
    j["n_units"] = r.spec.n_units;
    j["test_units"] = r.test_units;
    j["d_continuous"] = r.spec.d_continuous;
    j["d_binary"] = r.spec.d_binary;
    j["seed"] = r.spec.seed;
    j["outcomes"] = r.outcome_names;
    Json methods = Json::array();
    for (const auto& m : r.methods) {
        Json mj = Json::object();
        mj["method"] = m.method;
        mj["median_amb"] = number(m.median_amb);
        Json per = Json::object();
        for (std::size_t k = 0; k < m.per_outcome.size(); ++k) per[r.outcome_names[k]] = to_json(m.per_outcome[k]);
        mj["outcomes"] = per;
        const auto& b = m.balance;
        mj["balance"] = {{"smd", number(b.smd)},
                         {"smd_squares", number(b.smd_squares)},
                         {"smd_interactions", optional_number(b.smd_interactions)},
                         {"variance_ratio", number(b.variance_ratio)},
                         {"overlap", number(b.overlap)},
                         {"ks", number(b.ks)},
                         {"mahalanobis", optional_number(b.mahalanobis)}};
        mj["stability"] = to_json(m.stability);
        mj["failures"] = m.failures;
        mj["nonconverged"] = m.nonconverged;
        if (include_timings) mj["mean_seconds"] = m.mean_seconds;
        methods.push_back(mj);
    }
    j["methods"] = methods;
    return j;
}

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

void write_json(const Json& j, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IngestError("cannot write report '" + path.string() + "'");
    out << dump(j);
}

void write_benchmark_csv(const BenchmarkResult& r, std::ostream& out) {
    out << "replication,method,outcome,pct_change,patt,mean_smd,ess_ratio,converged,failed\n";
    for (const auto& row : r.rows) {
        out << row.replication << ',' << row.method << ',' << row.outcome << ',';
        if (row.failed) out << ",,,,";
        else
            out << format_double(row.pct_change) << ',' << format_double(row.patt) << ','
                << format_double(row.mean_smd) << ',' << format_double(row.ess_ratio) << ',';
        if (row.failed) out << "false,true\n";
        else out << (row.converged ? "true" : "false") << ",false\n";
    }
}

}  // namespace balancekit::cli
