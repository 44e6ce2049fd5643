#include "balancekit/cli/config.hpp"

#include <charconv>
#include <cmath>
#include <limits>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "balancekit/errors.hpp"

namespace balancekit::cli {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    if (trim(v).empty()) return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) throw ValidationError("empty entry in list '" + v + "'");
        out.push_back(item);
    }
    return out;
}

std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
    return out;
}

double parse_double(const std::string& v) {
    if (v == "inf") return std::numeric_limits<double>::infinity();
    double out = 0.0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ValidationError("expected a number, got '" + v + "'");
    return out;
}

std::uint64_t parse_uint(const std::string& v) {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw ValidationError("expected a non-negative integer, got '" + v + "'");
    return out;
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ValidationError("expected true or false, got '" + v + "'");
}

std::string fmt(double v) { return std::isinf(v) ? "inf" : format_double(v); }

using Setter = std::function<void(AnalysisConfig&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table{
        {"data", [](AnalysisConfig& c, const std::string& v) { c.data = v; }},
        {"delimiter",
         [](AnalysisConfig& c, const std::string& v) {
             if (v == "tab" || v == "\\t") c.delimiter = '\t';
             else if (v.size() == 1) c.delimiter = v[0];
             else throw ValidationError("delimiter must be a single character or 'tab'");
         }},
        {"id", [](AnalysisConfig& c, const std::string& v) { c.id_column = v; }},
        {"treatment", [](AnalysisConfig& c, const std::string& v) { c.treatment_column = v; }},
        {"covariates", [](AnalysisConfig& c, const std::string& v) { c.covariates = split_list(v); }},
        {"outcomes", [](AnalysisConfig& c, const std::string& v) { c.outcomes = split_list(v); }},
        {"validation_outcomes",
         [](AnalysisConfig& c, const std::string& v) { c.validation_outcomes = split_list(v); }},
        {"method", [](AnalysisConfig& c, const std::string& v) { c.method = parse_method(v); }},
        {"moments",
         [](AnalysisConfig& c, const std::string& v) {
             if (v != "first" && v != "first+second") throw ValidationError("moments must be first or first+second");
             c.moments = v;
         }},
        {"alpha", [](AnalysisConfig& c, const std::string& v) { c.solver.alpha = parse_double(v); }},
        {"momentum_beta", [](AnalysisConfig& c, const std::string& v) { c.solver.momentum_beta = parse_double(v); }},
        {"max_iterations", [](AnalysisConfig& c, const std::string& v) { c.solver.max_iterations = parse_uint(v); }},
        {"tolerance", [](AnalysisConfig& c, const std::string& v) { c.solver.tolerance = parse_double(v); }},
        {"decay_factor", [](AnalysisConfig& c, const std::string& v) { c.solver.decay_factor = parse_double(v); }},
        {"decay", [](AnalysisConfig& c, const std::string& v) { c.solver.decay_enabled = parse_bool(v); }},
        {"random_init", [](AnalysisConfig& c, const std::string& v) { c.solver.random_init = parse_bool(v); }},
        {"standardize", [](AnalysisConfig& c, const std::string& v) { c.solver.standardize = parse_bool(v); }},
        {"C", [](AnalysisConfig& c, const std::string& v) { c.regularization.C = parse_double(v); }},
        {"l1_ratio", [](AnalysisConfig& c, const std::string& v) { c.regularization.l1_ratio = parse_double(v); }},
        {"folds", [](AnalysisConfig& c, const std::string& v) { c.folds = parse_uint(v); }},
        {"threshold.smd", [](AnalysisConfig& c, const std::string& v) { c.thresholds.smd = parse_double(v); }},
        {"threshold.variance_ratio",
         [](AnalysisConfig& c, const std::string& v) { c.thresholds.variance_ratio = parse_double(v); }},
        {"threshold.overlap", [](AnalysisConfig& c, const std::string& v) { c.thresholds.overlap = parse_double(v); }},
        {"threshold.ks", [](AnalysisConfig& c, const std::string& v) { c.thresholds.ks = parse_double(v); }},
        {"threshold.mahalanobis",
         [](AnalysisConfig& c, const std::string& v) { c.thresholds.mahalanobis = parse_double(v); }},
        {"bootstrap", [](AnalysisConfig& c, const std::string& v) { c.bootstrap = parse_uint(v); }},
        {"level", [](AnalysisConfig& c, const std::string& v) { c.level = parse_double(v); }},
        {"seed",
         [](AnalysisConfig& c, const std::string& v) {
             c.seed = parse_uint(v);
             c.solver.seed = c.seed;
         }},
        {"doubly_robust", [](AnalysisConfig& c, const std::string& v) { c.doubly_robust = parse_bool(v); }},
        {"shard_rows", [](AnalysisConfig& c, const std::string& v) { c.shard_rows = parse_uint(v); }},
        {"report", [](AnalysisConfig& c, const std::string& v) { c.report = v; }},
        {"timeseries", [](AnalysisConfig& c, const std::string& v) { c.timeseries = v; }},
    };
    return table;
}

}  // namespace

std::filesystem::path AnalysisConfig::timeseries_path() const {
    if (!timeseries.empty()) return timeseries;
    auto p = report;
    return p.replace_extension(".csv");
}

bool AnalysisConfig::operator==(const AnalysisConfig& o) const { return emit_config(*this) == emit_config(o); }

void validate_roles(const AnalysisConfig& cfg) {
    if (cfg.data.empty()) throw ValidationError("config is missing 'data'");
    if (cfg.outcomes.empty()) throw ValidationError("config is missing 'outcomes'");
    std::map<std::string, std::string> role;
    auto claim = [&](const std::string& col, const std::string& r) {
        auto [it, fresh] = role.emplace(col, r);
        if (!fresh)
            throw ValidationError("column '" + col + "' is assigned to both " + it->second + " and " + r);
    };
    claim(cfg.id_column, "id");
    claim(cfg.treatment_column, "treatment");
    for (const auto& c : cfg.covariates) claim(c, "covariates");
    for (const auto& c : cfg.outcomes) claim(c, "outcomes");
    for (const auto& c : cfg.validation_outcomes) claim(c, "validation_outcomes");
}

AnalysisConfig parse_config(std::istream& in) {
    AnalysisConfig cfg;
    std::set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos)
            throw ValidationError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = trim(body.substr(0, eq));
        const std::string value = trim(body.substr(eq + 1));
        if (key.empty()) throw ValidationError("config line " + std::to_string(lineno) + ": missing key");
        const auto it = setters().find(key);
        if (it == setters().end())
            throw ValidationError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        if (!seen.insert(key).second)
            throw ValidationError("config line " + std::to_string(lineno) + ": key '" + key + "' set twice");
        try {
            it->second(cfg, value);
        } catch (const ValidationError& e) {
            throw ValidationError("config line " + std::to_string(lineno) + ": " + key + ": " + e.what());
        }
    }
    validate_roles(cfg);
    cfg.solver.validate();
    return cfg;
}

AnalysisConfig parse_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestError("cannot open config file '" + path.string() + "'");
    return parse_config(in);
}

std::string emit_config(const AnalysisConfig& c) {
    std::ostringstream o;
    o << "data = " << c.data.string() << "\n";
    o << "delimiter = " << (c.delimiter == '\t' ? std::string("tab") : std::string(1, c.delimiter)) << "\n";
    o << "id = " << c.id_column << "\n";
    o << "treatment = " << c.treatment_column << "\n";
    o << "covariates = " << join(c.covariates) << "\n";
    o << "outcomes = " << join(c.outcomes) << "\n";
    o << "validation_outcomes = " << join(c.validation_outcomes) << "\n";
    o << "method = " << method_name(c.method) << "\n";
    o << "moments = " << c.moments << "\n";
    o << "alpha = " << fmt(c.solver.alpha) << "\n";
    o << "momentum_beta = " << fmt(c.solver.momentum_beta) << "\n";
    o << "max_iterations = " << c.solver.max_iterations << "\n";
    o << "tolerance = " << fmt(c.solver.tolerance) << "\n";
    o << "decay_factor = " << fmt(c.solver.decay_factor) << "\n";
    o << "decay = " << (c.solver.decay_enabled ? "true" : "false") << "\n";
    o << "random_init = " << (c.solver.random_init ? "true" : "false") << "\n";
    o << "standardize = " << (c.solver.standardize ? "true" : "false") << "\n";
    o << "C = " << fmt(c.regularization.C) << "\n";
    o << "l1_ratio = " << fmt(c.regularization.l1_ratio) << "\n";
    o << "folds = " << c.folds << "\n";
    o << "threshold.smd = " << fmt(c.thresholds.smd) << "\n";
    o << "threshold.variance_ratio = " << fmt(c.thresholds.variance_ratio) << "\n";
    o << "threshold.overlap = " << fmt(c.thresholds.overlap) << "\n";
    o << "threshold.ks = " << fmt(c.thresholds.ks) << "\n";
    o << "threshold.mahalanobis = " << fmt(c.thresholds.mahalanobis) << "\n";
    o << "bootstrap = " << c.bootstrap << "\n";
    o << "level = " << fmt(c.level) << "\n";
    o << "seed = " << c.seed << "\n";
    o << "doubly_robust = " << (c.doubly_robust ? "true" : "false") << "\n";
    o << "shard_rows = " << c.shard_rows << "\n";
    o << "report = " << c.report.string() << "\n";
    o << "timeseries = " << c.timeseries_path().string() << "\n";
    return o.str();
}

}  // namespace balancekit::cli
