#include "balancekit/cli/analysis.hpp"

#include <fstream>
#include <numeric>
#include <sstream>

#include "balancekit/errors.hpp"

namespace balancekit::cli {

namespace {

struct SeriesRow {
    std::string period;
    std::string phase;   // matching | validation | post
    double treated = 0.0;
    double synthetic = 0.0;
    std::optional<double> lo, hi;
};

void write_series(const std::filesystem::path& path, const std::vector<SeriesRow>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IngestError("cannot write time series '" + path.string() + "'");
    out << "period,phase,treated_value,synthetic_control_value,difference,ci_lower,ci_upper\n";
    for (const auto& r : rows) {
        out << r.period << ',' << r.phase << ',' << format_double(r.treated) << ',' << format_double(r.synthetic)
            << ',' << format_double(r.treated - r.synthetic) << ',';
        if (r.lo) out << format_double(*r.lo);
        out << ',';
        if (r.hi) out << format_double(*r.hi);
        out << '\n';
    }
}

// Treated and weighted-control means of every covariate: the balanced
// pre-treatment part of the time series.
std::vector<SeriesRow> matching_rows(const Dataset& ds, const WeightVector& w) {
    std::vector<SeriesRow> rows;
    const double total = w.sum();
    for (std::size_t j = 0; j < ds.dimension(); ++j) {
        const auto t = gather_covariate(ds, j, true);
        const auto c = gather_covariate(ds, j, false);
        SeriesRow r;
        r.period = ds.schema().covariates[j];
        r.phase = "matching";
        r.treated = std::accumulate(t.begin(), t.end(), 0.0) / static_cast<double>(t.size());
        for (std::size_t i = 0; i < c.size(); ++i) r.synthetic += w.weights[i] * c[i];
        r.synthetic /= total;
        rows.push_back(r);
    }
    return rows;
}

Json config_json(const AnalysisConfig& cfg) {
    Json j = Json::object();
    std::istringstream in(emit_config(cfg));
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find(" = ");
        j[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return j;
}

}  // namespace

AnalysisOutcome run_analysis(const AnalysisConfig& cfg, const EngineConfig& engine) {
    AnalysisOutcome out;
    out.report = report_header("analyze");
    std::vector<SeriesRow> series;
    auto finish = [&](int code, const std::string& status) {
        out.exit_code = code;
        out.report["status"] = status;
        out.report["exit_code"] = code;
        write_json(out.report, cfg.report);
        write_series(cfg.timeseries_path(), series);
        return out;
    };

    try {
        validate_roles(cfg);
        out.report["config"] = config_json(cfg);

        DataSource src;
        src.path = cfg.data;
        src.roles.id_column = cfg.id_column;
        src.roles.treatment_column = cfg.treatment_column;
        src.roles.covariate_columns = cfg.covariates;
        src.roles.outcome_columns = cfg.outcomes;
        src.roles.outcome_columns.insert(src.roles.outcome_columns.end(), cfg.validation_outcomes.begin(),
                                         cfg.validation_outcomes.end());
        src.roles.delimiter = cfg.delimiter;
        src.shard_rows = cfg.shard_rows;
        const Dataset ds = load_dataset(src);
        if (ds.schema().outcomes != src.roles.outcome_columns)
            throw ValidationError("dataset outcomes do not match the configured outcomes");
        out.report["data"] = {{"n_control", ds.n_control()},
                              {"n_treated", ds.n_treated()},
                              {"covariates", ds.schema().covariates}};

        MethodSpec ms;
        ms.method = cfg.method;
        ms.moments = cfg.moments == "first+second" ? MomentSpec::first_and_second(ds.dimension())
                                                   : MomentSpec::first_moments(ds.dimension());
        ms.solver = cfg.solver;
        ms.solver.engine = engine;
        ms.regularization = cfg.regularization;
        ms.folds = cfg.folds;
        ms.logistic.engine = engine;
        ms.logistic.fold_seed = cfg.seed;

        WeightingResult wr;
        try {
            wr = compute_weights(ds, ms);
        } catch (const SolverError& e) {
            out.report["error"] = {{"code", error_code(e)}, {"message", e.what()}};
            return finish(kExitNonConvergence, "solver_nonconvergence");
        }
        if (wr.solve) out.report["solve"] = to_json(*wr.solve, false);
        out.report["weights"] = {{"method", method_name(cfg.method)}, {"converged", wr.converged}};

        DiagnosticsOptions dopt;
        dopt.thresholds = cfg.thresholds;
        dopt.engine = engine;
        const BalanceReport balance = balance_report(ds, wr.weights, dopt);
        out.report["balance"] = to_json(balance);
        out.report["stability"] = to_json(stability(wr.weights));
        series = matching_rows(ds, wr.weights);

        // The balance gate comes first: an infeasible target shows up as a
        // named failing covariate rather than as a bare non-convergence.
        if (!balance.passed()) return finish(kExitBalance, "balance_check_failed");
        if (!wr.converged) {
            out.report["error"] = {{"code", "solver_nonconvergence"},
                                   {"message", "weights did not reach the balance tolerance"}};
            return finish(kExitNonConvergence, "solver_nonconvergence");
        }

        std::vector<std::size_t> idx(ds.outcome_count());
        std::iota(idx.begin(), idx.end(), 0);
        std::vector<EffectEstimate> est;
        if (cfg.bootstrap > 0) {
            BootstrapOptions bo;
            bo.replicates = cfg.bootstrap;
            bo.level = cfg.level;
            bo.seed = cfg.seed;
            bo.doubly_robust = cfg.doubly_robust;
            bo.shard_rows = cfg.shard_rows;
            bo.engine = engine;
            try {
                est = bootstrap_ci(ds, ms, idx, bo);
            } catch (const SolverError& e) {
                out.report["error"] = {{"code", error_code(e)}, {"message", e.what()}};
                return finish(kExitNonConvergence, "solver_nonconvergence");
            }
            out.report["bootstrap"] = {{"replicates", cfg.bootstrap},
                                       {"level", cfg.level},
                                       {"resampling", "units, stratified by group"},
                                       {"weights", "re-solved per replicate"},
                                       {"interval", "percentile"}};
        } else {
            std::optional<OutcomeModel> om;
            if (cfg.doubly_robust) om = fit_outcome_model(ds, engine);
            for (std::size_t k : idx) {
                EffectEstimate e = cfg.doubly_robust ? patt_dr(ds, wr.weights, k, *om) : patt(ds, wr.weights, k);
                e.method = method_name(cfg.method);
                est.push_back(e);
            }
        }

        Json summary = Json::array(), validation = Json::array(), estimates = Json::array();
        bool validation_passed = true;
        for (std::size_t k = 0; k < est.size(); ++k) {
            const EffectEstimate& e = est[k];
            const bool is_validation = k >= cfg.outcomes.size();
            estimates.push_back(to_json(e));
            SeriesRow r{e.outcome, is_validation ? "validation" : "post", e.treated_mean, e.control_mean,
                        e.ci_lower, e.ci_upper};
            series.push_back(r);
            Json row = summary_row(e);
            if (is_validation) {
                std::optional<bool> covers;
                if (e.pct_ci_lower) covers = *e.pct_ci_lower <= 0.0 && 0.0 <= *e.pct_ci_upper;
                row["covers_zero"] = covers ? Json(*covers) : Json(nullptr);
                if (covers && !*covers) validation_passed = false;
                validation.push_back(row);
            } else {
                summary.push_back(row);
            }
        }
        out.report["summary"] = summary;
        out.report["validation"] = {{"metrics", validation},
                                    {"passed", cfg.validation_outcomes.empty() || cfg.bootstrap == 0
                                                   ? Json(nullptr)
                                                   : Json(validation_passed)}};
        out.report["estimates"] = estimates;
        return finish(kExitOk, "ok");
    } catch (const std::exception& e) {
        out.report["error"] = {{"code", error_code(e)}, {"message", e.what()}};
        out.exit_code = kExitError;
        out.report["status"] = "error";
        out.report["exit_code"] = kExitError;
        try {
            write_json(out.report, cfg.report);
        } catch (const std::exception&) {
        }
        return out;
    }
}

}  // namespace balancekit::cli
