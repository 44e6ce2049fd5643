#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "balancekit/cli/analysis.hpp"
#include "balancekit/errors.hpp"

using namespace balancekit;
using namespace balancekit::cli;

namespace {

struct Global {
    std::optional<std::size_t> workers;
    std::optional<std::uint64_t> seed_flag;
    bool ordered = true;
    std::uint64_t seed() const { return seed_flag.value_or(0); }
    EngineConfig engine() const { return EngineConfig::resolve(workers, ordered); }
};

struct DataFlags {
    std::string path;
    std::string id = "unit_id";
    std::string treatment = "treatment";
    std::vector<std::string> covariates;
    std::vector<std::string> outcomes;
    char delimiter = ',';
    std::size_t shard_rows = kDefaultShardRows;

    void add(CLI::App* app) {
        app->add_option("--data", path, "CSV file or dataset directory")->required();
        add_roles(app);
    }
    void add_roles(CLI::App* app) {
        app->add_option("--id", id, "unit id column")->capture_default_str();
        app->add_option("--treatment", treatment, "treatment column (values 0/1)")->capture_default_str();
        app->add_option("--covariates", covariates, "covariate columns (default: all unassigned)")->delimiter(',');
        app->add_option("--outcome-columns", outcomes, "outcome columns")->delimiter(',');
        app->add_option("--delimiter", delimiter, "CSV delimiter")->capture_default_str();
        app->add_option("--shard-rows", shard_rows, "rows per shard")->capture_default_str()->check(CLI::PositiveNumber);
    }
    DataSource source() const {
        DataSource s;
        s.path = path;
        s.roles = {id, treatment, covariates, outcomes, delimiter};
        s.shard_rows = shard_rows;
        return s;
    }
};

struct SolverFlags {
    std::string method = "ms";
    std::string moments = "first";
    SolverConfig cfg;
    bool no_decay = false;
    bool no_standardize = false;
    bool zero_init = false;
    bool tune = false;
    double C = std::numeric_limits<double>::infinity();
    double l1_ratio = 0.0;
    std::size_t folds = 0;

    void add(CLI::App* app, bool method_required) {
        auto* m = app->add_option("--method", method, "eb | ms | ipw | ipw-tuned")
                      ->check(CLI::IsMember({"eb", "ms", "ipw", "ipw-tuned"}));
        if (method_required) m->required();
        else m->capture_default_str();
        app->add_option("--moments", moments, "first | first+second")
            ->check(CLI::IsMember({"first", "first+second"}))
            ->capture_default_str();
        app->add_option("--alpha", cfg.alpha, "initial learning rate")->capture_default_str();
        app->add_option("--momentum", cfg.momentum_beta, "momentum coefficient (eb)")->capture_default_str();
        app->add_option("--max-iters", cfg.max_iterations, "iteration cap")->capture_default_str();
        app->add_option("--tolerance", cfg.tolerance, "balance residual tolerance")->capture_default_str();
        app->add_option("--decay-factor", cfg.decay_factor, "learning-rate multiplier on oscillation")
            ->capture_default_str();
        app->add_flag("--no-decay", no_decay, "keep the learning rate fixed");
        app->add_flag("--no-standardize", no_standardize, "solve on the raw covariate scale");
        app->add_flag("--zero-init", zero_init, "start entropy balancing from zero multipliers");
        app->add_flag("--tune", tune, "with --method ipw: search the regularization grid");
        app->add_option("--C", C, "ipw inverse penalty strength (default: unpenalised)");
        app->add_option("--l1-ratio", l1_ratio, "ipw elastic-net mixing")->capture_default_str();
        app->add_option("--folds", folds, "ipw cross-fitting folds (0: none)")->capture_default_str();
    }
    MethodSpec spec(const Dataset& ds, const Global& g) const {
        MethodSpec s;
        s.method = parse_method(method);
        if (tune) {
            if (s.method != Method::ipw && s.method != Method::ipw_tuned)
                throw ValidationError("--tune applies to --method ipw only");
            s.method = Method::ipw_tuned;
        }
        s.moments = moments == "first+second" ? MomentSpec::first_and_second(ds.dimension())
                                              : MomentSpec::first_moments(ds.dimension());
        s.solver = cfg;
        s.solver.seed = g.seed();
        s.solver.decay_enabled = !no_decay;
        s.solver.standardize = !no_standardize;
        s.solver.random_init = !zero_init;
        s.solver.engine = g.engine();
        s.regularization = {C, l1_ratio};
        s.folds = folds;
        s.logistic.engine = g.engine();
        s.logistic.fold_seed = g.seed();
        return s;
    }
};

void emit(const Json& j, const std::string& path) {
    if (path.empty() || path == "-") std::cout << dump(j);
    else write_json(j, path);
}

Thresholds parse_thresholds(const std::string& text) {
    Thresholds t;
    if (text.empty()) return t;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw ValidationError("threshold '" + item + "' is not key=value");
        const std::string k = item.substr(0, eq);
        double v = 0.0;
        try {
            v = std::stod(item.substr(eq + 1));
        } catch (const std::exception&) {
            throw ValidationError("threshold '" + item + "' has a non-numeric value");
        }
        if (k == "smd") t.smd = v;
        else if (k == "variance_ratio" || k == "vr") t.variance_ratio = v;
        else if (k == "overlap" || k == "ovl") t.overlap = v;
        else if (k == "ks") t.ks = v;
        else if (k == "mahalanobis" || k == "mb") t.mahalanobis = v;
        else throw ValidationError("unknown threshold '" + k + "'");
    }
    return t;
}

std::vector<std::size_t> outcome_indices(const Dataset& ds, const std::vector<std::string>& names) {
    std::vector<std::size_t> idx;
    const auto& all = ds.schema().outcomes;
    if (names.empty()) {
        for (std::size_t k = 0; k < all.size(); ++k) idx.push_back(k);
    }
    for (const auto& n : names) {
        auto it = std::find(all.begin(), all.end(), n);
        if (it == all.end()) throw ValidationError("dataset has no outcome column '" + n + "'");
        idx.push_back(static_cast<std::size_t>(it - all.begin()));
    }
    if (idx.empty()) throw ValidationError("no outcome columns to estimate");
    return idx;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"balancekit: covariate balancing weights, diagnostics and effect estimates"};
    app.require_subcommand(1);
    Global g;
    app.add_option("--workers", g.workers, "worker threads (overrides BK_WORKERS)")->check(CLI::PositiveNumber);
    app.add_option("--seed", g.seed_flag, "master random seed (default 0)");
    app.add_option("--ordered-reduce", g.ordered, "combine shard results in a fixed order (bit-reproducible)")
        ->capture_default_str();

    std::string report_path;
    std::string current = "balancekit";
    std::function<int()> action;

    // ingest
    auto* ingest = app.add_subcommand("ingest", "convert a CSV into a sharded dataset directory");
    DataFlags ingest_data;
    std::string ingest_out;
    ingest->add_option("--input", ingest_data.path, "CSV file")->required();
    ingest->add_option("--output", ingest_out, "dataset directory to create")->required();
    ingest_data.add_roles(ingest);
    ingest->add_option("--report", report_path, "summary JSON path (default: stdout)");
    ingest->callback([&] {
        current = "ingest";
        action = [&] {
            const Dataset ds = load_dataset(ingest_data.source());
            write_dataset(ds, ingest_out);
            Json j = report_header("ingest");
            j["status"] = "ok";
            j["output"] = ingest_out;
            j["n_control"] = ds.n_control();
            j["n_treated"] = ds.n_treated();
            j["shards"] = ds.shard_count();
            j["covariates"] = ds.schema().covariates;
            j["outcomes"] = ds.schema().outcomes;
            emit(j, report_path);
            return int(kExitOk);
        };
    });

    // solve
    auto* solve = app.add_subcommand("solve", "compute control-unit weights");
    DataFlags solve_data;
    SolverFlags solve_flags;
    std::string weights_out;
    bool with_trace = true;
    solve_data.add(solve);
    solve_flags.add(solve, true);
    solve->add_option("--weights-out", weights_out, "weights CSV (unit_id,weight)")->required();
    solve->add_option("--report", report_path, "metadata JSON path (default: stdout)");
    solve->add_flag("--trace", with_trace, "include the residual trace");
    solve->callback([&] {
        current = "solve";
        action = [&] {
            const Dataset ds = load_dataset(solve_data.source());
            const MethodSpec spec = solve_flags.spec(ds, g);
            const WeightingResult wr = compute_weights(ds, spec);
            write_weights_csv(wr.weights, weights_out);
            Json j = report_header("solve");
            j["status"] = wr.converged ? "ok" : "solver_nonconvergence";
            j["method"] = method_name(spec.method);
            j["weights_file"] = weights_out;
            j["n_control"] = ds.n_control();
            j["n_treated"] = ds.n_treated();
            j["converged"] = wr.converged;
            if (wr.solve) j["solver"] = to_json(*wr.solve, with_trace);
            if (wr.propensity) {
                Json c = Json::array();
                for (double v : wr.propensity->coefficients) c.push_back(number(v));
                j["propensity"] = {{"C", number(wr.propensity->regularization.C)},
                                   {"l1_ratio", wr.propensity->regularization.l1_ratio},
                                   {"folds", wr.propensity->folds},
                                   {"coefficients", c},
                                   {"iterations", wr.propensity->iterations}};
            }
            if (!wr.tuning.empty()) {
                Json grid = Json::array();
                for (const auto& p : wr.tuning) grid.push_back(to_json(p));
                j["tuning"] = grid;
            }
            emit(j, report_path);
            return int(wr.converged ? kExitOk : kExitNonConvergence);
        };
    });

    // diagnose
    auto* diagnose = app.add_subcommand("diagnose", "balance and weight-stability report");
    DataFlags diag_data;
    std::string diag_weights, thresholds_text, interactions = "auto";
    std::optional<std::size_t> bins;
    diag_data.add(diagnose);
    diagnose->add_option("--weights", diag_weights, "weights CSV (unit_id,weight)")->required();
    diagnose->add_option("--thresholds", thresholds_text, "e.g. smd=0.1,ks=0.2");
    diagnose->add_option("--interactions", interactions, "auto | on | off")
        ->check(CLI::IsMember({"auto", "on", "off"}))
        ->capture_default_str();
    diagnose->add_option("--overlap-bins", bins, "histogram bins for the overlap metric");
    diagnose->add_option("--report", report_path, "JSON path (default: stdout)");
    diagnose->callback([&] {
        current = "diagnose";
        action = [&] {
            const Dataset ds = load_dataset(diag_data.source());
            const WeightVector w = read_weights_csv(diag_weights, ds);
            DiagnosticsOptions o;
            o.thresholds = parse_thresholds(thresholds_text);
            if (interactions != "auto") o.interactions = interactions == "on";
            o.overlap_bins = bins;
            o.engine = g.engine();
            const BalanceReport b = balance_report(ds, w, o);
            Json j = report_header("diagnose");
            j["status"] = b.passed() ? "ok" : "balance_check_failed";
            j["balance"] = to_json(b);
            j["stability"] = to_json(stability(w));
            emit(j, report_path);
            return int(b.passed() ? kExitOk : kExitBalance);
        };
    });

    // estimate
    auto* estimate = app.add_subcommand("estimate", "effect on the treated, optionally with bootstrap intervals");
    DataFlags est_data;
    SolverFlags est_flags;
    std::string est_weights;
    std::vector<std::string> est_outcomes;
    BootstrapOptions bopt;
    bopt.replicates = 0;
    bool dr = false;
    est_data.add(estimate);
    est_flags.add(estimate, false);
    estimate->add_option("--weights", est_weights, "weights CSV (unit_id,weight)")->required();
    estimate->add_option("--outcomes", est_outcomes, "outcome columns to estimate (default: all)")->delimiter(',');
    estimate->add_option("--bootstrap", bopt.replicates, "bootstrap replicates (0: none; otherwise >= 100)")
        ->capture_default_str();
    estimate->add_option("--level", bopt.level, "confidence level")->capture_default_str();
    estimate->add_flag("--dr", dr, "apply the regression residual correction");
    estimate->add_option("--report", report_path, "JSON path (default: stdout)");
    estimate->callback([&] {
        current = "estimate";
        action = [&] {
            DataSource src = est_data.source();
            // Estimation needs outcome columns; default to the requested ones.
            if (src.roles.outcome_columns.empty()) src.roles.outcome_columns = est_outcomes;
            const Dataset ds = load_dataset(src);
            const WeightVector w = read_weights_csv(est_weights, ds);
            const auto idx = outcome_indices(ds, est_outcomes);
            std::optional<OutcomeModel> om;
            if (dr) om = fit_outcome_model(ds, g.engine());
            std::vector<EffectEstimate> est;
            for (std::size_t k : idx) {
                EffectEstimate e = dr ? patt_dr(ds, w, k, *om) : patt(ds, w, k);
                e.method = est_flags.method;
                est.push_back(e);
            }
            Json j = report_header("estimate");
            if (bopt.replicates > 0) {
                bopt.seed = g.seed();
                bopt.doubly_robust = dr;
                bopt.engine = g.engine();
                bopt.shard_rows = est_data.shard_rows;
                const auto boot = bootstrap_ci(ds, est_flags.spec(ds, g), idx, bopt);
                for (std::size_t k = 0; k < est.size(); ++k) {
                    est[k].level = boot[k].level;
                    est[k].ci_lower = boot[k].ci_lower;
                    est[k].ci_upper = boot[k].ci_upper;
                    est[k].pct_ci_lower = boot[k].pct_ci_lower;
                    est[k].pct_ci_upper = boot[k].pct_ci_upper;
                    est[k].replicates = boot[k].replicates;
                    est[k].failed_replicates = boot[k].failed_replicates;
                }
                j["bootstrap"] = {{"replicates", bopt.replicates},
                                  {"level", bopt.level},
                                  {"resampling", "units, stratified by group"},
                                  {"weights", "re-solved per replicate with --method"},
                                  {"interval", "percentile"}};
            }
            j["status"] = "ok";
            Json arr = Json::array(), summary = Json::array();
            for (const auto& e : est) {
                arr.push_back(to_json(e));
                summary.push_back(summary_row(e));
            }
            j["estimates"] = arr;
            j["summary"] = summary;
            emit(j, report_path);
            return int(kExitOk);
        };
    });

    // simulate
    auto* simulate = app.add_subcommand("simulate", "semi-synthetic benchmark with zero true effect");
    SimulationSpec sim;
    BenchmarkOptions bench;
    std::string dgp = "linear", csv_path;
    std::size_t n_eval = 10000;
    bool timings = false;
    simulate->add_option("--dgp", dgp, "linear | interactions | forest")
        ->check(CLI::IsMember({"linear", "interactions", "forest"}))
        ->capture_default_str();
    simulate->add_option("--n", n_eval, "units per evaluation dataset (a training half of equal size is drawn)")
        ->capture_default_str()
        ->check(CLI::Range(std::size_t{2}, std::numeric_limits<std::size_t>::max()));
    simulate->add_option("--reps", bench.replications, "replications")->capture_default_str();
    simulate->add_option("--methods", bench.methods, "eb, ms, ipw, ipw-tuned, each optionally with -dr")
        ->delimiter(',')
        ->capture_default_str();
    simulate->add_option("--d-continuous", sim.d_continuous, "engagement-style covariates")->capture_default_str();
    simulate->add_option("--d-binary", sim.d_binary, "attribute-style covariates")->capture_default_str();
    simulate->add_option("--anchor", sim.interaction_anchor, "binary covariate interacted with all others")
        ->capture_default_str();
    simulate->add_option("--csv", csv_path, "per-replication CSV path");
    std::string export_path;
    std::size_t export_rep = 0;
    simulate->add_option("--export-csv", export_path,
                         "write one evaluation dataset as CSV instead of running the benchmark");
    simulate->add_option("--export-replication", export_rep, "which replication --export-csv writes")
        ->capture_default_str();
    simulate->add_flag("--timings", timings, "include wall-clock seconds (breaks byte-reproducibility)");
    simulate->add_option("--report", report_path, "aggregate JSON path (default: stdout)");
    simulate->callback([&] {
        current = "simulate";
        action = [&] {
            sim.dgp = parse_dgp(dgp);
            sim.seed = g.seed();
            sim.n_units = 2 * n_eval;
            bench.engine = g.engine();
            bench.test_units = n_eval;
            if (!export_path.empty()) {
                const FittedDgp fit = fit_reference(sim);
                const Dataset ds = replication_dataset(sim, fit, export_rep, n_eval);
                std::ofstream out(export_path, std::ios::binary);
                if (!out) throw IngestError("cannot write '" + export_path + "'");
                SchemaConfig cols;
                cols.id_column = "unit_id";
                cols.treatment_column = "treatment";
                export_csv(ds, out, cols);
                Json j = report_header("simulate");
                j["status"] = "ok";
                j["export"] = {{"path", export_path},
                               {"replication", export_rep},
                               {"n_control", ds.n_control()},
                               {"n_treated", ds.n_treated()},
                               {"covariates", ds.schema().covariates},
                               {"outcomes", ds.schema().outcomes}};
                emit(j, report_path);
                return int(kExitOk);
            }
            const BenchmarkResult r = run_benchmark(sim, bench);
            if (!csv_path.empty()) {
                std::ofstream out(csv_path, std::ios::binary);
                if (!out) throw IngestError("cannot write '" + csv_path + "'");
                write_benchmark_csv(r, out);
            }
            Json j = report_header("simulate");
            j["status"] = "ok";
            j["benchmark"] = to_json(r, timings);
            emit(j, report_path);
            return int(kExitOk);
        };
    });

    // analyze
    auto* analyze = app.add_subcommand("analyze", "end-to-end observational study from a config file");
    std::string config_path;
    analyze->add_option("--config", config_path, "flat key = value configuration")->required();
    analyze->add_option("--report", report_path, "override the report path from the config");
    analyze->callback([&] {
        current = "analyze";
        action = [&] {
            AnalysisConfig cfg = parse_config(std::filesystem::path(config_path));
            if (!report_path.empty()) {
                cfg.report = report_path;
                cfg.timeseries.clear();
            }
            if (g.seed_flag) {
                cfg.seed = *g.seed_flag;
                cfg.solver.seed = *g.seed_flag;
            }
            const AnalysisOutcome out = run_analysis(cfg, g.engine());
            if (out.exit_code == kExitError)
                std::cerr << "error: " << out.report["error"]["message"].get<std::string>() << "\n";
            return out.exit_code;
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitError;
    }
    try {
        return action();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        if (!report_path.empty() && report_path != "-" && current != "analyze") {
            try {
                write_json(error_report(current, e), report_path);
            } catch (const std::exception&) {
            }
        }
        if (dynamic_cast<const SolverError*>(&e)) return kExitNonConvergence;
        return kExitError;
    }
}
