#include "balancekit/estimation.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "balancekit/diagnostics.hpp"
#include "balancekit/errors.hpp"

namespace balancekit {

std::string method_name(Method m) {
    switch (m) {
        case Method::eb: return "eb";
        case Method::ms: return "ms";
        case Method::ipw: return "ipw";
        case Method::ipw_tuned: return "ipw-tuned";
    }
    return "unknown";
}

Method parse_method(const std::string& name) {
    if (name == "eb") return Method::eb;
    if (name == "ms") return Method::ms;
    if (name == "ipw") return Method::ipw;
    if (name == "ipw-tuned") return Method::ipw_tuned;
    throw ValidationError("unknown method '" + name + "' (expected eb, ms, ipw or ipw-tuned)");
}

WeightingResult compute_weights(const Dataset& ds, const MethodSpec& spec) {
    WeightingResult out;
    const MomentSpec moments = spec.moments.size() ? spec.moments : MomentSpec::first_moments(ds.dimension());
    switch (spec.method) {
        case Method::eb:
        case Method::ms: {
            SolveResult r = spec.method == Method::eb ? solve_eb(ds, moments, spec.solver)
                                                      : solve_ms(ds, moments, spec.solver);
            out.weights = r.weights;
            out.converged = r.converged;
            out.solve = std::move(r);
            break;
        }
        case Method::ipw: {
            PropensityModel m = fit_logistic(ds, spec.regularization, spec.folds, spec.logistic);
            out.weights = ipw_weights(ds, m);
            out.propensity = std::move(m);
            break;
        }
        case Method::ipw_tuned: {
            TuningResult t = tune_ipw(ds, spec.grid, spec.logistic);
            out.weights = std::move(t.weights);
            out.propensity = std::move(t.model);
            out.tuning = std::move(t.grid);
            break;
        }
    }
    return out;
}

namespace {

struct Means {
    double treated = 0.0;
    double control = 0.0;
    double gap = 0.0;   // weighted control mean minus treated mean
};

// The control side is accumulated around the treated mean, so outcomes that
// are constant across units give a gap of exactly 0.
Means outcome_means(const Dataset& ds, const WeightVector& w, std::size_t outcome) {
    if (outcome >= ds.outcome_count()) throw ValidationError("outcome index out of range");
    if (w.size() != ds.n_control()) throw ValidationError("weight vector does not match control units");
    const double total = w.sum();
    if (!(total > 0.0)) throw ValidationError("weights sum to zero");
    Means m;
    for (std::size_t s = 0; s < ds.shard_count(); ++s)
        for (double y : ds.shard(s).treated.outcome(outcome)) m.treated += y;
    m.treated /= static_cast<double>(ds.n_treated());
    for (std::size_t s = 0; s < ds.shard_count(); ++s) {
        auto yc = ds.shard(s).control.outcome(outcome);
        const std::size_t off = ds.control_offset(s);
        for (std::size_t i = 0; i < yc.size(); ++i) m.gap += w.weights[off + i] * (yc[i] - m.treated);
    }
    m.gap /= total;
    m.control = m.treated + m.gap;
    return m;
}

void set_pct(EffectEstimate& e) {
    const double denom = e.treated_mean - e.patt;
    e.pct_change_defined = denom != 0.0;
    e.pct_change = e.pct_change_defined ? e.patt / denom : 0.0;
}

}  // namespace

EffectEstimate patt(const Dataset& ds, const WeightVector& w, std::size_t outcome) {
    const Means m = outcome_means(ds, w, outcome);
    EffectEstimate e;
    e.outcome = ds.schema().outcomes[outcome];
    e.treated_mean = m.treated;
    e.control_mean = m.control;
    e.patt = -m.gap;
    set_pct(e);
    return e;
}

EffectEstimate patt_dr(const Dataset& ds, const WeightVector& w, std::size_t outcome, const OutcomeModel& model) {
    EffectEstimate e = patt(ds, w, outcome);
    e.patt = dr_correct(ds, w, outcome, model);
    e.control_mean = e.treated_mean - e.patt;
    e.doubly_robust = true;
    set_pct(e);
    return e;
}

std::vector<EffectEstimate> bootstrap_ci(const Dataset& ds, const MethodSpec& method,
                                         std::span<const std::size_t> outcomes,
                                         const BootstrapOptions& options) {
    if (options.replicates < kMinBootstrapReplicates)
        throw ValidationError("bootstrap needs at least " + std::to_string(kMinBootstrapReplicates) +
                              " replicates (got " + std::to_string(options.replicates) + ")");
    if (!(options.level > 0.0 && options.level < 1.0)) throw ValidationError("confidence level must lie in (0, 1)");
    for (std::size_t k : outcomes)
        if (k >= ds.outcome_count()) throw ValidationError("outcome index out of range");

    MethodSpec full_spec = method;
    full_spec.solver.engine = options.engine;
    full_spec.logistic.engine = options.engine;
    const WeightingResult full = compute_weights(ds, full_spec);
    std::optional<OutcomeModel> full_model;
    if (options.doubly_robust) full_model = fit_outcome_model(ds, options.engine);

    std::vector<EffectEstimate> out;
    for (std::size_t k : outcomes) {
        EffectEstimate e = options.doubly_robust ? patt_dr(ds, full.weights, k, *full_model)
                                                 : patt(ds, full.weights, k);
        e.method = method_name(method.method);
        e.level = options.level;
        out.push_back(std::move(e));
    }

    const std::size_t B = options.replicates;
    const std::size_t n0 = ds.n_control(), n1 = ds.n_treated();
    std::vector<std::vector<double>> patts(outcomes.size(), std::vector<double>(B, 0.0));
    std::vector<std::vector<double>> pcts(outcomes.size(), std::vector<double>(B, 0.0));
    std::vector<char> ok(B, 0);

    MethodSpec rep_spec = method;
    rep_spec.solver.engine.worker_count = 1;
    rep_spec.logistic.engine.worker_count = 1;
    if (options.warm_start && full.solve) rep_spec.solver.initial_dual = full.solve->internal_xi;

    // Replicates are the unit of parallelism; each owns its RNG stream.
    parallel_for(B, options.engine.worker_count, [&](std::size_t r) {
        std::seed_seq seq{static_cast<std::uint32_t>(options.seed), static_cast<std::uint32_t>(options.seed >> 32),
                          static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(r >> 32)};
        std::mt19937_64 rng(seq);
        std::uniform_int_distribution<std::size_t> pick_c(0, n0 - 1), pick_t(0, n1 - 1);
        std::vector<std::size_t> rows_c(n0), rows_t(n1);
        for (auto& i : rows_c) i = pick_c(rng);
        for (auto& i : rows_t) i = pick_t(rng);
        Dataset rep = ds.gather(rows_c, rows_t, options.shard_rows);

        MethodSpec spec = rep_spec;
        WeightingResult wr;
        try {
            wr = compute_weights(rep, spec);
        } catch (const SolverError&) {
            return;
        } catch (const ValidationError&) {
            // Warm start length mismatch (a constraint became constant): retry cold.
            spec.solver.initial_dual.reset();
            try {
                wr = compute_weights(rep, spec);
            } catch (const Error&) {
                return;
            }
        }
        if (!wr.converged) return;
        std::optional<OutcomeModel> model;
        if (options.doubly_robust) model = fit_outcome_model(rep, spec.solver.engine);
        for (std::size_t o = 0; o < outcomes.size(); ++o) {
            EffectEstimate e = options.doubly_robust ? patt_dr(rep, wr.weights, outcomes[o], *model)
                                                     : patt(rep, wr.weights, outcomes[o]);
            patts[o][r] = e.patt;
            pcts[o][r] = e.pct_change;
        }
        ok[r] = 1;
    });

    std::size_t failed = 0;
    for (char c : ok) failed += !c;
    if (static_cast<double>(failed) > 0.1 * static_cast<double>(B))
        throw SolverError("bootstrap failed: " + std::to_string(failed) + " of " + std::to_string(B) +
                          " replicates did not converge (" +
                          std::to_string(100.0 * static_cast<double>(failed) / static_cast<double>(B)) + "%)");

    const double lo_q = 0.5 * (1.0 - options.level), hi_q = 0.5 * (1.0 + options.level);
    for (std::size_t o = 0; o < outcomes.size(); ++o) {
        std::vector<double> a, b;
        for (std::size_t r = 0; r < B; ++r) {
            if (!ok[r]) continue;
            a.push_back(patts[o][r]);
            b.push_back(pcts[o][r]);
        }
        out[o].ci_lower = quantile(a, lo_q);
        out[o].ci_upper = quantile(a, hi_q);
        out[o].pct_ci_lower = quantile(b, lo_q);
        out[o].pct_ci_upper = quantile(b, hi_q);
        out[o].replicates = B;
        out[o].failed_replicates = failed;
    }
    return out;
}

EffectEstimate bootstrap_ci(const Dataset& ds, const MethodSpec& method, std::size_t outcome,
                            const BootstrapOptions& options) {
    const std::size_t idx[] = {outcome};
    return bootstrap_ci(ds, method, std::span<const std::size_t>(idx), options).front();
}

MetaMetrics meta_metrics(std::span<const double> estimates, double truth) {
    if (estimates.size() < 2)
        throw ValidationError("meta metrics need at least 2 replications (standard deviation undefined)");
    const double n = static_cast<double>(estimates.size());
    double mean = 0.0;
    for (double v : estimates) mean += v;
    mean /= n;
    double ss = 0.0;
    for (double v : estimates) ss += (v - mean) * (v - mean);
    MetaMetrics m;
    m.replications = estimates.size();
    m.amb = std::abs(mean - truth);
    m.sd = std::sqrt(ss / (n - 1.0));
    m.sd_population = std::sqrt(ss / n);
    m.rmse = std::sqrt(m.amb * m.amb + m.sd * m.sd);
    m.rmse_population = std::sqrt(m.amb * m.amb + m.sd_population * m.sd_population);
    return m;
}

}  // namespace balancekit
