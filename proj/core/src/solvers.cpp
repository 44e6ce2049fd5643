#include "balancekit/solvers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "balancekit/errors.hpp"

namespace balancekit {

void SolverConfig::validate() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ValidationError("alpha must be positive");
    if (!(momentum_beta >= 0.0 && momentum_beta < 1.0))
        throw ValidationError("momentum beta must lie in [0, 1)");
    if (!(tolerance > 0.0)) throw ValidationError("tolerance must be positive");
    if (max_iterations < 1) throw ValidationError("max iterations must be at least 1");
    if (!(decay_factor > 0.0 && decay_factor <= 1.0))
        throw ValidationError("decay factor must lie in (0, 1]");
    if (engine.worker_count < 1) throw ValidationError("worker count must be at least 1");
    if (stagnation_window < 1) throw ValidationError("stagnation window must be at least 1");
}

double WeightVector::sum() const {
    return std::accumulate(weights.begin(), weights.end(), 0.0);
}

bool detect_oscillation_and_decay(DualState& state, std::span<const double> trace, SolverConfig& cfg) {
    const std::size_t n = trace.size();
    if (n < 4) return false;
    const std::size_t steps = std::min<std::size_t>(4, n - 1);
    std::size_t rises = 0;
    // Rises within rounding of a flat trace are not oscillation.
    for (std::size_t i = n - steps; i < n; ++i) rises += trace[i] > trace[i - 1] * (1.0 + 1e-10);
    if (rises < 3) return false;
    cfg.alpha *= cfg.decay_factor;
    std::fill(state.velocity.begin(), state.velocity.end(), 0.0);
    return true;
}

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Reduction<double> max_reduction(std::function<double(const Shard&, std::size_t)> map) {
    Reduction<double> r;
    r.identity = kNegInf;
    r.combine = [](double a, const double& b) { return std::max(a, b); };
    r.map = std::move(map);
    return r;
}

Reduction<std::vector<double>> sum_reduction(std::size_t len,
                                             std::function<std::vector<double>(const Shard&, std::size_t)> map) {
    Reduction<std::vector<double>> r;
    r.identity.assign(len, 0.0);
    r.combine = add_vectors;
    r.map = std::move(map);
    return r;
}

// The balancing problem in solver coordinates: moment features (optionally
// standardised), reduced to the columns that vary among control units.
struct Problem {
    Dataset features;
    MomentSpec spec;
    std::vector<std::string> names;
    std::vector<std::size_t> active;
    std::vector<double> mean;          // per moment, solver coords = (c - mean) / sd
    std::vector<double> sd;
    std::vector<double> target;        // per active moment, solver coords
    std::vector<double> orig_target;   // per moment
    std::vector<double> control_const; // per moment, value if dropped
    std::vector<std::string> dropped;
    std::vector<std::size_t> dropped_index;
    std::vector<std::string> infeasible;
    double n0 = 0.0;
    EngineConfig engine;
    mutable std::vector<std::vector<double>> scratch;  // per-shard per-unit buffer

    std::size_t dim() const { return active.size(); }
};

Problem build_problem(const Dataset& ds, const MomentSpec& spec, const SolverConfig& cfg) {
    spec.validate(ds.dimension());
    Problem pb;
    pb.spec = spec;
    pb.engine = cfg.engine;
    pb.names = spec.names(ds.schema());
    pb.n0 = static_cast<double>(ds.n_control());
    const std::size_t p = spec.size();

    Dataset raw = moment_features(ds, spec);
    pb.orig_target = compute_target_moments(raw, MomentSpec::first_moments(p), cfg.engine).values;

    // Control-only range per feature decides which constraints are live.
    Reduction<std::vector<double>> range;
    range.identity.assign(2 * p, kNegInf);
    range.combine = [](std::vector<double> a, const std::vector<double>& b) {
        for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::max(a[i], b[i]);
        return a;
    };
    range.map = [p](const Shard& sh, std::size_t) {
        std::vector<double> acc(2 * p, kNegInf);
        for (std::size_t j = 0; j < p; ++j) {
            for (double v : sh.control.covariate(j)) {
                acc[j] = std::max(acc[j], -v);
                acc[p + j] = std::max(acc[p + j], v);
            }
        }
        return acc;
    };
    auto ext = run_reduction(raw, range, cfg.engine);

    if (cfg.standardize) {
        auto [scaled, rec] = standardize(raw, cfg.engine);
        pb.features = std::move(scaled);
        pb.mean = rec.means;
        pb.sd = rec.sds;
        for (std::size_t j = 0; j < p; ++j) {
            if (rec.zero_variance[j]) {
                pb.mean[j] = 0.0;
                pb.sd[j] = 1.0;
            }
        }
    } else {
        pb.features = std::move(raw);
        pb.mean.assign(p, 0.0);
        pb.sd.assign(p, 1.0);
    }

    pb.control_const.assign(p, 0.0);
    for (std::size_t j = 0; j < p; ++j) {
        const double lo = -ext[j], hi = ext[p + j];
        if (hi - lo <= 1e-12 * std::max(1.0, std::abs(hi))) {
            pb.control_const[j] = hi;
            pb.dropped.push_back(pb.names[j]);
            pb.dropped_index.push_back(j);
            const double gap = std::abs(pb.orig_target[j] - hi) / pb.sd[j];
            if (gap > cfg.tolerance) pb.infeasible.push_back(pb.names[j]);
        } else {
            pb.active.push_back(j);
            pb.target.push_back((pb.orig_target[j] - pb.mean[j]) / pb.sd[j]);
        }
    }
    pb.scratch.resize(pb.features.shard_count());
    return pb;
}

// Weighted control sums in solver coordinates for one evaluation.
struct Evaluation {
    double weight_sum = 0.0;            // sum of final weights
    std::vector<double> weighted_mean;  // per active moment: sum w z
    std::vector<double> residual;       // solver-coordinate residual vector
    std::vector<double> moment_gap;     // per active moment: weighted mean - target
    double residual_norm = 0.0;         // original-coordinate infinity norm: stopping rule and trace
    double residual_l2 = 0.0;           // Euclidean norm: oscillation detection
    double log_partition = 0.0;         // entropy balancing only
    double unit_scale = 1.0;            // scratch buffer value -> weight
};

// Infinity norm of sum w c(X) - target in the original moment coordinates,
// including moments dropped as constant and, for MS, the weight-sum row.
// Standardisation only conditions the iteration; the contract is on this.
// MS weights are renormalised on return, so the moments of the renormalised
// weights count too.
double original_inf_norm(const Problem& pb, const Evaluation& ev, bool sum_row) {
    const double s = ev.weight_sum;
    double m = sum_row ? std::abs(s - 1.0) : 0.0;
    for (std::size_t j : pb.dropped_index) {
        m = std::max(m, std::abs(pb.control_const[j] * s - pb.orig_target[j]));
        if (sum_row) m = std::max(m, std::abs(pb.control_const[j] - pb.orig_target[j]));
    }
    for (std::size_t k = 0; k < pb.dim(); ++k) {
        const std::size_t j = pb.active[k];
        m = std::max(m, std::abs(pb.mean[j] * (s - 1.0) + pb.sd[j] * ev.moment_gap[k]));
        if (sum_row) {
            const double normalised = s > 0.0 ? (ev.moment_gap[k] + pb.target[k] * (1.0 - s)) / s
                                              : std::numeric_limits<double>::infinity();
            m = std::max(m, std::abs(pb.sd[j] * normalised));
        }
    }
    return m;
}

Evaluation evaluate_eb(const Problem& pb, const std::vector<double>& xi) {
    const std::size_t a = pb.dim();
    const Dataset& F = pb.features;
    double top = run_reduction(F, max_reduction([&](const Shard& sh, std::size_t s) {
        auto& buf = pb.scratch[s];
        const std::size_t n = sh.control.rows();
        buf.assign(n, 0.0);
        for (std::size_t k = 0; k < a; ++k) {
            const double c = xi[k];
            auto col = sh.control.covariate(pb.active[k]);
            for (std::size_t i = 0; i < n; ++i) buf[i] -= c * col[i];
        }
        double m = kNegInf;
        for (double v : buf) m = std::max(m, v);
        return m;
    }), pb.engine);
    if (!std::isfinite(top)) throw SolverError("entropy weights are undefined (non-finite exponent)");

    auto acc = run_reduction(F, sum_reduction(a + 1, [&](const Shard& sh, std::size_t s) {
        auto& buf = pb.scratch[s];
        const std::size_t n = sh.control.rows();
        std::vector<double> out(a + 1, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            buf[i] = std::exp(buf[i] - top);
            out[0] += buf[i];
        }
        for (std::size_t k = 0; k < a; ++k) {
            auto col = sh.control.covariate(pb.active[k]);
            double t = 0.0;
            for (std::size_t i = 0; i < n; ++i) t += buf[i] * col[i];
            out[k + 1] = t;
        }
        return out;
    }), pb.engine);

    Evaluation ev;
    ev.weight_sum = 1.0;
    ev.log_partition = top + std::log(acc[0]);
    ev.unit_scale = 1.0 / acc[0];
    ev.weighted_mean.resize(a);
    ev.residual.resize(a);
    for (std::size_t k = 0; k < a; ++k) {
        ev.weighted_mean[k] = acc[k + 1] / acc[0];
        ev.residual[k] = ev.weighted_mean[k] - pb.target[k];
    }
    ev.moment_gap = ev.residual;
    ev.residual_norm = original_inf_norm(pb, ev, false);
    ev.residual_l2 = std::sqrt(std::inner_product(ev.residual.begin(), ev.residual.end(), ev.residual.begin(), 0.0));
    return ev;
}

// Mean-scaled projection: u_i = max(0, 1 - eta.(1, z_i)), weights u / N0.
Evaluation evaluate_ms(const Problem& pb, const std::vector<double>& eta) {
    const std::size_t a = pb.dim();
    auto acc = run_reduction(pb.features, sum_reduction(a + 1, [&](const Shard& sh, std::size_t s) {
        auto& buf = pb.scratch[s];
        const std::size_t n = sh.control.rows();
        buf.assign(n, 1.0 - eta[0]);
        std::vector<double> out(a + 1, 0.0);
        // Row blocks small enough that the second sweep over each block's
        // columns hits cache; accumulation order per column is unchanged.
        constexpr std::size_t kBlock = 2048;
        for (std::size_t lo = 0; lo < n; lo += kBlock) {
            const std::size_t hi = std::min(n, lo + kBlock);
            for (std::size_t k = 0; k < a; ++k) {
                const double c = eta[k + 1];
                auto col = sh.control.covariate(pb.active[k]);
                for (std::size_t i = lo; i < hi; ++i) buf[i] -= c * col[i];
            }
            for (std::size_t i = lo; i < hi; ++i) {
                buf[i] = std::max(0.0, buf[i]);
                out[0] += buf[i];
            }
            for (std::size_t k = 0; k < a; ++k) {
                auto col = sh.control.covariate(pb.active[k]);
                double t = out[k + 1];
                for (std::size_t i = lo; i < hi; ++i) t += buf[i] * col[i];
                out[k + 1] = t;
            }
        }
        return out;
    }), pb.engine);

    Evaluation ev;
    ev.weight_sum = acc[0] / pb.n0;
    ev.unit_scale = 1.0 / pb.n0;
    ev.weighted_mean.resize(a);
    ev.residual.resize(a + 1);
    ev.residual[0] = ev.weight_sum - 1.0;
    ev.moment_gap.resize(a);
    for (std::size_t k = 0; k < a; ++k) {
        ev.weighted_mean[k] = acc[k + 1] / pb.n0;
        ev.residual[k + 1] = ev.weighted_mean[k] - pb.target[k];
        ev.moment_gap[k] = ev.residual[k + 1];
    }
    ev.residual_norm = original_inf_norm(pb, ev, true);
    ev.residual_l2 = std::sqrt(std::inner_product(ev.residual.begin(), ev.residual.end(), ev.residual.begin(), 0.0));
    return ev;
}

// A flat residual can mean an infeasible target or a long stretch where the
// dual is linear (the active set of a sparse solution is changing). They
// are told apart by a separation certificate: with r the gap between the
// normalised weighted control mean and the target, min_i (z_i - t).r > 0
// proves the target lies outside the control hull. A target inside the hull
// makes that minimum <= 0. The check runs at the end of every stagnation
// window, so infeasible runs stop early even while the residual still
// creeps down.
bool target_separated(const Problem& pb, const Evaluation& ev) {
    const std::size_t a = pb.dim();
    if (a == 0 || !(ev.weight_sum > 0.0)) return false;
    std::vector<double> r(a);
    for (std::size_t k = 0; k < a; ++k) r[k] = ev.weighted_mean[k] / ev.weight_sum - pb.target[k];
    double offset = 0.0;
    for (std::size_t k = 0; k < a; ++k) offset += pb.target[k] * r[k];
    const double lowest = -run_reduction(pb.features, max_reduction([&](const Shard& sh, std::size_t) {
        const std::size_t n = sh.control.rows();
        std::vector<double> proj(n, -offset);
        for (std::size_t k = 0; k < a; ++k) {
            auto col = sh.control.covariate(pb.active[k]);
            for (std::size_t i = 0; i < n; ++i) proj[i] += col[i] * r[k];
        }
        double m = kNegInf;
        for (double v : proj) m = std::max(m, -v);
        return m;
    }), pb.engine);
    return lowest > 1e-10;
}

// Writes the per-unit weights left in the scratch buffers by the last
// evaluation, scaled by `scale`.
WeightVector collect_weights(const Problem& pb, double scale) {
    const Dataset& F = pb.features;
    WeightVector w;
    w.unit_ids = F.control_ids();
    w.weights.assign(F.n_control(), 0.0);
    for_each_shard(F, pb.engine, [&](const Shard& sh, std::size_t s) {
        const std::size_t off = F.control_offset(s);
        const auto& buf = pb.scratch[s];
        for (std::size_t i = 0; i < sh.control.rows(); ++i) w.weights[off + i] = buf[i] * scale;
    });
    return w;
}

std::vector<double> original_residuals(const Problem& pb, const Evaluation& ev) {
    const std::size_t p = pb.spec.size();
    std::vector<double> out(p);
    for (std::size_t j = 0; j < p; ++j) out[j] = pb.control_const[j] * ev.weight_sum - pb.orig_target[j];
    for (std::size_t k = 0; k < pb.dim(); ++k) {
        const std::size_t j = pb.active[k];
        out[j] = pb.mean[j] * (ev.weight_sum - 1.0) + pb.sd[j] * (ev.weighted_mean[k] - pb.target[k]);
    }
    return out;
}

std::vector<std::string> worst_moments(const Problem& pb, const std::vector<double>& resid) {
    std::vector<std::size_t> idx(resid.size());
    std::iota(idx.begin(), idx.end(), 0);
    // Rank by the solver-coordinate gap so moments on large scales do not dominate.
    auto scaled = [&](std::size_t j) { return std::abs(resid[j]) / pb.sd[j]; };
    std::stable_sort(idx.begin(), idx.end(), [&](auto x, auto y) { return scaled(x) > scaled(y); });
    std::vector<std::string> out;
    for (std::size_t i = 0; i < std::min<std::size_t>(5, idx.size()); ++i) out.push_back(pb.names[idx[i]]);
    return out;
}

// Shared stopping/decay bookkeeping for both solvers.
struct Monitor {
    const SolverConfig& base;
    std::vector<double> trace;
    // The infinity norm can creep upward under stable gradient steps, and
    // does so for hundreds of iterations while the active set of a sparse
    // solution changes; the Euclidean norm of the gradient cannot. Oscillation
    // and stagnation are therefore judged on it.
    std::vector<double> l2_trace;
    double first = 0.0;
    double anchor = std::numeric_limits<double>::infinity();
    std::size_t anchor_iter = 0;
    double best = std::numeric_limits<double>::infinity();
    std::size_t last_reaction = 0;
    double reaction_ref = std::numeric_limits<double>::infinity();
    std::size_t decays = 0;
    std::size_t restarts = 0;

    explicit Monitor(const SolverConfig& c) : base(c) {}

    // Returns true when the iterate is the best so far.
    bool record(double r, double l2, std::size_t k) {
        l2_trace.push_back(l2);
        if (!std::isfinite(r)) throw SolverError("solver produced a non-finite residual; try a smaller alpha");
        if (trace.empty()) first = r;
        trace.push_back(r);
        if (r > base.divergence_factor * std::max(first, 1e-300))
            throw SolverError("solver diverged (residual " + std::to_string(r) +
                              " exceeds 1e6 x initial); try a smaller alpha");
        if (l2 < anchor - base.stagnation_min_improvement) {
            anchor = l2;
            anchor_iter = k;
        }
        if (r < best) {
            best = r;
            return true;
        }
        return false;
    }

    bool stagnated(std::size_t k) const { return k - anchor_iter >= base.stagnation_window; }

    // Starts a fresh stagnation window at iteration k.
    void rearm(std::size_t k) {
        anchor = l2_trace.back();
        anchor_iter = k;
    }

    // Momentum alone makes the residual ripple even when alpha is well inside
    // the stable range, and halving alpha then only slows the run. So an
    // oscillation first just restarts the momentum; alpha decays when the
    // residual has made no net progress since the previous reaction.
    // Returns true when the momentum was reset.
    bool maybe_decay(DualState& st, SolverConfig& live, std::size_t k) {
        if (!live.decay_enabled || k - last_reaction < 4 || l2_trace.size() < 4) return false;
        const double now = l2_trace.back();
        if (now < reaction_ref) {
            SolverConfig probe = live;
            DualState scratch;
            if (!detect_oscillation_and_decay(scratch, l2_trace, probe)) return false;
            std::fill(st.velocity.begin(), st.velocity.end(), 0.0);
            ++restarts;
        } else {
            if (!detect_oscillation_and_decay(st, l2_trace, live)) return false;
            ++decays;
        }
        reaction_ref = now;
        last_reaction = k;
        return true;
    }
};

void fill_common(SolveResult& res, const Problem& pb, const Evaluation& ev, const Monitor& mon,
                 const SolverConfig& live, std::size_t iters) {
    res.residual_trace = mon.trace;
    res.iterations_used = iters;
    res.final_residual = ev.residual_norm;
    res.final_alpha = live.alpha;
    res.decay_events = mon.decays;
    res.moment_names = pb.names;
    res.moment_residuals = original_residuals(pb, ev);
    res.dropped_moments = pb.dropped;
    res.infeasible_moments = pb.infeasible;
    if (!pb.infeasible.empty()) res.converged = false;
    if (!res.converged) {
        res.worst_moments = pb.infeasible;
        for (auto& n : worst_moments(pb, res.moment_residuals)) {
            if (std::find(res.worst_moments.begin(), res.worst_moments.end(), n) == res.worst_moments.end())
                res.worst_moments.push_back(n);
        }
    }
}

std::vector<double> initial_point(const SolverConfig& cfg, std::size_t len, bool random) {
    if (cfg.initial_dual) {
        if (cfg.initial_dual->size() != len) throw ValidationError("initial dual has the wrong length");
        return *cfg.initial_dual;
    }
    std::vector<double> x(len, 0.0);
    if (random) {
        std::mt19937_64 rng(cfg.seed);
        std::normal_distribution<double> nd(0.0, 1.0);
        for (double& v : x) v = nd(rng);
    }
    return x;
}

}  // namespace

// ---------------------------------------------------------------------------

SolveResult solve_eb(const Dataset& ds, const MomentSpec& spec, const SolverConfig& cfg) {
    cfg.validate();
    Problem pb = build_problem(ds, spec, cfg);
    const std::size_t a = pb.dim();
    SolverConfig live = cfg;
    DualState st;
    st.xi = initial_point(cfg, a, cfg.random_init);
    st.velocity.assign(a, 0.0);
    Monitor mon(cfg);

    std::vector<double> best_xi = st.xi;
    Evaluation ev;
    SolveResult res;
    std::size_t k = 0;
    while (true) {
        ev = evaluate_eb(pb, st.xi);
        if (mon.record(ev.residual_norm, ev.residual_l2, k)) best_xi = st.xi;
        ++k;
        if (ev.residual_norm <= cfg.tolerance) {
            res.converged = true;
            break;
        }
        const bool window_end = k % cfg.stagnation_window == 0;
        if (mon.stagnated(k - 1) || window_end) {
            if (target_separated(pb, ev)) {
                res.stagnated = true;
                st.xi = best_xi;
                ev = evaluate_eb(pb, st.xi);
                break;
            }
            if (mon.stagnated(k - 1)) mon.rearm(k - 1);
        }
        if (k == cfg.max_iterations) break;
        mon.maybe_decay(st, live, k - 1);
        // The residual is minus the dual gradient.
        for (std::size_t j = 0; j < a; ++j) {
            st.velocity[j] = live.alpha * ev.residual[j] + cfg.momentum_beta * st.velocity[j];
            st.xi[j] += st.velocity[j];
        }
    }
    st.iteration = k;
    res.weights = collect_weights(pb, ev.unit_scale);
    res.internal_xi = st.xi;
    fill_common(res, pb, ev, mon, live, k);
    res.dual = st;
    res.dual.xi.assign(pb.spec.size(), 0.0);
    res.dual.velocity.assign(pb.spec.size(), 0.0);
    for (std::size_t i = 0; i < a; ++i) {
        const std::size_t j = pb.active[i];
        res.dual.xi[j] = st.xi[i] / pb.sd[j];
        res.dual.velocity[j] = st.velocity[i] / pb.sd[j];
    }
    return res;
}

SolveResult solve_ms(const Dataset& ds, const MomentSpec& spec, const SolverConfig& cfg) {
    cfg.validate();
    Problem pb = build_problem(ds, spec, cfg);
    const std::size_t a = pb.dim();
    SolverConfig live = cfg;
    DualState st;
    st.xi = initial_point(cfg, a + 1, false);
    std::vector<double> v_prev = st.xi;  // v^(k-1); equals xi^(0) so the first step has no momentum
    std::vector<double> v(a + 1);
    st.velocity.assign(a + 1, 0.0);
    st.beta_seq = 1.0;
    Monitor mon(cfg);

    std::vector<double> best_xi = st.xi;
    Evaluation ev;
    SolveResult res;
    std::size_t k = 0;
    while (true) {
        ev = evaluate_ms(pb, st.xi);
        if (mon.record(ev.residual_norm, ev.residual_l2, k)) best_xi = st.xi;
        ++k;
        if (ev.residual_norm <= cfg.tolerance) {
            res.converged = true;
            break;
        }
        const bool window_end = k % cfg.stagnation_window == 0;
        if (mon.stagnated(k - 1) || window_end) {
            if (target_separated(pb, ev)) {
                res.stagnated = true;
                st.xi = best_xi;
                ev = evaluate_ms(pb, st.xi);
                break;
            }
            if (mon.stagnated(k - 1)) mon.rearm(k - 1);
        }
        if (k == cfg.max_iterations) break;
        if (mon.maybe_decay(st, live, k - 1)) {
            // Zeroing the velocity restarts the acceleration sequence.
            st.beta_seq = 1.0;
            v_prev = st.xi;
        }
        for (std::size_t j = 0; j <= a; ++j) v[j] = st.xi[j] + live.alpha * ev.residual[j];
        const double beta_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * st.beta_seq * st.beta_seq));
        const double mom = (st.beta_seq - 1.0) / beta_next;
        for (std::size_t j = 0; j <= a; ++j) {
            st.velocity[j] = v[j] - v_prev[j];
            st.xi[j] = v[j] + mom * st.velocity[j];
        }
        st.beta_seq = beta_next;
        v_prev = v;
    }
    st.iteration = k;
    res.weights = collect_weights(pb, ev.unit_scale);
    res.internal_xi = st.xi;
    fill_common(res, pb, ev, mon, live, k);

    // Express the multipliers for the unscaled projection 1 - xi.(1, c).
    const std::size_t p = pb.spec.size();
    res.dual = st;
    res.dual.xi.assign(p + 1, 0.0);
    res.dual.velocity.assign(p + 1, 0.0);
    double shift = 0.0;
    for (std::size_t i = 0; i < a; ++i) {
        const std::size_t j = pb.active[i];
        res.dual.xi[j + 1] = st.xi[i + 1] / (pb.sd[j] * pb.n0);
        res.dual.velocity[j + 1] = st.velocity[i + 1] / (pb.sd[j] * pb.n0);
        shift += st.xi[i + 1] * pb.mean[j] / pb.sd[j];
    }
    res.dual.xi[0] = 1.0 - 1.0 / pb.n0 + (st.xi[0] - shift) / pb.n0;
    res.dual.velocity[0] = st.velocity[0] / pb.n0;

    const double total = res.weights.sum();
    if (std::abs(total - 1.0) <= cfg.tolerance && total > 0.0) {
        for (double& w : res.weights.weights) w /= total;
    } else {
        res.converged = false;
        if (res.worst_moments.empty()) res.worst_moments = worst_moments(pb, res.moment_residuals);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Direct evaluation helpers (no standardisation, all moments kept).

namespace {

Problem raw_problem(const Dataset& ds, const MomentSpec& spec, const EngineConfig& engine) {
    spec.validate(ds.dimension());
    Problem pb;
    pb.spec = spec;
    pb.engine = engine;
    pb.names = spec.names(ds.schema());
    pb.n0 = static_cast<double>(ds.n_control());
    const std::size_t p = spec.size();
    pb.features = moment_features(ds, spec);
    pb.active.resize(p);
    std::iota(pb.active.begin(), pb.active.end(), 0);
    pb.mean.assign(p, 0.0);
    pb.sd.assign(p, 1.0);
    pb.control_const.assign(p, 0.0);
    pb.target.assign(p, 0.0);
    pb.scratch.resize(pb.features.shard_count());
    return pb;
}

void check_finite(std::span<const double> xi) {
    for (double v : xi)
        if (!std::isfinite(v)) throw ValidationError("dual vector contains non-finite values");
}

}  // namespace

WeightVector eb_weights_from_dual(const Dataset& ds, std::span<const double> xi,
                                  const MomentSpec& spec, const EngineConfig& engine) {
    if (xi.size() != spec.size()) throw ValidationError("dual vector length must equal the moment count");
    check_finite(xi);
    Problem pb = raw_problem(ds, spec, engine);
    auto ev = evaluate_eb(pb, std::vector<double>(xi.begin(), xi.end()));
    return collect_weights(pb, ev.unit_scale);
}

std::vector<double> eb_dual_gradient(const Dataset& ds, std::span<const double> xi,
                                     const MomentSpec& spec, const TargetMoments& target,
                                     const EngineConfig& engine) {
    if (xi.size() != spec.size() || target.values.size() != spec.size())
        throw ValidationError("dual vector and target length must equal the moment count");
    check_finite(xi);
    Problem pb = raw_problem(ds, spec, engine);
    pb.target = target.values;
    auto ev = evaluate_eb(pb, std::vector<double>(xi.begin(), xi.end()));
    std::vector<double> g(spec.size());
    for (std::size_t j = 0; j < g.size(); ++j) g[j] = -ev.residual[j];
    return g;
}

double eb_dual_objective(const Dataset& ds, std::span<const double> xi, const MomentSpec& spec,
                         const TargetMoments& target, const EngineConfig& engine) {
    if (xi.size() != spec.size() || target.values.size() != spec.size())
        throw ValidationError("dual vector and target length must equal the moment count");
    check_finite(xi);
    Problem pb = raw_problem(ds, spec, engine);
    pb.target = target.values;
    auto ev = evaluate_eb(pb, std::vector<double>(xi.begin(), xi.end()));
    double dot = 0.0;
    for (std::size_t j = 0; j < xi.size(); ++j) dot += xi[j] * target.values[j];
    return ev.log_partition + dot;
}

WeightVector ms_weights_from_dual(const Dataset& ds, std::span<const double> xi,
                                  const MomentSpec& spec, const EngineConfig& engine) {
    if (xi.size() != spec.size() + 1)
        throw ValidationError("dual vector length must equal the moment count plus one");
    check_finite(xi);
    Problem pb = raw_problem(ds, spec, engine);
    evaluate_ms(pb, std::vector<double>(xi.begin(), xi.end()));
    return collect_weights(pb, 1.0);
}

std::vector<double> balance_residual(const Dataset& ds, const WeightVector& w, const MomentSpec& spec,
                                     const EngineConfig& engine) {
    if (w.size() != ds.n_control()) throw ValidationError("weight vector does not match control units");
    Dataset F = moment_features(ds, spec);
    const std::size_t p = spec.size();
    auto target = compute_target_moments(F, MomentSpec::first_moments(p), engine).values;
    auto acc = run_reduction(F, sum_reduction(p, [&](const Shard& sh, std::size_t s) {
        std::vector<double> out(p, 0.0);
        const std::size_t off = F.control_offset(s);
        for (std::size_t j = 0; j < p; ++j) {
            auto col = sh.control.covariate(j);
            double t = 0.0;
            for (std::size_t i = 0; i < col.size(); ++i) t += w.weights[off + i] * col[i];
            out[j] = t;
        }
        return out;
    }), engine);
    for (std::size_t j = 0; j < p; ++j) acc[j] -= target[j];
    return acc;
}

}  // namespace balancekit
