#include "balancekit/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "balancekit/errors.hpp"

namespace balancekit {

namespace {

std::vector<double> normalized(const WeightVector& w) {
    double s = w.sum();
    if (!(s > 0.0)) throw ValidationError("weights sum to zero");
    std::vector<double> out(w.weights);
    for (double& v : out) v /= s;
    return out;
}

void check_weights(const Dataset& ds, const WeightVector& w) {
    if (w.size() != ds.n_control())
        throw ValidationError("weight vector has " + std::to_string(w.size()) + " entries for " +
                              std::to_string(ds.n_control()) + " control units");
    for (double v : w.weights)
        if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("weights must be finite and nonnegative");
}

Reduction<std::vector<double>> vector_sum(std::size_t len,
                                          std::function<std::vector<double>(const Shard&, std::size_t)> map) {
    Reduction<std::vector<double>> r;
    r.identity.assign(len, 0.0);
    r.combine = add_vectors;
    r.map = std::move(map);
    return r;
}

// Per-column group moments under normalised control weights.
struct GroupMoments {
    std::vector<double> mean_t, mean_c, var_t, var_c;
    double sum_w2 = 0.0;
};

GroupMoments group_moments(const Dataset& F, const std::vector<double>& w, const EngineConfig& engine) {
    const std::size_t p = F.dimension();
    const double n1 = static_cast<double>(F.n_treated());
    auto first = run_reduction(F, vector_sum(2 * p + 1, [&](const Shard& sh, std::size_t s) {
        std::vector<double> acc(2 * p + 1, 0.0);
        const std::size_t off = F.control_offset(s);
        for (std::size_t j = 0; j < p; ++j) {
            for (double v : sh.treated.covariate(j)) acc[j] += v;
            auto c = sh.control.covariate(j);
            for (std::size_t i = 0; i < c.size(); ++i) acc[p + j] += w[off + i] * c[i];
        }
        for (std::size_t i = 0; i < sh.control.rows(); ++i) acc[2 * p] += w[off + i] * w[off + i];
        return acc;
    }), engine);
    GroupMoments g;
    g.mean_t.resize(p);
    g.mean_c.resize(p);
    for (std::size_t j = 0; j < p; ++j) {
        g.mean_t[j] = first[j] / n1;
        g.mean_c[j] = first[p + j];
    }
    g.sum_w2 = first[2 * p];
    auto second = run_reduction(F, vector_sum(2 * p, [&](const Shard& sh, std::size_t s) {
        std::vector<double> acc(2 * p, 0.0);
        const std::size_t off = F.control_offset(s);
        for (std::size_t j = 0; j < p; ++j) {
            for (double v : sh.treated.covariate(j)) acc[j] += (v - g.mean_t[j]) * (v - g.mean_t[j]);
            auto c = sh.control.covariate(j);
            for (std::size_t i = 0; i < c.size(); ++i)
                acc[p + j] += w[off + i] * (c[i] - g.mean_c[j]) * (c[i] - g.mean_c[j]);
        }
        return acc;
    }), engine);
    g.var_t.resize(p);
    g.var_c.resize(p);
    const double denom_c = 1.0 - g.sum_w2;
    for (std::size_t j = 0; j < p; ++j) {
        g.var_t[j] = n1 > 1 ? second[j] / (n1 - 1.0) : 0.0;
        g.var_c[j] = denom_c > 0.0 ? second[p + j] / denom_c : 0.0;
    }
    return g;
}

void smd_from_moments(const GroupMoments& g, SmdFamily& out) {
    const std::size_t p = g.mean_t.size();
    for (std::size_t j = 0; j < p; ++j) {
        const double delta = std::abs(g.mean_t[j] - g.mean_c[j]);
        const double scale = std::sqrt(0.5 * (g.var_t[j] + g.var_c[j]));
        if (scale > 0.0) {
            out.values.push_back(delta / scale);
            out.infinite.push_back(false);
        } else if (delta == 0.0) {
            out.values.push_back(0.0);
            out.infinite.push_back(false);
        } else {
            out.values.push_back(std::numeric_limits<double>::infinity());
            out.infinite.push_back(true);
        }
    }
}

bool is_binary_column(const Dataset& ds, std::size_t j) {
    for (std::size_t s = 0; s < ds.shard_count(); ++s) {
        const Shard& sh = ds.shard(s);
        for (const ColumnBlock* b : {&sh.control, &sh.treated})
            for (double v : b->covariate(j))
                if (v != 0.0 && v != 1.0) return false;
    }
    return true;
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double weighted_variance(std::span<const double> x, std::span<const double> w) {
    double sw = 0.0;
    for (double v : w) sw += v;
    double mean = 0.0, w2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mean += w[i] / sw * x[i];
        w2 += (w[i] / sw) * (w[i] / sw);
    }
    double ss = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) ss += w[i] / sw * (x[i] - mean) * (x[i] - mean);
    return w2 < 1.0 ? ss / (1.0 - w2) : 0.0;
}

std::vector<double> gather_covariate(const Dataset& ds, std::size_t covariate, bool treated) {
    std::vector<double> out;
    out.reserve(treated ? ds.n_treated() : ds.n_control());
    for (std::size_t s = 0; s < ds.shard_count(); ++s) {
        auto col = (treated ? ds.shard(s).treated : ds.shard(s).control).covariate(covariate);
        out.insert(out.end(), col.begin(), col.end());
    }
    return out;
}

std::vector<double> gather_outcome(const Dataset& ds, std::size_t outcome, bool treated) {
    std::vector<double> out;
    out.reserve(treated ? ds.n_treated() : ds.n_control());
    for (std::size_t s = 0; s < ds.shard_count(); ++s) {
        auto col = (treated ? ds.shard(s).treated : ds.shard(s).control).outcome(outcome);
        out.insert(out.end(), col.begin(), col.end());
    }
    return out;
}

SmdFamily smd(const Dataset& ds, const WeightVector& w, SmdKind kind, const EngineConfig& engine) {
    check_weights(ds, w);
    const auto wn = normalized(w);
    const std::size_t d = ds.dimension();
    SmdFamily out;
    std::vector<Moment> moments;
    switch (kind) {
        case SmdKind::covariate:
            for (std::size_t j = 0; j < d; ++j) moments.push_back(Moment::first(j));
            break;
        case SmdKind::square:
            for (std::size_t j = 0; j < d; ++j)
                if (!is_binary_column(ds, j)) moments.push_back(Moment::second(j));
            break;
        case SmdKind::interaction:
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = i + 1; j < d; ++j) moments.push_back(Moment::cross(i, j));
            break;
    }
    // Chunked so pairwise products never materialise all at once.
    constexpr std::size_t kChunk = 128;
    for (std::size_t start = 0; start < moments.size(); start += kChunk) {
        const std::size_t stop = std::min(moments.size(), start + kChunk);
        MomentSpec spec(std::vector<Moment>(moments.begin() + static_cast<std::ptrdiff_t>(start),
                                            moments.begin() + static_cast<std::ptrdiff_t>(stop)));
        Dataset F = moment_features(ds, spec);
        auto names = spec.names(ds.schema());
        out.names.insert(out.names.end(), names.begin(), names.end());
        smd_from_moments(group_moments(F, wn, engine), out);
    }
    return out;
}

double mean_smd(const Dataset& ds, const WeightVector& w, const EngineConfig& engine) {
    return mean_of(smd(ds, w, SmdKind::covariate, engine).values);
}

VarianceRatio variance_ratio(const Dataset& ds, const WeightVector& w, std::size_t covariate) {
    check_weights(ds, w);
    if (covariate >= ds.dimension()) throw ValidationError("covariate index out of range");
    auto xt = gather_covariate(ds, covariate, true);
    auto xc = gather_covariate(ds, covariate, false);
    std::vector<double> ones(xt.size(), 1.0);
    const double vt = weighted_variance(xt, ones);
    const double vc = weighted_variance(xc, w.weights);
    if (!(vt > 0.0)) return {0.0, true};
    return {std::abs(1.0 - vc / vt), false};
}

double overlap_coefficient(const Dataset& ds, const WeightVector& w, std::size_t covariate,
                           std::optional<std::size_t> bins) {
    check_weights(ds, w);
    if (covariate >= ds.dimension()) throw ValidationError("covariate index out of range");
    auto xt = gather_covariate(ds, covariate, true);
    auto xc = gather_covariate(ds, covariate, false);
    const auto wn = normalized(w);

    std::vector<double> pooled(xt);
    pooled.insert(pooled.end(), xc.begin(), xc.end());
    const auto [lo_it, hi_it] = std::minmax_element(pooled.begin(), pooled.end());
    const double lo = *lo_it, hi = *hi_it;
    if (!(hi > lo)) return 0.0;  // every value identical: full overlap

    std::size_t nb;
    if (bins) {
        if (*bins < 1) throw ValidationError("bin count must be positive");
        nb = *bins;
    } else {
        const double iqr = quantile(pooled, 0.75) - quantile(pooled, 0.25);
        const double width = 2.0 * iqr / std::cbrt(static_cast<double>(pooled.size()));
        nb = 10;
        if (width > 0.0) {
            const double want = std::ceil((hi - lo) / width);
            nb = static_cast<std::size_t>(std::clamp(want, 10.0, 10000.0));
        }
    }
    const double width = (hi - lo) / static_cast<double>(nb);
    auto bin_of = [&](double x) {
        auto b = static_cast<std::size_t>((x - lo) / width);
        return std::min(b, nb - 1);  // last bin is closed on the right
    };
    std::vector<double> pt(nb, 0.0), pc(nb, 0.0);
    for (double x : xt) pt[bin_of(x)] += 1.0 / static_cast<double>(xt.size());
    for (std::size_t i = 0; i < xc.size(); ++i) pc[bin_of(xc[i])] += wn[i];
    double ovl = 0.0;
    for (std::size_t b = 0; b < nb; ++b) ovl += std::min(pt[b], pc[b]);
    return std::clamp(1.0 - ovl, 0.0, 1.0);
}

double ks_distance(const Dataset& ds, const WeightVector& w, std::size_t covariate) {
    check_weights(ds, w);
    if (covariate >= ds.dimension()) throw ValidationError("covariate index out of range");
    auto xt = gather_covariate(ds, covariate, true);
    auto xc = gather_covariate(ds, covariate, false);
    const auto wn = normalized(w);
    std::sort(xt.begin(), xt.end());
    std::vector<std::size_t> order(xc.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return xc[a] < xc[b]; });

    const double n1 = static_cast<double>(xt.size());
    std::size_t it = 0, ic = 0;
    double ft = 0.0, fc = 0.0, best = 0.0;
    // Sweep distinct values in increasing order; both CDFs are evaluated
    // after absorbing every point equal to the current value.
    while (it < xt.size() || ic < order.size()) {
        double x = std::numeric_limits<double>::infinity();
        if (it < xt.size()) x = xt[it];
        if (ic < order.size()) x = std::min(x, xc[order[ic]]);
        while (it < xt.size() && xt[it] == x) ++it;
        while (ic < order.size() && xc[order[ic]] == x) fc += wn[order[ic++]];
        ft = static_cast<double>(it) / n1;
        best = std::max(best, std::abs(ft - fc));
    }
    return std::min(best, 1.0);
}

double mahalanobis_balance(const Dataset& ds, const WeightVector& w, const EngineConfig& engine) {
    check_weights(ds, w);
    const std::size_t d = ds.dimension();
    const double n = static_cast<double>(ds.size());
    if (d > ds.size() - 1)
        throw ValidationError("Mahalanobis balance needs more units than covariates (d = " + std::to_string(d) +
                              "); reduce the covariate set");
    const auto wn = normalized(w);
    GroupMoments g = group_moments(ds, wn, engine);

    // Pooled (both groups, unweighted) covariance.
    auto sums = run_reduction(ds, vector_sum(d, [&](const Shard& sh, std::size_t) {
        std::vector<double> acc(d, 0.0);
        for (std::size_t j = 0; j < d; ++j)
            for (const ColumnBlock* b : {&sh.control, &sh.treated})
                for (double v : b->covariate(j)) acc[j] += v;
        return acc;
    }), engine);
    for (double& v : sums) v /= n;
    auto cross = run_reduction(ds, vector_sum(d * d, [&](const Shard& sh, std::size_t) {
        std::vector<double> acc(d * d, 0.0);
        for (const ColumnBlock* b : {&sh.control, &sh.treated}) {
            for (std::size_t i = 0; i < d; ++i) {
                auto xi = b->covariate(i);
                for (std::size_t j = i; j < d; ++j) {
                    auto xj = b->covariate(j);
                    double t = 0.0;
                    for (std::size_t r = 0; r < xi.size(); ++r) t += (xi[r] - sums[i]) * (xj[r] - sums[j]);
                    acc[i * d + j] += t;
                }
            }
        }
        return acc;
    }), engine);
    Eigen::MatrixXd S(d, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i; j < d; ++j) S(i, j) = S(j, i) = cross[i * d + j] / (n - 1.0);
    Eigen::VectorXd diff(d);
    for (std::size_t j = 0; j < d; ++j) diff(j) = g.mean_t[j] - g.mean_c[j];

    Eigen::LDLT<Eigen::MatrixXd> ldlt(S);
    const double scale = std::max(1.0, S.diagonal().cwiseAbs().maxCoeff());
    const auto& D = ldlt.vectorD();
    const bool near_singular = ldlt.info() != Eigen::Success || D.minCoeff() <= 1e-12 * scale;
    if (near_singular) {
        S.diagonal().array() += 1e-10 * scale;
        ldlt.compute(S);
    }
    return std::max(0.0, diff.dot(ldlt.solve(diff)));
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw ValidationError("quantile of an empty sample");
    std::sort(values.begin(), values.end());
    const double h = (static_cast<double>(values.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

StabilityReport stability(const WeightVector& w) {
    if (w.size() == 0) throw ValidationError("empty weight vector");
    const auto wn = normalized(w);
    const double n = static_cast<double>(wn.size());
    StabilityReport r;
    const double mean = 1.0 / n;
    double ss = 0.0, sq = 0.0;
    for (double v : wn) {
        ss += (v - mean) * (v - mean);
        sq += v * v;
    }
    r.sd_normalized = wn.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    r.max_weight = *std::max_element(wn.begin(), wn.end());
    r.p99_weight = quantile(wn, 0.99);
    r.ess = std::clamp(1.0 / sq, 1.0, n);
    r.ess_ratio = r.ess / n;
    return r;
}

BalanceReport balance_report(const Dataset& ds, const WeightVector& w, const DiagnosticsOptions& options) {
    check_weights(ds, w);
    const std::size_t d = ds.dimension();
    const EngineConfig& engine = options.engine;
    BalanceReport rep;
    rep.thresholds = options.thresholds;
    rep.covariates = ds.schema().covariates;
    rep.smd = smd(ds, w, SmdKind::covariate, engine);
    rep.smd_squares = smd(ds, w, SmdKind::square, engine);
    const bool want_inter = options.interactions.value_or(d <= 100);
    if (want_inter && d >= 2) rep.smd_interactions = smd(ds, w, SmdKind::interaction, engine);

    rep.variance_ratio.resize(d);
    rep.variance_ratio_flagged.resize(d);
    rep.overlap.resize(d);
    rep.ks.resize(d);
    std::vector<VarianceRatio> vr(d);
    parallel_for(d, engine.worker_count, [&](std::size_t j) {
        vr[j] = variance_ratio(ds, w, j);
        rep.overlap[j] = overlap_coefficient(ds, w, j, options.overlap_bins);
        rep.ks[j] = ks_distance(ds, w, j);
    });
    for (std::size_t j = 0; j < d; ++j) {
        rep.variance_ratio[j] = vr[j].value;
        rep.variance_ratio_flagged[j] = vr[j].flagged;
    }
    try {
        rep.mahalanobis = mahalanobis_balance(ds, w, engine);
    } catch (const ValidationError& e) {
        rep.mahalanobis_error = e.what();
    }

    auto& s = rep.summary;
    s.smd = mean_of(rep.smd.values);
    s.smd_squares = mean_of(rep.smd_squares.values);
    if (!rep.smd_interactions.values.empty()) s.smd_interactions = mean_of(rep.smd_interactions.values);
    std::vector<double> vr_kept;
    for (std::size_t j = 0; j < d; ++j)
        if (!rep.variance_ratio_flagged[j]) vr_kept.push_back(rep.variance_ratio[j]);
    s.variance_ratio = mean_of(vr_kept);
    s.overlap = mean_of(rep.overlap);
    s.ks = mean_of(rep.ks);
    s.mahalanobis = rep.mahalanobis;

    const Thresholds& t = rep.thresholds;
    auto check = [&](const char* name, double v, double limit) {
        if (!(v <= limit)) rep.failing_metrics.emplace_back(name);
    };
    check("smd", s.smd, t.smd);
    check("smd_squares", s.smd_squares, t.smd);
    if (s.smd_interactions) check("smd_interactions", *s.smd_interactions, t.smd);
    check("variance_ratio", s.variance_ratio, t.variance_ratio);
    check("overlap", s.overlap, t.overlap);
    check("ks", s.ks, t.ks);
    if (s.mahalanobis) check("mahalanobis", *s.mahalanobis, t.mahalanobis);
    for (std::size_t j = 0; j < d; ++j)
        if (!(rep.smd.values[j] <= t.smd)) rep.failing_covariates.push_back(rep.covariates[j]);
    return rep;
}

}  // namespace balancekit
