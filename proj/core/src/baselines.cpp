#include "balancekit/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <Eigen/Dense>

#include "balancekit/diagnostics.hpp"
#include "balancekit/errors.hpp"

namespace balancekit {

namespace {

Reduction<std::vector<double>> vector_sum(std::size_t len,
                                          std::function<std::vector<double>(const Shard&, std::size_t)> map) {
    Reduction<std::vector<double>> r;
    r.identity.assign(len, 0.0);
    r.combine = add_vectors;
    r.map = std::move(map);
    return r;
}

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Fold labels per shard, separately for control and treated rows.
struct FoldMap {
    std::vector<std::vector<int>> control;
    std::vector<std::vector<int>> treated;
};

FoldMap assign_folds(const Dataset& ds, std::size_t k, std::uint64_t seed) {
    FoldMap fm;
    fm.control.resize(ds.shard_count());
    fm.treated.resize(ds.shard_count());
    for (std::size_t s = 0; s < ds.shard_count(); ++s) {
        fm.control[s].assign(ds.shard(s).control.rows(), -1);
        fm.treated[s].assign(ds.shard(s).treated.rows(), -1);
    }
    if (k == 0) return fm;
    std::mt19937_64 rng(seed);
    // Stratified: each group is shuffled and dealt round-robin into folds.
    for (bool treated : {false, true}) {
        const std::size_t n = treated ? ds.n_treated() : ds.n_control();
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<int> label(n);
        for (std::size_t i = 0; i < n; ++i) label[perm[i]] = static_cast<int>(i % k);
        for (std::size_t s = 0; s < ds.shard_count(); ++s) {
            const std::size_t off = treated ? ds.treated_offset(s) : ds.control_offset(s);
            auto& dst = treated ? fm.treated[s] : fm.control[s];
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = label[off + i];
        }
    }
    return fm;
}

struct LogisticFit {
    std::vector<double> b;  // standardized coordinates, intercept first
    std::size_t iterations = 0;
};

// Elastic-net logistic regression by proximal Newton: each outer step is one
// engine pass for loss, gradient and Hessian, then coordinate descent on the
// penalised quadratic model and a backtracking line search. Units whose fold
// equals `holdout` are excluded.
LogisticFit fit_fold(const Dataset& Z, const std::vector<bool>& usable, const FoldMap& fm, int holdout,
                     const Regularization& reg, const LogisticOptions& opt) {
    const std::size_t d = Z.dimension();
    const std::size_t p = d + 1;

    double n_train = 0.0, n_treat = 0.0;
    for (std::size_t s = 0; s < Z.shard_count(); ++s) {
        for (int f : fm.control[s]) n_train += f != holdout || holdout < 0;
        for (int f : fm.treated[s]) {
            const bool in = f != holdout || holdout < 0;
            n_train += in;
            n_treat += in;
        }
    }
    if (n_treat == 0.0 || n_treat == n_train) throw SolverError("a training fold lacks one of the groups");
    const double lambda = std::isinf(reg.C) ? 0.0 : 1.0 / (reg.C * n_train);
    const double l2 = lambda * (1.0 - reg.l1_ratio);
    const double l1 = lambda * reg.l1_ratio;

    // Mean loss, gradient and (optionally) upper-triangular Hessian:
    // [loss | g (p) | H (p*p)].
    auto pass = [&](const std::vector<double>& b, bool hessian) {
        const std::size_t len = 1 + p + (hessian ? p * p : 0);
        auto acc = run_reduction(Z, vector_sum(len, [&](const Shard& sh, std::size_t s) {
            std::vector<double> out(len, 0.0);
            for (int t = 0; t < 2; ++t) {
                const ColumnBlock& blk = t ? sh.treated : sh.control;
                const auto& folds = t ? fm.treated[s] : fm.control[s];
                const std::size_t n = blk.rows();
                std::vector<double> eta(n, b[0]);
                for (std::size_t j = 0; j < d; ++j) {
                    if (!usable[j]) continue;
                    auto col = blk.covariate(j);
                    for (std::size_t i = 0; i < n; ++i) eta[i] += b[j + 1] * col[i];
                }
                std::vector<double> r(n, 0.0), h(n, 0.0);
                for (std::size_t i = 0; i < n; ++i) {
                    if (holdout >= 0 && folds[i] == holdout) continue;
                    out[0] += softplus(eta[i]) - t * eta[i];
                    const double pr = sigmoid(eta[i]);
                    r[i] = pr - t;
                    h[i] = pr * (1.0 - pr);
                    out[1] += r[i];
                }
                for (std::size_t j = 0; j < d; ++j) {
                    if (!usable[j]) continue;
                    auto col = blk.covariate(j);
                    double g = 0.0;
                    for (std::size_t i = 0; i < n; ++i) g += r[i] * col[i];
                    out[j + 2] += g;
                }
                if (!hessian) continue;
                double* H = &out[1 + p];
                auto column = [&](std::size_t a) -> std::span<const double> {
                    return a == 0 ? std::span<const double>() : blk.covariate(a - 1);
                };
                for (std::size_t a = 0; a < p; ++a) {
                    if (a > 0 && !usable[a - 1]) continue;
                    auto ca = column(a);
                    for (std::size_t c = a; c < p; ++c) {
                        if (c > 0 && !usable[c - 1]) continue;
                        auto cc = column(c);
                        double v = 0.0;
                        for (std::size_t i = 0; i < n; ++i)
                            v += h[i] * (a ? ca[i] : 1.0) * (c ? cc[i] : 1.0);
                        H[a * p + c] += v;
                    }
                }
            }
            return out;
        }), opt.engine);
        for (double& v : acc) v /= n_train;
        return acc;
    };
    auto penalty = [&](const std::vector<double>& b) {
        double s2 = 0.0, s1 = 0.0;
        for (std::size_t j = 1; j < p; ++j) {
            s2 += b[j] * b[j];
            s1 += std::abs(b[j]);
        }
        return 0.5 * l2 * s2 + l1 * s1;
    };
    auto soft = [](double z, double k) { return std::copysign(std::max(0.0, std::abs(z) - k), z); };
    // Optimality measure: the unit-step proximal-gradient mapping.
    auto mapping = [&](const std::vector<double>& b, const std::vector<double>& f) {
        double m = std::abs(f[1]);
        for (std::size_t j = 1; j < p; ++j) {
            if (!usable[j - 1]) continue;
            const double z = b[j] - f[j + 1];
            m = std::max(m, std::abs(b[j] - soft(z, l1) / (1.0 + l2)));
        }
        return m;
    };

    std::vector<double> b(p, 0.0);
    b[0] = std::log(n_treat / (n_train - n_treat));
    auto f = pass(b, true);
    double obj = f[0] + penalty(b);
    double gm = mapping(b, f);
    for (std::size_t it = 1; it <= opt.max_iterations; ++it) {
        if (gm <= opt.tolerance) return {b, it - 1};
        const double* H = &f[1 + p];
        auto hess = [&](std::size_t a, std::size_t c) { return a <= c ? H[a * p + c] : H[c * p + a]; };

        // Coordinate descent on g'D + D'HD/2 + penalty(b + D).
        std::vector<double> nb = b;
        std::vector<double> hd(p, 0.0);  // H * (nb - b)
        for (int sweep = 0; sweep < 1000; ++sweep) {
            double change = 0.0;
            for (std::size_t j = 0; j < p; ++j) {
                if (j > 0 && !usable[j - 1]) continue;
                const double hjj = hess(j, j);
                const double c = f[j + 1] + hd[j] - hjj * (nb[j] - b[j]);
                const double v = j == 0 ? b[0] - c / std::max(hjj, 1e-12)
                                        : soft(hjj * b[j] - c, l1) / std::max(hjj + l2, 1e-12);
                const double dv = v - nb[j];
                if (dv == 0.0) continue;
                for (std::size_t a = 0; a < p; ++a) hd[a] += hess(a, j) * dv;
                nb[j] = v;
                change = std::max(change, std::abs(dv));
            }
            if (change < 1e-13) break;
        }

        double step = 1.0;
        std::vector<double> trial(p);
        std::vector<double> ft;
        double obj_t = 0.0;
        while (true) {
            for (std::size_t j = 0; j < p; ++j) trial[j] = b[j] + step * (nb[j] - b[j]);
            ft = pass(trial, false);
            obj_t = ft[0] + penalty(trial);
            if (obj_t <= obj + 1e-15 * std::abs(obj)) break;
            step *= 0.5;
            if (step < 1e-12) break;
        }
        if (step < 1e-12) {
            // No descent possible at this precision: report where we stand.
            gm = mapping(b, f);
            if (gm <= opt.tolerance) return {b, it};
            throw SolverError("logistic regression stalled (proximal gradient norm " + std::to_string(gm) + ")");
        }
        b = trial;
        obj = obj_t;
        f = pass(b, true);
        gm = mapping(b, f);
    }
    throw SolverError("logistic regression did not converge in " + std::to_string(opt.max_iterations) +
                      " iterations (proximal gradient norm " + std::to_string(gm) + ")");
}

std::vector<double> clip_scores(std::vector<double> v) {
    for (double& e : v) e = std::clamp(e, kScoreClip, 1.0 - kScoreClip);
    return v;
}

}  // namespace

PropensityModel fit_logistic(const Dataset& ds, const Regularization& reg, std::size_t folds,
                             const LogisticOptions& options) {
    if (!(reg.C > 0.0)) throw ValidationError("C must be positive");
    if (!(reg.l1_ratio >= 0.0 && reg.l1_ratio <= 1.0)) throw ValidationError("l1_ratio must lie in [0, 1]");
    if (folds == 1) throw ValidationError("cross-fitting needs at least 2 folds (0 disables it)");
    if (folds > ds.n_treated() || folds > ds.n_control())
        throw ValidationError("more folds than units in a group");

    auto [Z, scaling] = standardize(ds, options.engine);
    const std::size_t d = ds.dimension();
    std::vector<bool> usable(d);
    for (std::size_t j = 0; j < d; ++j) usable[j] = !scaling.zero_variance[j];
    const FoldMap fm = assign_folds(Z, folds, options.fold_seed);

    PropensityModel model;
    model.regularization = reg;
    model.folds = folds;
    model.coefficients.assign(d + 1, 0.0);
    model.control_scores.assign(ds.n_control(), 0.0);
    model.treated_scores.assign(ds.n_treated(), 0.0);

    const std::size_t n_models = folds == 0 ? 1 : folds;
    for (std::size_t f = 0; f < n_models; ++f) {
        const int holdout = folds == 0 ? -1 : static_cast<int>(f);
        LogisticFit fit = fit_fold(Z, usable, fm, holdout, reg, options);
        model.iterations += fit.iterations;
        // Back to the original covariate scale.
        std::vector<double> orig(d + 1, 0.0);
        orig[0] = fit.b[0];
        for (std::size_t j = 0; j < d; ++j) {
            if (!usable[j]) continue;
            orig[j + 1] = fit.b[j + 1] / scaling.sds[j];
            orig[0] -= fit.b[j + 1] * scaling.means[j] / scaling.sds[j];
        }
        for (std::size_t j = 0; j <= d; ++j) model.coefficients[j] += orig[j] / static_cast<double>(n_models);

        for_each_shard(Z, options.engine, [&](const Shard& sh, std::size_t s) {
            for (int t = 0; t < 2; ++t) {
                const ColumnBlock& blk = t ? sh.treated : sh.control;
                const auto& fl = t ? fm.treated[s] : fm.control[s];
                auto& dst = t ? model.treated_scores : model.control_scores;
                const std::size_t off = t ? Z.treated_offset(s) : Z.control_offset(s);
                for (std::size_t i = 0; i < blk.rows(); ++i) {
                    if (holdout >= 0 && fl[i] != holdout) continue;
                    double eta = fit.b[0];
                    for (std::size_t j = 0; j < d; ++j)
                        if (usable[j]) eta += fit.b[j + 1] * blk.covariate(j)[i];
                    dst[off + i] = sigmoid(eta);
                }
            }
        });
    }
    model.control_scores = clip_scores(std::move(model.control_scores));
    model.treated_scores = clip_scores(std::move(model.treated_scores));
    return model;
}

WeightVector ipw_weights(const Dataset& ds, const PropensityModel& model) {
    if (model.control_scores.size() != ds.n_control())
        throw ValidationError("propensity scores do not cover the control units");
    WeightVector w;
    w.unit_ids = ds.control_ids();
    w.weights.resize(ds.n_control());
    double total = 0.0;
    for (std::size_t i = 0; i < w.weights.size(); ++i) {
        const double e = std::clamp(model.control_scores[i], kScoreClip, 1.0 - kScoreClip);
        w.weights[i] = e / (1.0 - e);
        total += w.weights[i];
    }
    for (double& v : w.weights) v /= total;
    return w;
}

TuningResult tune_ipw(const Dataset& ds, const TuningGrid& grid, const LogisticOptions& options) {
    std::vector<TuningPoint> points;
    for (std::size_t k : grid.folds)
        for (double C : grid.C)
            for (double l : grid.l1_ratio) points.push_back({k, C, l, 0.0, false, {}});
    if (points.empty()) throw ValidationError("tuning grid is empty");

    std::vector<PropensityModel> models(points.size());
    std::vector<WeightVector> weights(points.size());
    // Grid points are independent fits; each fit's own passes run serially
    // so the grid is the unit of parallelism.
    LogisticOptions inner = options;
    inner.engine.worker_count = 1;
    parallel_for(points.size(), options.engine.worker_count, [&](std::size_t g) {
        auto& pt = points[g];
        try {
            models[g] = fit_logistic(ds, {pt.C, pt.l1_ratio}, pt.folds, inner);
            weights[g] = ipw_weights(ds, models[g]);
            pt.mean_smd = mean_smd(ds, weights[g], inner.engine);
        } catch (const Error& e) {
            pt.failed = true;
            pt.error = e.what();
        }
    });

    std::size_t best = points.size();
    auto better = [&](const TuningPoint& a, const TuningPoint& b) {
        const double tol = 1e-12 * std::max(1.0, std::abs(b.mean_smd));
        if (a.mean_smd < b.mean_smd - tol) return true;
        if (a.mean_smd > b.mean_smd + tol) return false;
        if (a.C != b.C) return a.C > b.C;
        if (a.l1_ratio != b.l1_ratio) return a.l1_ratio < b.l1_ratio;
        return a.folds < b.folds;
    };
    for (std::size_t g = 0; g < points.size(); ++g) {
        if (points[g].failed || !std::isfinite(points[g].mean_smd)) continue;
        if (best == points.size() || better(points[g], points[best])) best = g;
    }
    if (best == points.size()) throw SolverError("every propensity grid point failed to fit");
    TuningResult out;
    out.model = std::move(models[best]);
    out.weights = std::move(weights[best]);
    out.grid = std::move(points);
    out.selected = best;
    return out;
}

OutcomeModel fit_outcome_model(const Dataset& ds, const EngineConfig& engine) {
    const std::size_t d = ds.dimension(), m = ds.outcome_count();
    const std::size_t p = d + 1;
    const double n0 = static_cast<double>(ds.n_control());

    // Control-only centring keeps the normal equations well scaled.
    auto sums = run_reduction(ds, vector_sum(d, [&](const Shard& sh, std::size_t) {
        std::vector<double> acc(d, 0.0);
        for (std::size_t j = 0; j < d; ++j)
            for (double v : sh.control.covariate(j)) acc[j] += v;
        return acc;
    }), engine);
    std::vector<double> mu(d);
    for (std::size_t j = 0; j < d; ++j) mu[j] = sums[j] / n0;
    auto ss = run_reduction(ds, vector_sum(d, [&](const Shard& sh, std::size_t) {
        std::vector<double> acc(d, 0.0);
        for (std::size_t j = 0; j < d; ++j)
            for (double v : sh.control.covariate(j)) acc[j] += (v - mu[j]) * (v - mu[j]);
        return acc;
    }), engine);
    std::vector<double> sd(d);
    for (std::size_t j = 0; j < d; ++j) {
        sd[j] = std::sqrt(ss[j] / n0);
        if (!(sd[j] > 1e-12 * std::max(1.0, std::abs(mu[j])))) sd[j] = 0.0;
    }

    // [Z'Z (p*p) | Z'Y (p*m)] with Z = (1, (x - mu) / sd).
    const std::size_t len = p * p + p * m;
    auto acc = run_reduction(ds, vector_sum(len, [&](const Shard& sh, std::size_t) {
        std::vector<double> out(len, 0.0);
        const ColumnBlock& b = sh.control;
        const std::size_t n = b.rows();
        std::vector<std::vector<double>> z(p, std::vector<double>(n, 0.0));
        std::fill(z[0].begin(), z[0].end(), 1.0);
        for (std::size_t j = 0; j < d; ++j) {
            if (sd[j] == 0.0) continue;
            auto col = b.covariate(j);
            for (std::size_t i = 0; i < n; ++i) z[j + 1][i] = (col[i] - mu[j]) / sd[j];
        }
        for (std::size_t a = 0; a < p; ++a) {
            for (std::size_t c = a; c < p; ++c) {
                double t = 0.0;
                for (std::size_t i = 0; i < n; ++i) t += z[a][i] * z[c][i];
                out[a * p + c] = t;
            }
            for (std::size_t k = 0; k < m; ++k) {
                auto y = b.outcome(k);
                double t = 0.0;
                for (std::size_t i = 0; i < n; ++i) t += z[a][i] * y[i];
                out[p * p + a * m + k] = t;
            }
        }
        return out;
    }), engine);

    Eigen::MatrixXd G(p, p);
    for (std::size_t a = 0; a < p; ++a)
        for (std::size_t c = a; c < p; ++c) G(a, c) = G(c, a) = acc[a * p + c] / n0;
    Eigen::MatrixXd R(p, m);
    for (std::size_t a = 0; a < p; ++a)
        for (std::size_t k = 0; k < m; ++k) R(a, k) = acc[p * p + a * m + k] / n0;
    // Dropped (constant) columns are all zero; pin them with a unit diagonal.
    for (std::size_t j = 0; j < d; ++j)
        if (sd[j] == 0.0) G(j + 1, j + 1) = 1.0;

    OutcomeModel model;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(G);
    const bool deficient =
        ldlt.info() != Eigen::Success || ldlt.vectorD().minCoeff() <= 1e-10 * ldlt.vectorD().cwiseAbs().maxCoeff();
    if (deficient) {
        G.diagonal().array() += 1e-8;
        ldlt.compute(G);
    }
    Eigen::MatrixXd B = ldlt.solve(R);
    for (std::size_t k = 0; k < m; ++k) {
        std::vector<double> coef(p, 0.0);
        coef[0] = B(0, k);
        for (std::size_t j = 0; j < d; ++j) {
            if (sd[j] == 0.0) continue;
            coef[j + 1] = B(j + 1, k) / sd[j];
            coef[0] -= B(j + 1, k) * mu[j] / sd[j];
        }
        model.coefficients.push_back(std::move(coef));
        model.ridge_applied.push_back(deficient);
    }
    return model;
}

double dr_correct(const Dataset& ds, const WeightVector& w, std::size_t outcome, const OutcomeModel& model) {
    if (outcome >= ds.outcome_count() || outcome >= model.coefficients.size())
        throw ValidationError("outcome index out of range");
    if (w.size() != ds.n_control()) throw ValidationError("weight vector does not match control units");
    const auto& coef = model.coefficients[outcome];
    const std::size_t d = ds.dimension();
    const double total = w.sum();
    double treated = 0.0, control = 0.0;
    for (std::size_t s = 0; s < ds.shard_count(); ++s) {
        const Shard& sh = ds.shard(s);
        for (int t = 0; t < 2; ++t) {
            const ColumnBlock& b = t ? sh.treated : sh.control;
            auto y = b.outcome(outcome);
            const std::size_t off = ds.control_offset(s);
            for (std::size_t i = 0; i < b.rows(); ++i) {
                double g = coef[0];
                for (std::size_t j = 0; j < d; ++j) g += coef[j + 1] * b.covariate(j)[i];
                const double r = y[i] - g;
                if (t) treated += r;
                else control += w.weights[off + i] / total * r;
            }
        }
    }
    return treated / static_cast<double>(ds.n_treated()) - control;
}

double dr_correct(const Dataset& ds, const WeightVector& w, std::size_t outcome) {
    return dr_correct(ds, w, outcome, fit_outcome_model(ds));
}

}  // namespace balancekit
