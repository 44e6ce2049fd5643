#include "balancekit/simulation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "balancekit/errors.hpp"

namespace balancekit {

std::string dgp_name(DgpKind k) {
    switch (k) {
        case DgpKind::linear: return "linear";
        case DgpKind::linear_interactions: return "interactions";
        case DgpKind::random_forest: return "forest";
    }
    return "unknown";
}

DgpKind parse_dgp(const std::string& name) {
    if (name == "linear") return DgpKind::linear;
    if (name == "interactions" || name == "linear_interactions") return DgpKind::linear_interactions;
    if (name == "forest" || name == "random_forest") return DgpKind::random_forest;
    throw ValidationError("unknown data generating process '" + name + "' (expected linear, interactions or forest)");
}

void SimulationSpec::validate() const {
    if (n_units < 4 || n_units % 2 != 0) throw ValidationError("n_units must be even and at least 4");
    if (d_continuous < 1 || d_binary < 1) throw ValidationError("need at least one continuous and one binary covariate");
    if (dgp == DgpKind::linear_interactions && interaction_anchor >= d_binary)
        throw ValidationError("interaction anchor must index a binary covariate");
    if (zero_inflation && !(*zero_inflation >= 0.0 && *zero_inflation <= 1.0))
        throw ValidationError("zero inflation probability must lie in [0, 1]");
}

namespace {

const std::vector<std::string> kOutcomeNames{"active_days", "app_opens", "time_spent"};

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                      static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
    return std::mt19937_64(seq);
}

enum : std::uint64_t { kParamsStream = 1, kTrainStream = 2, kReplicationStream = 3, kForestStream = 4 };

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Transformed covariate used by the reference mechanism.
double activity(double v, bool binary) { return binary ? v : std::log1p(v); }

}  // namespace

PopulationParams make_population_params(const SimulationSpec& spec) {
    spec.validate();
    auto rng = stream(spec.seed, kParamsStream);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> nd(0.0, 1.0);
    const std::size_t dc = spec.d_continuous, db = spec.d_binary, d = dc + db;
    PopulationParams p;
    for (std::size_t j = 0; j < dc; ++j) {
        p.zero_prob.push_back(spec.zero_inflation ? *spec.zero_inflation : 0.2 + 0.4 * u(rng));
        p.nb_mean.push_back(1.0 + 19.0 * u(rng));
        p.nb_dispersion.push_back(0.5 + 2.5 * u(rng));
    }
    std::uniform_int_distribution<std::size_t> pick(0, dc - 1);
    for (std::size_t j = 0; j < db; ++j) {
        p.binary_parent_a.push_back(pick(rng));
        p.binary_parent_b.push_back(pick(rng));
        p.binary_intercept.push_back(-1.0 + 2.0 * u(rng));
        p.binary_slope_a.push_back(-1.0 + 2.0 * u(rng));
        p.binary_slope_b.push_back(-1.0 + 2.0 * u(rng));
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    p.outcome_coef.assign(kOutcomeNames.size(), std::vector<double>(d));
    for (auto& row : p.outcome_coef)
        for (double& c : row) c = 0.6 * scale * nd(rng);
    p.treatment_coef.resize(d);
    for (double& c : p.treatment_coef) c = 0.8 * scale * nd(rng);
    return p;
}

BasePopulation draw_units(const SimulationSpec& spec, const PopulationParams& params, std::size_t n,
                          std::mt19937_64& rng) {
    const std::size_t dc = spec.d_continuous, db = spec.d_binary, d = dc + db;
    const std::size_t m = kOutcomeNames.size();
    BasePopulation pop;
    for (std::size_t j = 0; j < dc; ++j) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "eng_%02zu", j);
        pop.covariate_names.emplace_back(buf);
    }
    for (std::size_t j = 0; j < db; ++j) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "attr_%02zu", j);
        pop.covariate_names.emplace_back(buf);
    }
    pop.outcome_names = kOutcomeNames;
    pop.d_continuous = dc;
    pop.rows = n;
    pop.params = params;
    pop.x.assign(n * d, 0.0);
    pop.y.assign(n * m, 0.0);
    pop.treatment.assign(n, 0);

    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> nd(0.0, 1.0);
    // A shared activity level per unit correlates the engagement columns.
    std::gamma_distribution<double> level(2.0, 0.5);
    const std::size_t anchor = dc + std::min(spec.interaction_anchor, db - 1);
    for (std::size_t i = 0; i < n; ++i) {
        double* row = &pop.x[i * d];
        const double a = level(rng);
        for (std::size_t j = 0; j < dc; ++j) {
            if (u(rng) < params.zero_prob[j]) {
                row[j] = 0.0;
                continue;
            }
            const double r = params.nb_dispersion[j];
            std::gamma_distribution<double> rate(r, params.nb_mean[j] * a / r);
            std::poisson_distribution<long> count(std::max(rate(rng), 1e-12));
            row[j] = 1.0 + static_cast<double>(count(rng));
        }
        for (std::size_t j = 0; j < db; ++j) {
            const double logit = params.binary_intercept[j] +
                                 params.binary_slope_a[j] * std::log1p(row[params.binary_parent_a[j]]) +
                                 params.binary_slope_b[j] * std::log1p(row[params.binary_parent_b[j]]) -
                                 0.5 * (params.binary_slope_a[j] + params.binary_slope_b[j]) * 1.5;
            row[dc + j] = u(rng) < sigmoid(logit) ? 1.0 : 0.0;
        }

        // Reference mechanism. Outcomes persist raw past engagement (plus a
        // smaller log-scale component); selection acts on log activity with a
        // heavy-user threshold interacted with the anchor attribute, so none
        // of the fitted model families reproduces it exactly.
        std::vector<double> lin(m, 0.0), raw(m, 0.0);
        double tlin = 0.0;
        std::size_t nonzero = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const double f = activity(row[j], j >= dc);
            for (std::size_t k = 0; k < m; ++k) lin[k] += params.outcome_coef[k][j] * f;
            tlin += params.treatment_coef[j] * f;
            if (j >= dc) continue;
            nonzero += row[j] > 0;
            for (std::size_t k = 0; k < m; ++k)
                raw[k] += std::abs(params.outcome_coef[k][j]) * row[j] / params.nb_mean[j];
        }
        const double f0 = std::log1p(row[0]);
        const double b_anchor = row[anchor];
        double* y = &pop.y[i * m];
        y[0] = std::clamp(7.0 * static_cast<double>(nonzero) / static_cast<double>(dc) + 0.5 * lin[0] + 0.7 * nd(rng),
                          0.0, 7.0);
        y[1] = 3.0 * raw[1] * (1.0 + 0.2 * b_anchor) + 1.5 * nd(rng);
        y[2] = 10.0 + 5.0 * raw[2] + 2.0 * lin[2] + 3.0 * nd(rng);
        const double t_logit = -0.5 + tlin + 0.3 * (f0 - 1.2) + 0.6 * (f0 > 1.5 ? 1.0 : 0.0) * b_anchor;
        pop.treatment[i] = u(rng) < sigmoid(t_logit) ? 1 : 0;
    }
    return pop;
}

BasePopulation generate_base_population(const SimulationSpec& spec) {
    const PopulationParams params = make_population_params(spec);
    auto rng = stream(spec.seed, kTrainStream);
    return draw_units(spec, params, spec.n_units, rng);
}

BasePopulation BasePopulation::slice(std::size_t begin, std::size_t end) const {
    BasePopulation out;
    out.covariate_names = covariate_names;
    out.outcome_names = outcome_names;
    out.d_continuous = d_continuous;
    out.params = params;
    out.rows = end - begin;
    const std::size_t d = dimension(), m = outcome_count();
    out.x.assign(x.begin() + static_cast<std::ptrdiff_t>(begin * d), x.begin() + static_cast<std::ptrdiff_t>(end * d));
    out.y.assign(y.begin() + static_cast<std::ptrdiff_t>(begin * m), y.begin() + static_cast<std::ptrdiff_t>(end * m));
    out.treatment.assign(treatment.begin() + static_cast<std::ptrdiff_t>(begin),
                         treatment.begin() + static_cast<std::ptrdiff_t>(end));
    return out;
}

// ---------------------------------------------------------------------------
// CART

double Tree::predict(const double* row) const {
    int n = 0;
    while (nodes[static_cast<std::size_t>(n)].feature >= 0) {
        const TreeNode& node = nodes[static_cast<std::size_t>(n)];
        n = row[node.feature] <= node.threshold ? node.left : node.right;
    }
    return nodes[static_cast<std::size_t>(n)].value;
}

double Forest::predict(const double* row) const {
    double s = 0.0;
    for (const auto& t : trees) s += t.predict(row);
    return s / static_cast<double>(trees.size());
}

namespace {

struct TreeBuilder {
    const std::vector<double>& x;
    std::size_t d;
    const std::vector<double>& y;
    bool classification;
    const ForestOptions& opt;
    std::size_t mtry;
    std::mt19937_64& rng;
    Tree tree;

    // Impurity * count for a node with the given sums (y is 0/1 for classification).
    double impurity(double n, double s, double s2) const {
        if (n <= 0) return 0.0;
        if (classification) {
            const double p = s / n;
            return n * 2.0 * p * (1.0 - p);
        }
        return s2 - s * s / n;
    }

    int build(std::vector<std::size_t>& idx, std::size_t begin, std::size_t end, std::size_t depth) {
        const std::size_t n = end - begin;
        double s = 0.0, s2 = 0.0;
        for (std::size_t k = begin; k < end; ++k) {
            s += y[idx[k]];
            s2 += y[idx[k]] * y[idx[k]];
        }
        const int id = static_cast<int>(tree.nodes.size());
        tree.nodes.push_back({});
        tree.nodes.back().value = s / static_cast<double>(n);
        const double parent = impurity(static_cast<double>(n), s, s2);
        if (depth >= opt.max_depth || n < opt.min_samples_split || parent <= 1e-12) return id;

        std::vector<std::size_t> features(d);
        std::iota(features.begin(), features.end(), 0);
        std::shuffle(features.begin(), features.end(), rng);

        int best_f = -1;
        double best_thr = 0.0, best_gain = 1e-12;
        std::vector<std::pair<double, double>> vals(n);
        for (std::size_t fi = 0; fi < mtry; ++fi) {
            const std::size_t f = features[fi];
            for (std::size_t k = 0; k < n; ++k) vals[k] = {x[idx[begin + k] * d + f], y[idx[begin + k]]};
            std::sort(vals.begin(), vals.end(), [](auto& a, auto& b) { return a.first < b.first; });
            double ls = 0.0, ls2 = 0.0;
            for (std::size_t k = 0; k + 1 < n; ++k) {
                ls += vals[k].second;
                ls2 += vals[k].second * vals[k].second;
                if (vals[k].first == vals[k + 1].first) continue;
                const double nl = static_cast<double>(k + 1), nr = static_cast<double>(n - k - 1);
                const double child = impurity(nl, ls, ls2) + impurity(nr, s - ls, s2 - ls2);
                const double gain = parent - child;
                if (gain > best_gain) {
                    best_gain = gain;
                    best_f = static_cast<int>(f);
                    best_thr = 0.5 * (vals[k].first + vals[k + 1].first);
                }
            }
        }
        if (best_f < 0) return id;

        auto mid = std::partition(idx.begin() + static_cast<std::ptrdiff_t>(begin),
                                  idx.begin() + static_cast<std::ptrdiff_t>(end),
                                  [&](std::size_t r) { return x[r * d + static_cast<std::size_t>(best_f)] <= best_thr; });
        const std::size_t split = static_cast<std::size_t>(mid - idx.begin());
        const int left = build(idx, begin, split, depth + 1);
        const int right = build(idx, split, end, depth + 1);
        TreeNode& node = tree.nodes[static_cast<std::size_t>(id)];
        node.feature = best_f;
        node.threshold = best_thr;
        node.left = left;
        node.right = right;
        return id;
    }
};

}  // namespace

Forest fit_forest(const std::vector<double>& x, std::size_t rows, std::size_t d, const std::vector<double>& y,
                  bool classification, const ForestOptions& options) {
    if (rows == 0 || d == 0 || y.size() != rows || x.size() != rows * d)
        throw ValidationError("forest training data has inconsistent shape");
    if (options.trees == 0) throw ValidationError("forest needs at least one tree");
    const std::size_t mtry = options.max_features
                                 ? std::min(options.max_features, d)
                                 : static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(d))));
    Forest forest;
    for (std::size_t t = 0; t < options.trees; ++t) {
        auto rng = stream(options.seed, kForestStream, t);
        std::vector<std::size_t> idx(rows);
        if (options.bootstrap) {
            std::uniform_int_distribution<std::size_t> pick(0, rows - 1);
            for (auto& i : idx) i = pick(rng);
        } else {
            std::iota(idx.begin(), idx.end(), 0);
        }
        TreeBuilder b{x, d, y, classification, options, mtry, rng, {}};
        b.build(idx, 0, rows, 0);
        forest.trees.push_back(std::move(b.tree));
    }
    return forest;
}

// ---------------------------------------------------------------------------

std::size_t DgpModels::feature_count() const {
    return kind == DgpKind::linear_interactions ? 2 * dimension + 1 : dimension + 1;
}

std::vector<double> DgpModels::features(const double* row) const {
    std::vector<double> f;
    f.reserve(feature_count());
    f.push_back(1.0);
    for (std::size_t j = 0; j < dimension; ++j) f.push_back(row[j]);
    if (kind == DgpKind::linear_interactions)
        for (std::size_t j = 0; j < dimension; ++j) f.push_back(row[j] * row[anchor_column]);
    return f;
}

double DgpModels::predict_outcome(std::size_t j, const double* row) const {
    if (kind == DgpKind::random_forest) return outcome_forests[j].predict(row);
    const auto f = features(row);
    return std::inner_product(f.begin(), f.end(), outcome_coef[j].begin(), 0.0);
}

double DgpModels::predict_propensity(const double* row) const {
    if (kind == DgpKind::random_forest) return treatment_forest.predict(row);
    const auto f = features(row);
    return sigmoid(std::inner_product(f.begin(), f.end(), treatment_coef.begin(), 0.0));
}

namespace {

// Logistic regression by Newton's method with a tiny ridge so separable
// training data still yields finite coefficients.
std::vector<double> newton_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXd& t) {
    const Eigen::Index n = X.rows(), p = X.cols();
    // Scale non-intercept columns for conditioning; undone at the end.
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(p), sd = Eigen::VectorXd::Ones(p);
    for (Eigen::Index j = 1; j < p; ++j) {
        mu(j) = X.col(j).mean();
        const double v = (X.col(j).array() - mu(j)).square().mean();
        sd(j) = v > 1e-24 ? std::sqrt(v) : 1.0;
    }
    Eigen::MatrixXd Z = X;
    for (Eigen::Index j = 1; j < p; ++j) Z.col(j) = (X.col(j).array() - mu(j)) / sd(j);
    const double ridge = 1e-6;
    auto objective = [&](const Eigen::VectorXd& b) {
        Eigen::VectorXd eta = Z * b;
        double f = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double e = eta(i);
            f += (e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e))) - t(i) * e;
        }
        return f / static_cast<double>(n) + 0.5 * ridge * b.tail(p - 1).squaredNorm();
    };
    Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
    const double frac = std::clamp(t.mean(), 1e-6, 1.0 - 1e-6);
    b(0) = std::log(frac / (1.0 - frac));
    double f = objective(b);
    bool converged = false;
    for (int it = 0; it < 200; ++it) {
        Eigen::VectorXd eta = Z * b;
        Eigen::VectorXd pr = eta.unaryExpr([](double e) { return sigmoid(e); });
        Eigen::VectorXd w = pr.array() * (1.0 - pr.array());
        Eigen::VectorXd g = Z.transpose() * (pr - t) / static_cast<double>(n);
        Eigen::MatrixXd H = Z.transpose() * w.asDiagonal() * Z / static_cast<double>(n);
        for (Eigen::Index j = 1; j < p; ++j) {
            g(j) += ridge * b(j);
            H(j, j) += ridge;
        }
        Eigen::VectorXd step = H.ldlt().solve(g);
        double a = 1.0;
        Eigen::VectorXd nb = b - step;
        double nf = objective(nb);
        while (nf > f && a > 1e-10) {
            a *= 0.5;
            nb = b - a * step;
            nf = objective(nb);
        }
        b = nb;
        const double change = (a * step).cwiseAbs().maxCoeff();
        f = nf;
        if (change < 1e-10) {
            converged = true;
            break;
        }
    }
    if (!converged) throw SolverError("selection model (logistic) did not converge");
    std::vector<double> out(static_cast<std::size_t>(p));
    out[0] = b(0);
    for (Eigen::Index j = 1; j < p; ++j) {
        out[static_cast<std::size_t>(j)] = b(j) / sd(j);
        out[0] -= b(j) * mu(j) / sd(j);
    }
    return out;
}

}  // namespace

DgpModels fit_dgp_models(const BasePopulation& train, const SimulationSpec& spec) {
    const std::size_t n = train.rows, d = train.dimension(), m = train.outcome_count();
    std::size_t treated = 0;
    for (int t : train.treatment) treated += t;
    if (n < 2 || treated == 0 || treated == n) throw ValidationError("degenerate training data for the data generating models");

    DgpModels md;
    md.kind = spec.dgp;
    md.dimension = d;
    md.anchor_column = train.d_continuous + std::min(spec.interaction_anchor, d - train.d_continuous - 1);
    md.outcome_names = train.outcome_names;
    md.covariate_names = train.covariate_names;

    if (spec.dgp == DgpKind::random_forest) {
        ForestOptions reg;
        reg.trees = 10;
        reg.max_depth = 10;
        ForestOptions cls = reg;
        cls.max_depth = 15;
        for (std::size_t k = 0; k < m; ++k) {
            std::vector<double> yk(n);
            for (std::size_t i = 0; i < n; ++i) yk[i] = train.y[i * m + k];
            reg.seed = spec.seed * 31 + k;
            md.outcome_forests.push_back(fit_forest(train.x, n, d, yk, false, reg));
        }
        std::vector<double> tt(train.treatment.begin(), train.treatment.end());
        cls.seed = spec.seed * 31 + m;
        md.treatment_forest = fit_forest(train.x, n, d, tt, true, cls);
    } else {
        const std::size_t F = md.feature_count();
        Eigen::MatrixXd X(n, F);
        for (std::size_t i = 0; i < n; ++i) {
            const auto f = md.features(&train.x[i * d]);
            for (std::size_t j = 0; j < F; ++j) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = f[j];
        }
        Eigen::MatrixXd Y(n, m);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < m; ++k) Y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = train.y[i * m + k];
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
        Eigen::MatrixXd B = qr.solve(Y);
        for (std::size_t k = 0; k < m; ++k) {
            std::vector<double> c(F);
            for (std::size_t j = 0; j < F; ++j) c[j] = B(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k));
            md.outcome_coef.push_back(std::move(c));
        }
        Eigen::VectorXd t(n);
        for (std::size_t i = 0; i < n; ++i) t(static_cast<Eigen::Index>(i)) = train.treatment[i];
        md.treatment_coef = newton_logistic(X, t);
    }

    md.residual_rows = n;
    md.residuals.resize(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < m; ++k)
            md.residuals[i * m + k] = train.y[i * m + k] - md.predict_outcome(k, &train.x[i * d]);
    return md;
}

Dataset synthesize(const BasePopulation& test, const DgpModels& models, std::mt19937_64& rng, std::size_t shard_rows) {
    const std::size_t n = test.rows, d = test.dimension(), m = models.outcome_names.size();
    if (d != models.dimension) throw ValidationError("test covariates do not match the fitted models");
    if (models.residual_rows == 0) throw ValidationError("models carry no residual pool");
    std::vector<double> g(n * m), prop(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = &test.x[i * d];
        for (std::size_t k = 0; k < m; ++k) g[i * m + k] = models.predict_outcome(k, row);
        prop[i] = std::clamp(models.predict_propensity(row), kPropensityFloor, 1.0 - kPropensityFloor);
    }
    Schema schema{test.covariate_names, models.outcome_names};
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick(0, models.residual_rows - 1);
    for (std::size_t attempt = 0; attempt < kSynthesisAttempts; ++attempt) {
        std::vector<UnitRecord> recs(n);
        std::size_t treated = 0;
        for (std::size_t i = 0; i < n; ++i) {
            UnitRecord& r = recs[i];
            r.unit_id = "u" + std::to_string(i);
            r.covariates.assign(test.x.begin() + static_cast<std::ptrdiff_t>(i * d),
                                test.x.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
            // One residual row keeps the outcomes' joint error structure.
            const std::size_t src = pick(rng);
            r.outcomes.resize(m);
            for (std::size_t k = 0; k < m; ++k) r.outcomes[k] = g[i * m + k] + models.residuals[src * m + k];
            r.treatment = u(rng) < prop[i] ? 1 : 0;
            treated += static_cast<std::size_t>(r.treatment);
        }
        if (treated > 0 && treated < n) return Dataset::from_records(schema, recs, shard_rows);
    }
    throw ValidationError("synthesized data put every unit in one group after " +
                          std::to_string(kSynthesisAttempts) + " attempts");
}

// ---------------------------------------------------------------------------

namespace {

struct MethodToken {
    Method base;
    bool dr;
    std::string label;
};

MethodToken parse_token(const std::string& s) {
    const bool dr = s.size() > 3 && s.ends_with("-dr");
    return {parse_method(dr ? s.substr(0, s.size() - 3) : s), dr, s};
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    return quantile(std::move(v), 0.5);
}

}  // namespace

FittedDgp fit_reference(const SimulationSpec& spec) {
    spec.validate();
    FittedDgp fit;
    fit.params = make_population_params(spec);
    auto rng = stream(spec.seed, kTrainStream);
    const BasePopulation train = draw_units(spec, fit.params, spec.n_units / 2, rng);
    fit.models = fit_dgp_models(train, spec);
    return fit;
}

Dataset replication_dataset(const SimulationSpec& spec, const FittedDgp& fit, std::size_t replication,
                            std::size_t test_units, std::size_t shard_rows) {
    auto rng = stream(spec.seed, kReplicationStream, replication);
    const BasePopulation test = draw_units(spec, fit.params, test_units, rng);
    return synthesize(test, fit.models, rng, shard_rows);
}

BenchmarkResult run_benchmark(const SimulationSpec& spec, const BenchmarkOptions& options) {
    const FittedDgp fit = fit_reference(spec);
    return run_benchmark(spec, fit.models, fit.params, options);
}

BenchmarkResult run_benchmark(const SimulationSpec& spec, const DgpModels& models, const PopulationParams& params,
                              const BenchmarkOptions& options) {
    spec.validate();
    if (options.replications < 1) throw ValidationError("need at least one replication");
    if (options.methods.empty()) throw ValidationError("no methods requested");
    std::vector<MethodToken> tokens;
    for (const auto& s : options.methods) tokens.push_back(parse_token(s));
    std::vector<Method> bases;
    for (const auto& t : tokens)
        if (std::find(bases.begin(), bases.end(), t.base) == bases.end()) bases.push_back(t.base);
    const bool any_dr = std::any_of(tokens.begin(), tokens.end(), [](auto& t) { return t.dr; });

    const std::size_t S = options.replications;
    const std::size_t n_test = options.test_units.value_or(spec.n_units / 2);
    const std::size_t m = models.outcome_names.size();
    const std::size_t T = tokens.size();

    struct Cell {
        std::vector<double> pct, patt;
        bool failed = true;
        bool converged = false;
        std::optional<BalanceReport::Summary> balance;
        std::optional<StabilityReport> stab;
        double mean_smd = 0.0;
        double seconds = 0.0;
    };
    std::vector<std::vector<Cell>> cells(S, std::vector<Cell>(T));

    parallel_for(S, options.engine.worker_count, [&](std::size_t s) {
        auto rng = stream(spec.seed, kReplicationStream, s);
        const BasePopulation test = draw_units(spec, params, n_test, rng);
        const Dataset ds = synthesize(test, models, rng, options.shard_rows);  // == replication_dataset
        EngineConfig inner{1, true};
        std::optional<OutcomeModel> om;
        if (any_dr) om = fit_outcome_model(ds, inner);

        for (Method base : bases) {
            MethodSpec ms;
            ms.method = base;
            ms.solver = options.solver;
            ms.solver.engine = inner;
            ms.grid = options.grid;
            ms.logistic.engine = inner;
            std::optional<WeightingResult> wr;
            const auto t0 = std::chrono::steady_clock::now();
            try {
                wr = compute_weights(ds, ms);
            } catch (const Error&) {
            }
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::optional<BalanceReport::Summary> bal;
            std::optional<StabilityReport> stab;
            double msmd = 0.0;
            if (wr && options.diagnostics) {
                DiagnosticsOptions dopt;
                dopt.engine = inner;
                const BalanceReport rep = balance_report(ds, wr->weights, dopt);
                bal = rep.summary;
                msmd = rep.summary.smd;
                stab = stability(wr->weights);
            } else if (wr) {
                msmd = mean_smd(ds, wr->weights, inner);
            }
            for (std::size_t ti = 0; ti < T; ++ti) {
                if (tokens[ti].base != base) continue;
                Cell& c = cells[s][ti];
                c.seconds = secs;
                if (!wr) continue;
                c.failed = false;
                c.converged = wr->converged;
                c.balance = bal;
                c.stab = stab;
                c.mean_smd = msmd;
                for (std::size_t k = 0; k < m; ++k) {
                    EffectEstimate e = tokens[ti].dr ? patt_dr(ds, wr->weights, k, *om) : patt(ds, wr->weights, k);
                    c.pct.push_back(e.pct_change);
                    c.patt.push_back(e.patt);
                }
            }
        }
    });

    BenchmarkResult res;
    res.spec = spec;
    res.test_units = n_test;
    res.outcome_names = models.outcome_names;
    for (std::size_t ti = 0; ti < T; ++ti) {
        MethodSummary ms;
        ms.method = tokens[ti].label;
        ms.estimates.assign(m, {});
        std::size_t nbal = 0;
        double secs = 0.0;
        for (std::size_t s = 0; s < S; ++s) {
            const Cell& c = cells[s][ti];
            secs += c.seconds;
            for (std::size_t k = 0; k < m; ++k) {
                ReplicationRow row;
                row.replication = s;
                row.method = ms.method;
                row.outcome = models.outcome_names[k];
                row.failed = c.failed;
                row.converged = c.converged;
                row.mean_smd = c.mean_smd;
                if (!c.failed) {
                    row.pct_change = c.pct[k];
                    row.patt = c.patt[k];
                    ms.estimates[k].push_back(c.pct[k]);
                }
                if (c.stab) row.ess_ratio = c.stab->ess_ratio;
                res.rows.push_back(row);
            }
            if (c.failed) {
                ++ms.failures;
                continue;
            }
            if (!c.converged) ++ms.nonconverged;
            if (c.balance) {
                ++nbal;
                auto& b = ms.balance;
                b.smd += c.balance->smd;
                b.smd_squares += c.balance->smd_squares;
                if (c.balance->smd_interactions)
                    b.smd_interactions = b.smd_interactions.value_or(0.0) + *c.balance->smd_interactions;
                b.variance_ratio += c.balance->variance_ratio;
                b.overlap += c.balance->overlap;
                b.ks += c.balance->ks;
                if (c.balance->mahalanobis) b.mahalanobis = b.mahalanobis.value_or(0.0) + *c.balance->mahalanobis;
                ms.stability.sd_normalized += c.stab->sd_normalized;
                ms.stability.max_weight += c.stab->max_weight;
                ms.stability.p99_weight += c.stab->p99_weight;
                ms.stability.ess += c.stab->ess;
                ms.stability.ess_ratio += c.stab->ess_ratio;
            }
        }
        if (static_cast<double>(ms.failures) > 0.2 * static_cast<double>(S))
            throw SolverError("method " + ms.method + " failed in " + std::to_string(ms.failures) + " of " +
                              std::to_string(S) + " replications");
        if (nbal > 0) {
            const double k = static_cast<double>(nbal);
            auto& b = ms.balance;
            b.smd /= k;
            b.smd_squares /= k;
            if (b.smd_interactions) *b.smd_interactions /= k;
            b.variance_ratio /= k;
            b.overlap /= k;
            b.ks /= k;
            if (b.mahalanobis) *b.mahalanobis /= k;
            ms.stability.sd_normalized /= k;
            ms.stability.max_weight /= k;
            ms.stability.p99_weight /= k;
            ms.stability.ess /= k;
            ms.stability.ess_ratio /= k;
        }
        ms.mean_seconds = secs / static_cast<double>(S);
        std::vector<double> ambs;
        for (std::size_t k = 0; k < m; ++k) {
            if (ms.estimates[k].size() >= 2) {
                ms.per_outcome.push_back(meta_metrics(ms.estimates[k], 0.0));
            } else {
                MetaMetrics mm;
                mm.replications = ms.estimates[k].size();
                if (mm.replications == 1) mm.amb = std::abs(ms.estimates[k][0]);
                mm.rmse = mm.rmse_population = mm.amb;
                ms.per_outcome.push_back(mm);
            }
            ambs.push_back(ms.per_outcome.back().amb);
        }
        ms.median_amb = median(ambs);
        res.methods.push_back(std::move(ms));
    }
    return res;
}

}  // namespace balancekit
