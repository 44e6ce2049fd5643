#include "fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace bk_test {

using balancekit::Dataset;
using balancekit::Schema;
using balancekit::UnitRecord;

Dataset make_dataset(const Matrix& control, const Matrix& treated, std::size_t shard_rows, const Matrix& control_y,
                     const Matrix& treated_y) {
    const auto d = control.cols();
    const auto m = control_y.cols();
    Schema schema;
    for (Eigen::Index j = 0; j < d; ++j) schema.covariates.push_back("x" + std::to_string(j));
    for (Eigen::Index k = 0; k < m; ++k) schema.outcomes.push_back("y" + std::to_string(k));
    std::vector<UnitRecord> recs;
    auto add = [&](const Matrix& x, const Matrix& y, int t, const char* prefix) {
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            UnitRecord r;
            r.unit_id = prefix + std::to_string(i);
            r.treatment = t;
            for (Eigen::Index j = 0; j < d; ++j) r.covariates.push_back(x(i, j));
            for (Eigen::Index k = 0; k < m; ++k) r.outcomes.push_back(y(i, k));
            recs.push_back(std::move(r));
        }
    };
    add(control, control_y, 0, "c");
    add(treated, treated_y.cols() == m ? treated_y : Matrix(treated.rows(), 0), 1, "t");
    return Dataset::from_records(schema, recs, shard_rows);
}

Dataset column_dataset(const std::vector<double>& control, const std::vector<double>& treated,
                       std::size_t shard_rows) {
    Matrix c(control.size(), 1), t(treated.size(), 1);
    for (std::size_t i = 0; i < control.size(); ++i) c(i, 0) = control[i];
    for (std::size_t i = 0; i < treated.size(); ++i) t(i, 0) = treated[i];
    return make_dataset(c, t, shard_rows);
}

namespace {

Matrix random_control(std::mt19937_64& rng, std::size_t n0, std::size_t d) {
    std::normal_distribution<double> nd;
    Matrix x(n0, d);
    for (std::size_t i = 0; i < n0; ++i)
        for (std::size_t j = 0; j < d; ++j) x(i, j) = nd(rng) * (1.0 + j) + static_cast<double>(j);
    return x;
}

}  // namespace

Instance feasible_instance(std::mt19937_64& rng, std::size_t n0, std::size_t n1, std::size_t d, double tilt,
                           std::size_t shard_rows) {
    std::normal_distribution<double> nd;
    Instance in;
    in.control = random_control(rng, n0, d);
    Vector p(n0);
    for (std::size_t i = 0; i < n0; ++i) p[i] = std::exp(tilt * nd(rng));
    p /= p.sum();
    const Vector mix = in.control.transpose() * p;
    in.treated.resize(n1, d);
    for (std::size_t i = 0; i < n1; ++i)
        for (std::size_t j = 0; j < d; ++j) in.treated(i, j) = nd(rng);
    const Eigen::RowVectorXd centre = in.treated.colwise().mean();
    for (std::size_t i = 0; i < n1; ++i) in.treated.row(i) += mix.transpose() - centre;
    in.target = in.treated.colwise().mean().transpose();
    in.ds = make_dataset(in.control, in.treated, shard_rows);
    return in;
}

Instance shifted_instance(std::mt19937_64& rng, std::size_t n0, std::size_t n1, std::size_t d, double shift,
                          std::size_t shard_rows) {
    std::normal_distribution<double> nd;
    Instance in;
    in.control = random_control(rng, n0, d);
    in.treated = random_control(rng, n1, d);
    in.treated.array() += shift;
    in.target = in.treated.colwise().mean().transpose();
    in.ds = make_dataset(in.control, in.treated, shard_rows);
    return in;
}

Vector to_vector(const std::vector<double>& v) { return Eigen::Map<const Vector>(v.data(), v.size()); }

double max_abs_diff(const Vector& a, const std::vector<double>& b) {
    if (static_cast<std::size_t>(a.size()) != b.size()) return std::numeric_limits<double>::infinity();
    double m = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

Vector entropy_newton_weights(const Matrix& control, const Vector& target) {
    const Eigen::RowVectorXd mu = control.colwise().mean();
    const Eigen::RowVectorXd sd = (control.rowwise() - mu).array().square().colwise().mean().sqrt();
    const Matrix z = ((control.rowwise() - mu).array().rowwise() / sd.array()).matrix();
    const Vector tz = ((target.transpose() - mu).array() / sd.array()).transpose();

    auto objective = [&](const Vector& xi, Vector& w) {
        const Vector e = -(z * xi);
        const double top = e.maxCoeff();
        w = (e.array() - top).exp();
        const double s = w.sum();
        w /= s;
        return top + std::log(s) + xi.dot(tz);
    };
    Vector xi = Vector::Zero(z.cols());
    Vector w;
    double f = objective(xi, w);
    for (int it = 0; it < 500; ++it) {
        const Vector g = tz - z.transpose() * w;
        if (g.lpNorm<Eigen::Infinity>() < 1e-15) break;
        const Vector zm = z.transpose() * w;
        const Matrix h = z.transpose() * w.asDiagonal() * z - zm * zm.transpose();
        const Vector step = h.ldlt().solve(-g);
        double a = 1.0;
        Vector w_new;
        double f_new = objective(xi + step, w_new);
        while (f_new > f + 1e-4 * a * g.dot(step) && a > 1e-12) {
            a *= 0.5;
            f_new = objective(xi + a * step, w_new);
        }
        if (!(f_new < f) && a <= 1e-12) break;
        xi += a * step;
        f = f_new;
        w = w_new;
    }
    return w;
}

namespace {

void constraint_system(const Matrix& control, const Vector& target, Matrix& a, Vector& b) {
    a.resize(control.cols() + 1, control.rows());
    a.row(0).setOnes();
    a.bottomRows(control.cols()) = control.transpose();
    b.resize(control.cols() + 1);
    b[0] = 1.0;
    b.tail(control.cols()) = target;
}

// Minimum-norm solution of A_S w_S = b on a support set; `exact` reports
// whether the system is consistent there.
Vector min_norm_on(const Matrix& a, const Vector& b, const std::vector<Eigen::Index>& support, bool& exact) {
    Matrix as(a.rows(), support.size());
    for (std::size_t k = 0; k < support.size(); ++k) as.col(k) = a.col(support[k]);
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(as);
    const Vector ws = cod.solve(b);
    exact = (as * ws - b).lpNorm<Eigen::Infinity>() <= 1e-9 * (1.0 + b.lpNorm<Eigen::Infinity>());
    Vector w = Vector::Zero(a.cols());
    for (std::size_t k = 0; k < support.size(); ++k) w[support[k]] = ws[k];
    return w;
}

}  // namespace

Vector min_norm_enumerate(const Matrix& control, const Vector& target) {
    const auto n = control.rows();
    if (n > 16) throw std::invalid_argument("support enumeration needs at most 16 rows");
    Matrix a;
    Vector b;
    constraint_system(control, target, a, b);
    double best = std::numeric_limits<double>::infinity();
    Vector best_w;
    for (unsigned mask = 1; mask < (1u << n); ++mask) {
        std::vector<Eigen::Index> support;
        for (Eigen::Index i = 0; i < n; ++i)
            if (mask >> i & 1u) support.push_back(i);
        bool exact = false;
        const Vector w = min_norm_on(a, b, support, exact);
        if (!exact || w.minCoeff() < -1e-12) continue;
        const double f = w.squaredNorm();
        if (f < best) {
            best = f;
            best_w = w;
        }
    }
    if (best_w.size() == 0) throw std::runtime_error("no feasible support pattern");
    return best_w;
}

Vector min_norm_alternating(const Matrix& control, const Vector& target, std::size_t iterations) {
    Matrix a;
    Vector b;
    constraint_system(control, target, a, b);
    const Eigen::LDLT<Matrix> gram(a * a.transpose());
    auto project_affine = [&](const Vector& v) -> Vector { return v - a.transpose() * gram.solve(a * v - b); };
    const auto n = control.rows();
    Vector x = Vector::Zero(n), p = x, q = x;
    for (std::size_t k = 0; k < iterations; ++k) {
        const Vector y = project_affine(x + p);
        p = x + p - y;
        const Vector z = (y + q).cwiseMax(0.0);
        q = y + q - z;
        x = z;
    }
    std::vector<Eigen::Index> support;
    for (Eigen::Index i = 0; i < n; ++i)
        if (x[i] > 1e-9) support.push_back(i);
    bool exact = false;
    const Vector polished = min_norm_on(a, b, support, exact);
    return exact && polished.minCoeff() >= 0.0 ? polished : x;
}

Vector logistic_newton(const Matrix& x, const std::vector<int>& y) {
    const auto n = x.rows(), d = x.cols();
    Matrix design(n, d + 1);
    design.col(0).setOnes();
    design.rightCols(d) = x;
    Vector yv(n);
    for (Eigen::Index i = 0; i < n; ++i) yv[i] = y[i];
    Vector beta = Vector::Zero(d + 1);
    for (int it = 0; it < 100; ++it) {
        const Vector eta = design * beta;
        const Vector p = eta.unaryExpr([](double e) { return 1.0 / (1.0 + std::exp(-e)); });
        const Vector g = design.transpose() * (yv - p);
        const Vector wdiag = p.array() * (1.0 - p.array());
        const Matrix h = design.transpose() * wdiag.asDiagonal() * design;
        const Vector step = h.ldlt().solve(g);
        beta += step;
        if (step.lpNorm<Eigen::Infinity>() < 1e-14 * (1.0 + beta.lpNorm<Eigen::Infinity>())) break;
    }
    return beta;
}

Vector least_squares(const Matrix& x, const Vector& y) {
    Matrix design(x.rows(), x.cols() + 1);
    design.col(0).setOnes();
    design.rightCols(x.cols()) = x;
    return design.colPivHouseholderQr().solve(y);
}

namespace {

std::vector<double> normalise(const std::vector<double>& w) {
    double s = 0.0;
    for (double v : w) s += v;
    std::vector<double> out;
    for (double v : w) out.push_back(v / s);
    return out;
}

double plain_mean(const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v;
    return s / static_cast<double>(x.size());
}

double sample_var(const std::vector<double>& x) {
    const double m = plain_mean(x);
    double s = 0.0;
    for (double v : x) s += (v - m) * (v - m);
    return x.size() > 1 ? s / static_cast<double>(x.size() - 1) : 0.0;
}

// Reliability-weighted variance: sum w (x - m)^2 / (1 - sum w^2).
double weighted_var(const std::vector<double>& x, const std::vector<double>& w) {
    const auto p = normalise(w);
    double m = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        m += p[i] * x[i];
        s2 += p[i] * p[i];
    }
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += p[i] * (x[i] - m) * (x[i] - m);
    return s2 < 1.0 ? s / (1.0 - s2) : 0.0;
}

double weighted_mean(const std::vector<double>& x, const std::vector<double>& w) {
    const auto p = normalise(w);
    double m = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) m += p[i] * x[i];
    return m;
}

double sorted_quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double h = (static_cast<double>(v.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(h);
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

double oracle_smd(const std::vector<double>& xt, const std::vector<double>& xc, const std::vector<double>& w) {
    const double gap = std::abs(plain_mean(xt) - weighted_mean(xc, w));
    const double scale = std::sqrt((sample_var(xt) + weighted_var(xc, w)) / 2.0);
    if (scale > 0.0) return gap / scale;
    return gap == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
}

double oracle_variance_ratio(const std::vector<double>& xt, const std::vector<double>& xc,
                             const std::vector<double>& w) {
    const double vt = sample_var(xt);
    if (!(vt > 0.0)) return 0.0;
    return std::abs(1.0 - weighted_var(xc, w) / vt);
}

double oracle_overlap(const std::vector<double>& xt, const std::vector<double>& xc, const std::vector<double>& w,
                      std::size_t bins) {
    std::vector<double> pooled(xt);
    pooled.insert(pooled.end(), xc.begin(), xc.end());
    const double lo = *std::min_element(pooled.begin(), pooled.end());
    const double hi = *std::max_element(pooled.begin(), pooled.end());
    if (!(hi > lo)) return 0.0;
    if (bins == 0) {
        const double iqr = sorted_quantile(pooled, 0.75) - sorted_quantile(pooled, 0.25);
        const double fd = 2.0 * iqr / std::cbrt(static_cast<double>(pooled.size()));
        bins = fd > 0.0 ? static_cast<std::size_t>(std::min(10000.0, std::max(10.0, std::ceil((hi - lo) / fd)))) : 10;
    }
    const double width = (hi - lo) / static_cast<double>(bins);
    const auto p = normalise(w);
    double ovl = 0.0;
    for (std::size_t b = 0; b < bins; ++b) {
        auto inside = [&](double x) {
            const auto k = std::min(static_cast<std::size_t>((x - lo) / width), bins - 1);
            return k == b;
        };
        double ft = 0.0, fc = 0.0;
        for (double x : xt) ft += inside(x) ? 1.0 : 0.0;
        ft /= static_cast<double>(xt.size());
        for (std::size_t i = 0; i < xc.size(); ++i) fc += inside(xc[i]) ? p[i] : 0.0;
        ovl += std::min(ft, fc);
    }
    return std::min(1.0, std::max(0.0, 1.0 - ovl));
}

double oracle_ks(const std::vector<double>& xt, const std::vector<double>& xc, const std::vector<double>& w) {
    const auto p = normalise(w);
    std::vector<double> grid(xt);
    grid.insert(grid.end(), xc.begin(), xc.end());
    double best = 0.0;
    for (double v : grid) {
        double ft = 0.0, fc = 0.0;
        for (double x : xt) ft += x <= v ? 1.0 : 0.0;
        ft /= static_cast<double>(xt.size());
        for (std::size_t i = 0; i < xc.size(); ++i) fc += xc[i] <= v ? p[i] : 0.0;
        best = std::max(best, std::abs(ft - fc));
    }
    return std::min(best, 1.0);
}

double oracle_mahalanobis(const Matrix& treated, const Matrix& control, const std::vector<double>& w) {
    Matrix pooled(treated.rows() + control.rows(), treated.cols());
    pooled << treated, control;
    const Matrix centred = pooled.rowwise() - pooled.colwise().mean();
    const Matrix S = centred.transpose() * centred / static_cast<double>(pooled.rows() - 1);
    const Vector p = to_vector(normalise(w));
    const Vector diff = treated.colwise().mean().transpose() - control.transpose() * p;
    return diff.dot(S.inverse() * diff);
}

double oracle_ess(const std::vector<double>& w) {
    double s = 0.0, s2 = 0.0;
    for (double v : w) {
        s += v;
        s2 += v * v;
    }
    return s * s / s2;
}

}  // namespace bk_test
