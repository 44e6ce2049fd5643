#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "balancekit/data_model.hpp"

namespace bk_test {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Rows are units, columns covariates; outcome matrices may have zero columns.
balancekit::Dataset make_dataset(const Matrix& control, const Matrix& treated, std::size_t shard_rows = 64,
                                 const Matrix& control_y = {}, const Matrix& treated_y = {});

/// One covariate, no outcomes.
balancekit::Dataset column_dataset(const std::vector<double>& control, const std::vector<double>& treated,
                                   std::size_t shard_rows = 64);

/// Control matrix plus a treated block whose mean is a strictly positive
/// mixture of the control rows (so every balancing problem is feasible).
/// `tilt` controls how uneven the mixture is; large tilts put the target near
/// the hull boundary and give sparse quadratic solutions.
struct Instance {
    Matrix control;
    Matrix treated;
    Vector target;   // treated column means
    balancekit::Dataset ds;
};
Instance feasible_instance(std::mt19937_64& rng, std::size_t n0, std::size_t n1, std::size_t d, double tilt,
                           std::size_t shard_rows = 64);

/// Treated units drawn from shifted normals; no feasibility guarantee.
Instance shifted_instance(std::mt19937_64& rng, std::size_t n0, std::size_t n1, std::size_t d, double shift,
                          std::size_t shard_rows = 64);

Vector to_vector(const std::vector<double>& v);
double max_abs_diff(const Vector& a, const std::vector<double>& b);

// ---------------------------------------------------------------------------
// Independent reference solvers.

/// Minimiser of log sum exp(-xi.x_i) + xi.t by damped Newton with an explicit
/// Hessian on standardised columns; returns the normalised weights.
Vector entropy_newton_weights(const Matrix& control, const Vector& target);

/// Minimum-norm nonnegative w with sum w = 1 and control^T w = target, by
/// enumerating every support pattern (control rows <= 16).
Vector min_norm_enumerate(const Matrix& control, const Vector& target);

/// Same problem by Dykstra alternating projections between the affine set
/// and the orthant, polished by the exact affine solution on the support it
/// identifies.
Vector min_norm_alternating(const Matrix& control, const Vector& target, std::size_t iterations);

/// Unregularised logistic regression by Newton-Raphson; returns
/// [intercept, slopes...].
Vector logistic_newton(const Matrix& x, const std::vector<int>& y);

/// Least squares with intercept; returns [intercept, slopes...].
Vector least_squares(const Matrix& x, const Vector& y);

// ---------------------------------------------------------------------------
// Serial diagnostic references. `w` are control weights (any positive scale).

double oracle_smd(const std::vector<double>& xt, const std::vector<double>& xc, const std::vector<double>& w);
double oracle_variance_ratio(const std::vector<double>& xt, const std::vector<double>& xc,
                             const std::vector<double>& w);
/// Equal-width histogram on the pooled range; bins = 0 uses the
/// Freedman-Diaconis width clamped to [10, 10000].
double oracle_overlap(const std::vector<double>& xt, const std::vector<double>& xc, const std::vector<double>& w,
                      std::size_t bins);
/// Quadratic scan: both CDFs evaluated at every observed value.
double oracle_ks(const std::vector<double>& xt, const std::vector<double>& xc, const std::vector<double>& w);
/// Pooled unweighted covariance inverted explicitly.
double oracle_mahalanobis(const Matrix& treated, const Matrix& control, const std::vector<double>& w);
double oracle_ess(const std::vector<double>& w);

}  // namespace bk_test
