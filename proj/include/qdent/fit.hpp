#pragma once

#include <functional>
#include <string>

#include <Eigen/Dense>

namespace qdent::fit {

// Fills `r` (already sized) with residuals for parameters `x`.
using ResidualFn = std::function<void(const Eigen::VectorXd& x, Eigen::VectorXd& r)>;

struct Options {
    int max_evaluations = 4000;
    double xtol = 1e-12;
    double ftol = 1e-14;
};

struct Result {
    Eigen::VectorXd x;
    double cost = 0.0;  // sum of squared residuals
    int evaluations = 0;
    bool converged = false;
    std::string status;
    // (J^T J)^-1 at the solution; the 1-sigma covariance when residuals are
    // normalised by their standard deviations.
    Eigen::MatrixXd covariance;
};

// Levenberg-Marquardt minimisation of sum r_i(x)^2 with a finite-difference
// Jacobian.
Result least_squares(const ResidualFn& residuals, int residual_count, Eigen::VectorXd x0,
                     const Options& options = {});

// Central-difference Jacobian d r_i / d x_j.
Eigen::MatrixXd numerical_jacobian(const ResidualFn& residuals, int residual_count,
                                   const Eigen::VectorXd& x);

// (J^T J)^-1 via a pseudo-inverse so rank-deficient problems still return
// finite (large) variances along well-determined directions.
Eigen::MatrixXd covariance_from_jacobian(const Eigen::MatrixXd& jacobian);

double sum_of_squares(const ResidualFn& residuals, int residual_count, const Eigen::VectorXd& x);

// Signed square root of the Poisson deviance term 2 (m - y + y ln(y/m)), so
// that the sum of squares is the likelihood-ratio statistic.
double poisson_deviance_residual(double observed, double model);

}  // namespace qdent::fit
