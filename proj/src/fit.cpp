#include "qdent/fit.hpp"

#include <algorithm>
#include <cmath>

#include <unsupported/Eigen/NonLinearOptimization>
#include <unsupported/Eigen/NumericalDiff>

namespace qdent::fit {

namespace {

struct Functor {
    using Scalar = double;
    enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };
    using InputType = Eigen::VectorXd;
    using ValueType = Eigen::VectorXd;
    using JacobianType = Eigen::MatrixXd;

    const ResidualFn* fn = nullptr;
    int n_inputs = 0;
    int n_values = 0;
    mutable int calls = 0;

    int inputs() const { return n_inputs; }
    int values() const { return n_values; }

    int operator()(const Eigen::VectorXd& x, Eigen::VectorXd& fvec) const
    {
        ++calls;
        (*fn)(x, fvec);
        for (Eigen::Index i = 0; i < fvec.size(); ++i) {
            if (!std::isfinite(fvec[i])) {
                fvec[i] = 1e150;
            }
        }
        return 0;
    }
};

std::string describe(Eigen::LevenbergMarquardtSpace::Status status)
{
    using namespace Eigen::LevenbergMarquardtSpace;
    switch (status) {
    case RelativeReductionTooSmall: return "relative reduction below ftol";
    case RelativeErrorTooSmall: return "relative step below xtol";
    case RelativeErrorAndReductionTooSmall: return "step and reduction below tolerance";
    case CosinusTooSmall: return "gradient orthogonal to residuals";
    case TooManyFunctionEvaluation: return "evaluation limit reached";
    case FtolTooSmall: return "ftol too small";
    case XtolTooSmall: return "xtol too small";
    case GtolTooSmall: return "gtol too small";
    case ImproperInputParameters: return "improper input parameters";
    default: return "not started";
    }
}

}  // namespace

double sum_of_squares(const ResidualFn& residuals, int residual_count, const Eigen::VectorXd& x)
{
    Eigen::VectorXd r(residual_count);
    residuals(x, r);
    return r.squaredNorm();
}

Eigen::MatrixXd numerical_jacobian(const ResidualFn& residuals, int residual_count,
                                   const Eigen::VectorXd& x)
{
    Eigen::MatrixXd jac(residual_count, x.size());
    Eigen::VectorXd rp(residual_count), rm(residual_count);
    for (Eigen::Index j = 0; j < x.size(); ++j) {
        const double h = 1e-6 * std::max(1.0, std::abs(x[j]));
        Eigen::VectorXd xp = x, xm = x;
        xp[j] += h;
        xm[j] -= h;
        residuals(xp, rp);
        residuals(xm, rm);
        jac.col(j) = (rp - rm) / (2.0 * h);
    }
    return jac;
}

Eigen::MatrixXd covariance_from_jacobian(const Eigen::MatrixXd& jacobian)
{
    const Eigen::MatrixXd jtj = jacobian.transpose() * jacobian;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jtj);
    const Eigen::VectorXd& w = eig.eigenvalues();
    const double cutoff = 1e-14 * std::max(w.cwiseAbs().maxCoeff(), 1e-300);
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(w.size());
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        if (w[i] > cutoff) {
            inv[i] = 1.0 / w[i];
        }
    }
    return eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
}

Result least_squares(const ResidualFn& residuals, int residual_count, Eigen::VectorXd x0,
                     const Options& options)
{
    Result out;
    Functor functor;
    functor.fn = &residuals;
    functor.n_inputs = static_cast<int>(x0.size());
    functor.n_values = residual_count;

    Eigen::NumericalDiff<Functor, Eigen::Central> diff(functor);
    Eigen::LevenbergMarquardt<Eigen::NumericalDiff<Functor, Eigen::Central>, double> lm(diff);
    lm.parameters.maxfev = options.max_evaluations;
    lm.parameters.xtol = options.xtol;
    lm.parameters.ftol = options.ftol;

    const auto status = lm.minimize(x0);
    out.x = x0;
    out.evaluations = static_cast<int>(lm.nfev);
    out.status = describe(status);
    out.converged = status == Eigen::LevenbergMarquardtSpace::RelativeReductionTooSmall ||
                    status == Eigen::LevenbergMarquardtSpace::RelativeErrorTooSmall ||
                    status == Eigen::LevenbergMarquardtSpace::RelativeErrorAndReductionTooSmall ||
                    status == Eigen::LevenbergMarquardtSpace::CosinusTooSmall ||
                    status == Eigen::LevenbergMarquardtSpace::FtolTooSmall ||
                    status == Eigen::LevenbergMarquardtSpace::XtolTooSmall ||
                    status == Eigen::LevenbergMarquardtSpace::GtolTooSmall;
    out.cost = sum_of_squares(residuals, residual_count, out.x);
    out.covariance = covariance_from_jacobian(numerical_jacobian(residuals, residual_count, out.x));
    return out;
}

double poisson_deviance_residual(double observed, double model)
{
    const double m = std::max(model, 1e-12);
    double d = m - observed;
    if (observed > 0.0) {
        d += observed * std::log(observed / m);
    }
    const double r = std::sqrt(std::max(2.0 * d, 0.0));
    return observed >= m ? r : -r;
}

}  // namespace qdent::fit
