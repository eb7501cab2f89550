#include "qdent/cascade.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "qdent/constants.hpp"
#include "qdent/error.hpp"
#include "qdent/fit.hpp"

namespace qdent::cascade {

using quantum::Complex;
using quantum::DensityMatrix;
using quantum::Matrix4c;

void CascadeParams::validate() const
{
    std::ostringstream msg;
    if (!(s_uev >= 0.0) || !std::isfinite(s_uev)) {
        msg << "fss must be >= 0 ueV (got " << s_uev << ")";
    } else if (!(tau_x_ns > 0.0) || !std::isfinite(tau_x_ns)) {
        msg << "tau_x must be > 0 ns (got " << tau_x_ns << ")";
    } else if (!(tau_xx_ns > 0.0) || !std::isfinite(tau_xx_ns)) {
        msg << "tau_xx must be > 0 ns (got " << tau_xx_ns << ")";
    } else if (!(k >= 0.0 && k <= 1.0)) {
        msg << "k must lie in [0, 1] (got " << k << ")";
    }
    if (!msg.str().empty()) {
        throw ConfigError("cascade parameters: " + msg.str());
    }
}

CascadeParams params_from_json(const nlohmann::json& doc)
{
    CascadeParams p;
    try {
        p.s_uev = doc.value("fss_ueV", p.s_uev);
        p.tau_x_ns = doc.value("tau_x_ns", p.tau_x_ns);
        p.tau_xx_ns = doc.value("tau_xx_ns", p.tau_xx_ns);
        p.k = doc.value("k", p.k);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("cascade parameters: ") + e.what());
    }
    p.validate();
    return p;
}

nlohmann::json to_json(const CascadeParams& params)
{
    return nlohmann::json{{"fss_ueV", params.s_uev},
                          {"tau_x_ns", params.tau_x_ns},
                          {"tau_xx_ns", params.tau_xx_ns},
                          {"k", params.k}};
}

quantum::PureState cascade_state_at(double t_ns, const CascadeParams& params)
{
    if (!(t_ns >= 0.0)) {
        throw ConfigError("cascade_state_at: time must be >= 0");
    }
    params.validate();
    const double phase = params.s_uev * t_ns / constants::hbar_uev_ns;
    const double a = 1.0 / std::sqrt(2.0);
    quantum::Vector4c v = quantum::Vector4c::Zero();
    v[quantum::HH] = a;
    v[quantum::VV] = a * std::polar(1.0, phase);
    return quantum::PureState::normalized(v);
}

DensityMatrix time_averaged_density_matrix(const CascadeParams& params)
{
    params.validate();
    const double x = params.s_uev * params.tau_x_ns / constants::hbar_uev_ns;
    const Complex coherence = 0.5 / Complex(1.0, x);

    Matrix4c avg = Matrix4c::Zero();
    avg(quantum::HH, quantum::HH) = 0.5;
    avg(quantum::VV, quantum::VV) = 0.5;
    avg(quantum::HH, quantum::VV) = coherence;
    avg(quantum::VV, quantum::HH) = std::conj(coherence);

    const Matrix4c rho = params.k * avg + (1.0 - params.k) * Matrix4c::Identity() / 4.0;
    return quantum::validate_density_matrix(rho);
}

double fef_analytic(const CascadeParams& params)
{
    const double x = params.s_uev * params.tau_x_ns / constants::hbar_uev_ns;
    return 0.25 * (1.0 + params.k + 2.0 * params.k / std::sqrt(1.0 + x * x));
}

FefFitResult fit_fef_curve(std::span<const FefPoint> points)
{
    if (points.size() < 3) {
        throw DataError("fef fit needs at least 3 points (got " + std::to_string(points.size()) + ")");
    }
    std::set<double> distinct;
    for (const auto& p : points) {
        if (!(p.fef_err > 0.0)) {
            throw DataError("fef fit: every point needs a positive uncertainty");
        }
        if (!(p.s_uev >= 0.0)) {
            throw DataError("fef fit: splittings must be >= 0");
        }
        distinct.insert(p.s_uev);
    }
    if (distinct.size() < 2) {
        throw DataError("fef fit: degenerate data, all points share the same splitting");
    }

    const int n = static_cast<int>(points.size());
    const fit::ResidualFn residuals = [&](const Eigen::VectorXd& x, Eigen::VectorXd& r) {
        CascadeParams p;
        p.tau_x_ns = std::abs(x[0]);
        p.k = x[1];
        for (int i = 0; i < n; ++i) {
            p.s_uev = points[i].s_uev;
            r[i] = (fef_analytic(p) - points[i].fef) / points[i].fef_err;
        }
    };

    // k from the lowest-splitting point, tau from a coarse log scan.
    const auto lowest = std::min_element(points.begin(), points.end(),
                                         [](const FefPoint& a, const FefPoint& b) { return a.s_uev < b.s_uev; });
    const double k0 = std::clamp((4.0 * lowest->fef - 1.0) / 3.0, 0.05, 1.0);
    Eigen::VectorXd x0(2);
    double best = std::numeric_limits<double>::infinity();
    for (double log_tau = -4.0; log_tau <= 1.0; log_tau += 0.05) {
        Eigen::VectorXd trial(2);
        trial << std::pow(10.0, log_tau), k0;
        const double cost = fit::sum_of_squares(residuals, n, trial);
        if (cost < best) {
            best = cost;
            x0 = trial;
        }
    }

    const fit::Result r = fit::least_squares(residuals, n, x0);
    if (!r.converged || !r.x.allFinite()) {
        throw NumericalError("fef fit did not converge: " + r.status);
    }
    FefFitResult out;
    out.tau_x_ns = std::abs(r.x[0]);
    out.k = r.x[1];
    out.tau_x_err_ns = std::sqrt(r.covariance(0, 0));
    out.k_err = std::sqrt(r.covariance(1, 1));
    out.covariance_tau_k = (r.x[0] < 0 ? -1.0 : 1.0) * r.covariance(0, 1);
    out.chi2 = r.cost;
    out.dof = n - 2;
    out.iterations = r.evaluations;
    out.converged = r.converged;
    return out;
}

nlohmann::json to_json(const FefFitResult& fit)
{
    return nlohmann::json{
        {"tau_x_ns", {{"value", fit.tau_x_ns}, {"uncertainty", fit.tau_x_err_ns}}},
        {"k", {{"value", fit.k}, {"uncertainty", fit.k_err}}},
        {"covariance_tau_k", fit.covariance_tau_k},
        {"chi2", fit.chi2},
        {"dof", fit.dof},
        {"iterations", fit.iterations},
        {"converged", fit.converged}};
}

DensityMatrix mix_with_background(const DensityMatrix& rho, double epsilon)
{
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) {
        throw ConfigError("background fraction must lie in [0, 1]");
    }
    return quantum::validate_density_matrix((1.0 - epsilon) * rho.matrix() +
                                            epsilon * Matrix4c::Identity() / 4.0);
}

G2Correction g2_correct_density_matrix(const DensityMatrix& rho, double g2_x, double g2_xx)
{
    if (!(g2_x >= 0.0 && g2_x < 0.5) || !(g2_xx >= 0.0 && g2_xx < 0.5)) {
        throw ConfigError("g2 values must lie in [0, 0.5)");
    }
    const double eps = g2_x + g2_xx;
    if (eps >= 1.0) {
        throw ConfigError("g2 correction: g2_x + g2_xx must be < 1");
    }
    const Matrix4c corrected = (rho.matrix() - eps * Matrix4c::Identity() / 4.0) / (1.0 - eps);
    if (std::abs(corrected.trace()) < 1e-12) {
        throw NumericalError("g2 correction produced a trace-zero matrix");
    }
    const auto report = quantum::check_density_matrix(corrected);
    if (report.ok) {
        return {quantum::validate_density_matrix(corrected), eps, false};
    }
    return {quantum::project_to_physical(corrected), eps, true};
}

double natural_linewidth(double tau_ns)
{
    if (!(tau_ns > 0.0)) {
        throw ConfigError("natural_linewidth: lifetime must be > 0");
    }
    return constants::hbar_uev_ns / tau_ns;
}

double purcell_factor(double tau_measured_ns, double tau_bulk_ns)
{
    if (!(tau_measured_ns > 0.0) || !(tau_bulk_ns > 0.0)) {
        throw ConfigError("purcell_factor: lifetimes must be > 0");
    }
    return tau_bulk_ns / tau_measured_ns;
}

}  // namespace qdent::cascade
