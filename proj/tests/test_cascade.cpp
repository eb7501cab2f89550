#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "oracles.hpp"
#include "qdent/cascade.hpp"
#include "qdent/constants.hpp"
#include "qdent/error.hpp"

using namespace qdent;
using namespace qdent::cascade;
using quantum::DensityMatrix;
using quantum::Matrix4c;

namespace {

CascadeParams params(double s, double tau_x, double k)
{
    CascadeParams p;
    p.s_uev = s;
    p.tau_x_ns = tau_x;
    p.tau_xx_ns = 0.018;
    p.k = k;
    return p;
}

const std::vector<double> s_grid{0.0, 0.2, 1.0, 2.0, 5.0, 20.0};
const std::vector<double> tau_grid{0.02, 0.051, 0.12};
const std::vector<double> k_grid{0.8, 0.892, 1.0};

}  // namespace

TEST_CASE("parameter validation")
{
    CHECK_NOTHROW(params(0.0, 0.05, 1.0).validate());
    CHECK_THROWS_AS(params(-1.0, 0.05, 1.0).validate(), ConfigError);
    CHECK_THROWS_AS(params(0.0, 0.0, 1.0).validate(), ConfigError);
    CHECK_THROWS_AS(params(0.0, 0.05, 1.2).validate(), ConfigError);
    CascadeParams p = params(0.0, 0.05, 1.0);
    p.tau_xx_ns = -1.0;
    CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("cascade_state_at phase evolution")
{
    const quantum::Vector4c phi = quantum::PureState::phi_plus().amplitudes();
    CHECK((cascade_state_at(0.0, params(7.0, 0.05, 1.0)).amplitudes() - phi).norm() < 1e-15);
    CHECK((cascade_state_at(3.0, params(0.0, 0.05, 1.0)).amplitudes() - phi).norm() < 1e-15);
    const quantum::Vector4c minus = quantum::PureState::phi_minus().amplitudes();
    const double s = std::numbers::pi * constants::hbar_uev_ns;
    CHECK((cascade_state_at(1.0, params(s, 0.05, 1.0)).amplitudes() - minus).norm() < 1e-12);
    CHECK_THROWS_AS(cascade_state_at(-0.1, params(1.0, 0.05, 1.0)), ConfigError);
}

TEST_CASE("time_averaged_density_matrix limits")
{
    const Matrix4c bell = DensityMatrix::from_pure(quantum::PureState::phi_plus()).matrix();
    CHECK((time_averaged_density_matrix(params(0.0, 0.05, 1.0)).matrix() - bell).norm() < 1e-15);

    Matrix4c dephased = Matrix4c::Zero();
    dephased(0, 0) = dephased(3, 3) = 0.5;
    // Residual coherence 1 / (2 sqrt(1 + x^2)) with x = s tau / hbar.
    const double x = 1e6 * 0.05 / constants::hbar_uev_ns;
    const double residual = (time_averaged_density_matrix(params(1e6, 0.05, 1.0)).matrix() - dephased).cwiseAbs().maxCoeff();
    CHECK(residual == doctest::Approx(0.5 / std::sqrt(1.0 + x * x)).epsilon(1e-9));

    CHECK((time_averaged_density_matrix(params(3.0, 0.05, 0.0)).matrix() - Matrix4c::Identity() / 4.0).norm() < 1e-15);
}

TEST_CASE("closed-form time average matches numerical quadrature")
{
    for (double s : s_grid) {
        for (double tau : tau_grid) {
            for (double k : k_grid) {
                const Matrix4c expected = oracle::time_average_by_quadrature(s, tau, k);
                const Matrix4c got = time_averaged_density_matrix(params(s, tau, k)).matrix();
                CHECK((got - expected).cwiseAbs().maxCoeff() < 1e-9);
            }
        }
    }
}

TEST_CASE("time-averaged states are physical")
{
    for (double s : s_grid) {
        for (double tau : tau_grid) {
            for (double k : k_grid) {
                CHECK(quantum::check_density_matrix(time_averaged_density_matrix(params(s, tau, k)).matrix()).ok);
            }
        }
    }
}

TEST_CASE("fef_analytic reference values")
{
    CHECK(fef_analytic(params(0.0, 0.05, 1.0)) == doctest::Approx(1.0).epsilon(1e-15));
    // (1 + 3k)/4 with k = 0.892
    CHECK(std::abs(fef_analytic(params(0.0, 0.051, 0.892)) - 0.919) < 1e-3);
    CHECK(fef_analytic(params(0.0, 0.051, 0.892)) == doctest::Approx(0.919).epsilon(1e-12));
    // Direct evaluation: x = 2 * 0.164 / hbar, (1 + k + 2k / sqrt(1 + x^2)) / 4 = 0.876374...
    CHECK(std::abs(fef_analytic(params(2.0, 0.164, 0.898)) - 0.876) < 1e-3);
}

TEST_CASE("FEF of the time average equals the analytic law on the grid")
{
    for (double s : s_grid) {
        for (double tau : tau_grid) {
            for (double k : k_grid) {
                const CascadeParams p = params(s, tau, k);
                const DensityMatrix rho = time_averaged_density_matrix(p);
                CHECK(std::abs(quantum::fully_entangled_fraction(rho) - fef_analytic(p)) < 1e-9);
                CHECK(std::abs(quantum::concurrence(rho) - std::max(0.0, 2.0 * fef_analytic(p) - 1.0)) < 1e-9);
            }
        }
    }
}

TEST_CASE("fef_analytic decreases with s and increases with k")
{
    double previous = 2.0;
    for (double s = 0.0; s < 30.0; s += 0.25) {
        const double f = fef_analytic(params(s, 0.051, 0.9));
        CHECK(f < previous);
        previous = f;
    }
    previous = 0.0;
    for (double k = 0.0; k <= 1.0; k += 0.05) {
        const double f = fef_analytic(params(1.0, 0.051, k));
        CHECK(f > previous);
        previous = f;
    }
}

TEST_CASE("g2 correction")
{
    Rng rng = make_rng(5);
    const DensityMatrix rho = quantum::validate_density_matrix(oracle::random_density_matrix(rng));

    const G2Correction none = g2_correct_density_matrix(rho, 0.0, 0.0);
    CHECK((none.rho.matrix() - rho.matrix()).norm() < 1e-15);

    const G2Correction mixed = g2_correct_density_matrix(DensityMatrix::maximally_mixed(), 0.1, 0.2);
    CHECK((mixed.rho.matrix() - Matrix4c::Identity() / 4.0).norm() < 1e-15);

    for (double eps : {0.01, 0.028, 0.1, 0.3}) {
        const DensityMatrix blurred = mix_with_background(rho, eps);
        const G2Correction back = g2_correct_density_matrix(blurred, eps / 2.0, eps / 2.0);
        CHECK_FALSE(back.projected);
        CHECK((back.rho.matrix() - rho.matrix()).cwiseAbs().maxCoeff() < 1e-12);
    }

    CHECK_THROWS_AS(g2_correct_density_matrix(rho, 0.6, 0.0), ConfigError);
    CHECK_THROWS_AS(g2_correct_density_matrix(rho, -0.1, 0.0), ConfigError);
}

TEST_CASE("g2 correction of a FEF 0.930 state")
{
    // Werner state with FEF 0.930; the corrected FEF follows (F - eps/4)/(1 - eps).
    const double f = 0.930;
    const double eps = 0.016 + 0.012;
    const DensityMatrix rho = quantum::validate_density_matrix(oracle::werner((4.0 * f - 1.0) / 3.0));
    const G2Correction c = g2_correct_density_matrix(rho, 0.016, 0.012);
    const double oracle_fef = (f - eps / 4.0) / (1.0 - eps);
    CHECK(c.epsilon == doctest::Approx(0.028));
    CHECK(quantum::fully_entangled_fraction(c.rho) == doctest::Approx(oracle_fef).epsilon(1e-12));
    CHECK(quantum::fully_entangled_fraction(c.rho) == doctest::Approx(0.949588477366).epsilon(1e-9));
    CHECK(std::abs(quantum::concurrence(c.rho) - 0.90) < 0.01);
}

TEST_CASE("g2 correction projects back when it leaves the state space")
{
    const DensityMatrix pure_state = DensityMatrix::from_pure(quantum::PureState::phi_plus());
    const G2Correction c = g2_correct_density_matrix(pure_state, 0.1, 0.1);
    CHECK(c.projected);
    CHECK(quantum::check_density_matrix(c.rho.matrix()).ok);
}

TEST_CASE("fit_fef_curve recovers its generator")
{
    std::vector<FefPoint> points;
    const CascadeParams truth = params(0.0, 0.051, 0.892);
    for (double s = 0.0; s <= 3.0; s += 0.25) {
        CascadeParams p = truth;
        p.s_uev = s;
        points.push_back({s, fef_analytic(p), 0.01});
    }
    const FefFitResult fit = fit_fef_curve(points);
    CHECK(fit.converged);
    CHECK(std::abs(fit.tau_x_ns - 0.051) < 1e-6);
    CHECK(std::abs(fit.k - 0.892) < 1e-6);
    CHECK(fit.tau_x_err_ns > 0.0);
    CHECK(fit.k_err > 0.0);
    CHECK(fit.chi2 < 1e-12);
    CHECK(fit.dof == static_cast<int>(points.size()) - 2);

    const std::vector<FefPoint> degenerate{{0.0, 0.9, 0.01}, {0.0, 0.91, 0.01}};
    CHECK_THROWS_AS(fit_fef_curve(degenerate), DataError);
    const std::vector<FefPoint> same_s{{0.5, 0.9, 0.01}, {0.5, 0.91, 0.01}, {0.5, 0.92, 0.01}};
    CHECK_THROWS_AS(fit_fef_curve(same_s), DataError);
}

TEST_CASE("fit on the QD2 raw curve shape")
{
    // Points sampled from the QD2 raw curve across the splittings of its scan.
    std::vector<FefPoint> points;
    for (double s : {0.2, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0}) {
        points.push_back({s, fef_analytic(params(s, 0.051, 0.892)), 0.01});
    }
    const FefFitResult fit = fit_fef_curve(points);
    CHECK(fit.tau_x_ns * 1e3 == doctest::Approx(51.0).epsilon(1e-4));
    CHECK(fit.k == doctest::Approx(0.892).epsilon(1e-4));
}

TEST_CASE("natural linewidth and Purcell factor")
{
    CHECK(natural_linewidth(0.6582119569) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(natural_linewidth(0.270) - 2.44) < 0.01);
    CHECK(natural_linewidth(0.270) == doctest::Approx(2.437822).epsilon(1e-6));
    CHECK(std::abs(natural_linewidth(0.040) - 16.5) < 0.05);
    CHECK(natural_linewidth(0.040) == doctest::Approx(16.455299).epsilon(1e-6));
    CHECK_THROWS_AS(natural_linewidth(0.0), ConfigError);

    CHECK(std::abs(purcell_factor(0.014, 0.164) - 11.7) < 0.1);
    CHECK(std::abs(purcell_factor(0.023, 0.214) - 9.3) < 0.1);
    CHECK(purcell_factor(0.3, 0.3) == doctest::Approx(1.0));
    CHECK_THROWS_AS(purcell_factor(-1.0, 0.3), ConfigError);
}

TEST_CASE("cascade parameters JSON")
{
    const nlohmann::json doc = {{"fss_ueV", 0.2}, {"tau_x_ns", 0.051}, {"tau_xx_ns", 0.018}, {"k", 0.892}};
    const CascadeParams p = params_from_json(doc);
    CHECK(p.s_uev == 0.2);
    CHECK(p.tau_x_ns == 0.051);
    CHECK(p.k == 0.892);
    CHECK(params_from_json(to_json(p)).tau_xx_ns == 0.018);
    CHECK_THROWS_AS(params_from_json({{"k", "high"}}), ConfigError);
    CHECK_THROWS_AS(params_from_json({{"k", 2.0}}), ConfigError);
}
