#pragma once

#include <span>

#include <json.hpp>

#include "qdent/quantum.hpp"

namespace qdent::cascade {

// Physics of one quantum dot's XX-X cascade.
struct CascadeParams {
    double s_uev = 0.0;       // fine structure splitting magnitude, ueV
    double tau_x_ns = 0.05;   // exciton lifetime, ns
    double tau_xx_ns = 0.02;  // biexciton lifetime, ns
    double k = 1.0;           // weight of the coherent part, [0, 1]

    // Throws ConfigError on s < 0, non-positive lifetimes or k outside [0, 1].
    void validate() const;
};

// Keys: fss_ueV, tau_x_ns, tau_xx_ns, k.  Missing keys keep defaults.
CascadeParams params_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const CascadeParams& params);

// (|HH> + exp(i s t / hbar) |VV>) / sqrt2 at time t (ns) after the X state
// is populated.
quantum::PureState cascade_state_at(double t_ns, const CascadeParams& params);

// rho = k * rho_avg + (1 - k) * I/4 with rho_avg the exponentially weighted
// time average of cascade_state_at, in closed form.  With x = s tau_x / hbar
// the coherence rho(HH, VV) = 1 / (2 (1 + i x)): modulus 1/(2 sqrt(1 + x^2)),
// argument -atan(x) (rho(VV, HH) carries +atan(x)).
quantum::DensityMatrix time_averaged_density_matrix(const CascadeParams& params);

// FEF = (1 + k + 2k / sqrt(1 + (s tau_x / hbar)^2)) / 4
double fef_analytic(const CascadeParams& params);

struct FefPoint {
    double s_uev = 0.0;
    double fef = 0.0;
    double fef_err = 0.0;  // 1 sigma, > 0
};

struct FefFitResult {
    double tau_x_ns = 0.0;
    double tau_x_err_ns = 0.0;
    double k = 0.0;
    double k_err = 0.0;
    double covariance_tau_k = 0.0;
    double chi2 = 0.0;
    int dof = 0;
    int iterations = 0;
    bool converged = false;
};

// Weighted least-squares fit of fef_analytic to (s, FEF) points.  Needs at
// least 3 points over at least 2 distinct splittings (DataError otherwise);
// throws NumericalError when the minimiser does not converge.
FefFitResult fit_fef_curve(std::span<const FefPoint> points);

nlohmann::json to_json(const FefFitResult& fit);

// (rho - eps I/4) / (1 - eps): the forward model of uncorrelated
// multiphoton coincidences with eps = g2_x + g2_xx.
quantum::DensityMatrix mix_with_background(const quantum::DensityMatrix& rho, double epsilon);

struct G2Correction {
    quantum::DensityMatrix rho;
    double epsilon = 0.0;
    bool projected = false;  // the inversion left the PSD cone and was projected back
};

// Removes the isotropic multiphoton background (rho - eps I/4)/(1 - eps) with
// eps = g2_x + g2_xx.  Model-based: it assumes the background coincidences
// are uniformly spread over all 36 settings.
G2Correction g2_correct_density_matrix(const quantum::DensityMatrix& rho, double g2_x, double g2_xx);

// hbar / tau in ueV.
double natural_linewidth(double tau_ns);

// tau_bulk / tau_measured
double purcell_factor(double tau_measured_ns, double tau_bulk_ns);

}  // namespace qdent::cascade
