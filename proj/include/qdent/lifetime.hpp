#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace qdent::lifetime {

enum class Model {
    single_exp,  // exp(-t/tau) / tau
    rise_decay,  // (exp(-t/tau) - exp(-t/rise)) / (tau - rise), rise held fixed
};

const char* model_name(Model model);
Model model_from_name(const std::string& name);

// Time-resolved histogram on a uniform grid.  `irf` lives on the same grid
// and sums to one; its largest bin marks zero delay for the model.
struct DecayTrace {
    std::vector<double> bin_centers;
    std::vector<std::uint64_t> counts;
    std::vector<double> irf;

    bool empty() const { return bin_centers.empty(); }
    double bin_width() const;
    std::uint64_t total() const;
    // DataError on length mismatch, non-uniform grid or an IRF not summing
    // to one within 1e-9.
    void validate() const;
};

// Gaussian IRF FWHM from independent jitter contributions.
double combined_fwhm(double spad_fwhm_ns, double correlator_fwhm_ns);

// Unit-area Gaussian sampled on `bin_centers`, centred at zero delay.  A
// zero FWHM gives a single unit bin at the centre closest to zero.
std::vector<double> gaussian_irf(std::span<const double> bin_centers, double fwhm_ns);

// Uniform grid whose centres include zero, spanning [start, stop].
std::vector<double> make_grid(double start_ns, double stop_ns, double bin_width_ns);

// Expected counts per bin of `total_counts` photons emitted at t0 and
// blurred by the trace IRF, plus a flat background per bin.
std::vector<double> model_counts(std::span<const double> bin_centers, std::span<const double> irf, Model model,
                                 double tau_ns, double rise_tau_ns, double t0_ns, double total_counts,
                                 double background_per_bin);

// Direct-sum convolution on a uniform grid.  Output bin i collects
// signal[i - j + origin] * kernel[j], so a kernel peaked at `origin` does not
// shift the signal.
std::vector<double> convolve(std::span<const double> signal, std::span<const double> kernel, std::size_t origin);

struct SynthesisOptions {
    Model model = Model::single_exp;
    double tau_ns = 0.023;
    double rise_tau_ns = 0.0;   // rise_decay only
    double irf_fwhm_ns = 0.070;
    double total_counts = 1e5;  // expected signal counts
    double background_per_bin = 0.0;
    double t0_ns = 0.0;
    double bin_width_ns = 0.004;
    double start_ns = -0.4;
    // Defaults to 0.3 ns past 15 lifetimes when unset.
    std::optional<double> stop_ns;
    bool noiseless = false;     // round expected counts instead of sampling
};

// Poisson-sampled trace; total_counts == 0 gives an empty trace.
DecayTrace synthesize_trace(const SynthesisOptions& options, std::uint64_t seed);

struct Interval {
    double low = 0.0;
    double high = 0.0;
};

struct FitOptions {
    bool confidence_intervals = true;
    double ci_fraction = 0.05;  // chi2 <= (1 + ci_fraction) * chi2_min
};

struct DecayFitResult {
    Model model = Model::single_exp;
    double tau_ns = 0.0;
    double tau_err_ns = 0.0;    // curvature estimate
    Interval tau_ci;            // relative chi2 increase rule
    Interval tau_ci_delta1;     // delta chi2 = 1
    double rise_tau_ns = 0.0;
    double amplitude = 0.0;     // signal counts
    double background = 0.0;    // counts per bin
    double t0_ns = 0.0;
    double chi2 = 0.0;          // Poisson deviance
    int dof = 0;
    bool converged = false;
    bool tau_at_floor = false;
    bool ci_low_at_bound = false;
    bool ci_high_at_bound = false;
    double tau_floor_ns = 0.0;
    std::vector<std::string> warnings;
};

// Poisson maximum likelihood (deviance minimisation) over tau, amplitude,
// background and time offset.  rise_decay needs `fixed_rise_tau_ns`.
// DataError on empty or invalid traces, ConfigError on a missing rise time,
// NumericalError on non-convergence.
DecayFitResult fit_decay(const DecayTrace& trace, Model model, std::optional<double> fixed_rise_tau_ns,
                         const FitOptions& options = {});

// bin_center_ns, counts[, irf]
void write_trace_csv(std::ostream& out, const DecayTrace& trace);
// A missing irf column leaves `irf` empty for the caller to supply.
DecayTrace read_trace_csv(std::istream& in);

nlohmann::json to_json(const DecayFitResult& result);

}  // namespace qdent::lifetime
