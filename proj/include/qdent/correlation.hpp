#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "qdent/photon_stream.hpp"

namespace qdent::photon {

// Coincidence histogram of delays t_b - t_a.  Bin i is centred at
// (i - zero_bin) * bin_width; the range is symmetric about zero.
struct CorrelationHistogram {
    double bin_width_ns = 0.1;
    std::vector<std::uint64_t> counts;
    std::size_t zero_bin = 0;

    double center(std::size_t i) const
    {
        return (static_cast<double>(i) - static_cast<double>(zero_bin)) * bin_width_ns;
    }
    // Largest |delay| covered by a bin edge.
    double half_range_ns() const { return (static_cast<double>(zero_bin) + 0.5) * bin_width_ns; }
    std::uint64_t total() const;
    // Counts of bins whose centre lies in [lo, hi).
    std::uint64_t sum(double lo_ns, double hi_ns) const;
};

CorrelationHistogram empty_histogram(double bin_width_ns, double window_ns);

// All-pairs (multi-stop) histogram of t_b - t_a for |t_b - t_a| within the
// histogram range.  Both inputs must be sorted.
CorrelationHistogram cross_correlate(std::span<const double> times_a, std::span<const double> times_b,
                                     double bin_width_ns, double window_ns);

// Start-stop coincidences between two channels of a stream over +-window.
CorrelationHistogram hbt_histogram(const EventStream& stream, double bin_width_ns, double window_ns,
                                   std::uint8_t channel_a = 0, std::uint8_t channel_b = 1);

struct G2Result {
    double g2 = 0.0;
    double g2_err = 0.0;
    double zero_area = 0.0;
    double side_mean = 0.0;
    int side_peaks = 0;  // used on each side
};

// zero / mean(side); Poisson error propagation.  With zero == 0 the error is
// one count over the side mean.
G2Result g2_from_areas(double zero_area, std::span<const double> side_areas);

// Integrates the zero-delay peak and the side peaks k * rep_period (k != 0)
// over windows of +-rep_period/2.  Needs at least 3 complete side peaks on
// each side of zero (DataError otherwise).
G2Result g2_zero(const CorrelationHistogram& hist, double rep_period_ns);

// Closed-form g2(0) of simulate_stream's cascade generator: 2p / (q (1+p)^2)
// with p the multiphoton probability and q the preparation fidelity;
// 1 for poissonian statistics.  Background counts are not included.
double expected_g2_zero(const SourceConfig& source);

struct HomConfig {
    double delay_ns = 1.8;                  // arm difference of both interferometers
    double indistinguishability = 1.0;      // M
    double bs_reflectivity = 0.5;           // R of the final beam splitter
    double interferometer_visibility = 1.0; // V_s
    bool copolarized = true;
    double cluster_period_ns = 12.5;        // spacing of the double-pulse clusters
    std::uint8_t source_channel = 0;        // stream channel holding the emitted photons
    DetectorConfig output_detector;         // applied to both exit ports
    double bin_width_ns = 0.02;
    double window_ns = 5.0;

    void validate() const;
};

// Pairs of consecutive source pulses (2j, 2j+1) form the early and late
// photon of cluster j.  Each photon takes the short or long arm (50:50); the
// early-long and late-short photons meet at the final beam splitter, where
// two signal photons leave through different ports with probability
// R^2 + T^2 - 2RT * M * V_s^2 (copolarized) or R^2 + T^2 (crossed).  All other
// photons are routed independently.  Returns the exit-port coincidence
// histogram (port 1 minus port 0), showing the five-peak cluster.
CorrelationHistogram hom_simulate(const EventStream& photons, const HomConfig& config, std::uint64_t seed);

// M V_s^2 * 2RT / (R^2 + T^2)
double expected_hom_visibility(double indistinguishability, double bs_reflectivity,
                               double interferometer_visibility);

struct PeakFit {
    double area = 0.0;
    double area_err = 0.0;
    double center_ns = 0.0;
    double sigma_ns = 0.0;
    double tau_ns = 0.0;
    double background = 0.0;  // per bin
    double chi2 = 0.0;
    bool converged = false;
    std::string status;
};

// Fits counts within center +- half_window with a Gaussian convolved with a
// two-sided exponential plus a flat background; area is the integral of the
// peak term.
PeakFit fit_peak(const CorrelationHistogram& hist, double center_ns, double half_window_ns);

struct VisibilityResult {
    double v = 0.0;
    double v_err = 0.0;
    PeakFit co;
    PeakFit cross;
};

// 1 - a_co / a_cross with uncorrelated error propagation.
VisibilityResult visibility_from_areas(double a_co, double a_co_err, double a_cross, double a_cross_err);

// Fits the zero-delay peak of both histograms over +-peak_spacing/2 and
// returns V = 1 - A_co / A_cross.  Throws NumericalError if either peak fit
// fails to converge.
VisibilityResult hom_visibility(const CorrelationHistogram& co, const CorrelationHistogram& cross,
                                double peak_spacing_ns);

// M = (V + 2 g2) (R^2 + T^2) / (2RT) / V_s^2, T = 1 - R.
double indistinguishability_from_hom(double v_meas, double g2, double bs_reflectivity,
                                     double interferometer_visibility);

// r / (1 + r) with r = tau_x / tau_xx.
double hom_upper_bound(double tau_x_ns, double tau_xx_ns);

// Forward saturation model: eta r / (1 + eta r tau_dead).
double measured_rate(double arriving_rate_hz, double detector_efficiency, double deadtime_ns);

// Inverse of measured_rate: r_meas / (eta (1 - r_meas tau_dead)).
double arriving_rate(double measured_rate_hz, double detector_efficiency, double deadtime_ns);

// arriving / (rep_rate * setup_transmission * prep_fidelity); DataError
// when the result exceeds 1.
double extraction_efficiency(double arriving_rate_hz, double rep_rate_hz, double setup_transmission,
                             double prep_fidelity);

// bin_center_ns, counts
void write_histogram_csv(std::ostream& out, const CorrelationHistogram& hist);
CorrelationHistogram read_histogram_csv(std::istream& in);

HomConfig hom_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const G2Result& g2);
nlohmann::json to_json(const PeakFit& fit);
nlohmann::json to_json(const VisibilityResult& v);

}  // namespace qdent::photon
