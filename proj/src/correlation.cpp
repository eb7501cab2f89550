#include "qdent/correlation.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>

#include "qdent/constants.hpp"
#include "qdent/error.hpp"
#include "qdent/fit.hpp"
#include "qdent/io.hpp"
#include "qdent/random.hpp"

namespace qdent::photon {

namespace {

// exp(x^2) erfc(x) for x >= 0.
double erfcx(double x)
{
    if (x < 25.0) {
        return std::exp(x * x) * std::erfc(x);
    }
    const double inv2 = 1.0 / (x * x);
    return (1.0 - 0.5 * inv2 + 0.75 * inv2 * inv2) / (x * std::sqrt(std::numbers::pi));
}

// exp(a) erfc(x) where a - x^2 = -t^2 / (2 sigma^2).
double scaled_erfc_term(double a, double x, double t, double sigma)
{
    if (x < 0.0) {
        return std::exp(a) * std::erfc(x);
    }
    return std::exp(-t * t / (2.0 * sigma * sigma)) * erfcx(x);
}

// Unit-area Gaussian(sigma) convolved with a two-sided exponential(tau).
double gauss_laplace(double t, double sigma, double tau)
{
    const double s2 = sigma * sigma;
    const double root2s = std::numbers::sqrt2 * sigma;
    const double a_minus = s2 / (2.0 * tau * tau) - t / tau;
    const double a_plus = s2 / (2.0 * tau * tau) + t / tau;
    const double x_minus = (s2 / tau - t) / root2s;
    const double x_plus = (s2 / tau + t) / root2s;
    return (scaled_erfc_term(a_minus, x_minus, t, sigma) + scaled_erfc_term(a_plus, x_plus, -t, sigma)) /
           (4.0 * tau);
}

void require_positive(double value, const char* what)
{
    if (!(value > 0.0) || !std::isfinite(value)) {
        throw ConfigError(std::string(what) + " must be > 0");
    }
}

}  // namespace

std::uint64_t CorrelationHistogram::total() const
{
    std::uint64_t t = 0;
    for (auto c : counts) {
        t += c;
    }
    return t;
}

std::uint64_t CorrelationHistogram::sum(double lo_ns, double hi_ns) const
{
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        const double c = center(i);
        if (c >= lo_ns && c < hi_ns) {
            t += counts[i];
        }
    }
    return t;
}

CorrelationHistogram empty_histogram(double bin_width_ns, double window_ns)
{
    require_positive(bin_width_ns, "bin width");
    require_positive(window_ns, "correlation window");
    CorrelationHistogram h;
    h.bin_width_ns = bin_width_ns;
    const auto half = static_cast<std::size_t>(std::ceil(window_ns / bin_width_ns - 0.5));
    h.zero_bin = half;
    h.counts.assign(2 * half + 1, 0);
    return h;
}

CorrelationHistogram cross_correlate(std::span<const double> times_a, std::span<const double> times_b,
                                     double bin_width_ns, double window_ns)
{
    CorrelationHistogram h = empty_histogram(bin_width_ns, window_ns);
    const double range = h.half_range_ns();
    const auto n_bins = static_cast<long long>(h.counts.size());
    std::size_t start = 0;
    for (double ta : times_a) {
        while (start < times_b.size() && times_b[start] < ta - range) {
            ++start;
        }
        for (std::size_t j = start; j < times_b.size() && times_b[j] < ta + range; ++j) {
            const double dt = times_b[j] - ta;
            const long long bin = static_cast<long long>(h.zero_bin) + std::llround(dt / bin_width_ns);
            if (bin >= 0 && bin < n_bins) {
                ++h.counts[static_cast<std::size_t>(bin)];
            }
        }
    }
    return h;
}

CorrelationHistogram hbt_histogram(const EventStream& stream, double bin_width_ns, double window_ns,
                                   std::uint8_t channel_a, std::uint8_t channel_b)
{
    if (stream.channel_count < 2) {
        throw ConfigError("hbt_histogram: stream needs at least 2 channels");
    }
    if (channel_a >= stream.channel_count || channel_b >= stream.channel_count || channel_a == channel_b) {
        throw ConfigError("hbt_histogram: invalid channel pair");
    }
    std::vector<double> a, b;
    for (const auto& e : stream.events) {
        if (e.channel == channel_a) {
            a.push_back(e.t_ns);
        } else if (e.channel == channel_b) {
            b.push_back(e.t_ns);
        }
    }
    return cross_correlate(a, b, bin_width_ns, window_ns);
}

G2Result g2_from_areas(double zero_area, std::span<const double> side_areas)
{
    if (side_areas.empty()) {
        throw DataError("g2: no side peaks");
    }
    double side_total = 0.0;
    for (double s : side_areas) {
        side_total += s;
    }
    G2Result r;
    r.zero_area = zero_area;
    r.side_mean = side_total / static_cast<double>(side_areas.size());
    if (!(r.side_mean > 0.0)) {
        throw DataError("g2: side peaks are empty");
    }
    r.g2 = zero_area / r.side_mean;
    if (zero_area > 0.0) {
        r.g2_err = r.g2 * std::sqrt(1.0 / zero_area + 1.0 / side_total);
    } else {
        r.g2_err = 1.0 / r.side_mean;
    }
    return r;
}

G2Result g2_zero(const CorrelationHistogram& hist, double rep_period_ns)
{
    require_positive(rep_period_ns, "repetition period");
    const double half = 0.5 * rep_period_ns;
    const int per_side = static_cast<int>(std::floor((hist.half_range_ns() - half) / rep_period_ns + 1e-9));
    if (per_side < 3) {
        throw DataError("g2: histogram range holds " + std::to_string(std::max(per_side, 0)) +
                        " complete side peaks per side, need at least 3");
    }
    std::vector<double> sides;
    for (int k = 1; k <= per_side; ++k) {
        const double c = k * rep_period_ns;
        sides.push_back(static_cast<double>(hist.sum(c - half, c + half)));
        sides.push_back(static_cast<double>(hist.sum(-c - half, -c + half)));
    }
    G2Result r = g2_from_areas(static_cast<double>(hist.sum(-half, half)), sides);
    r.side_peaks = per_side;
    return r;
}

double expected_g2_zero(const SourceConfig& source)
{
    if (source.statistics == Statistics::poissonian) {
        return 1.0;
    }
    const double p = source.multiphoton_prob;
    const double q = source.prep_fidelity;
    if (!(q > 0.0)) {
        throw ConfigError("expected_g2_zero: preparation fidelity must be > 0");
    }
    return 2.0 * p / (q * (1.0 + p) * (1.0 + p));
}

void HomConfig::validate() const
{
    require_positive(delay_ns, "HOM delay");
    require_positive(cluster_period_ns, "HOM cluster period");
    if (!(bs_reflectivity > 0.0 && bs_reflectivity < 1.0)) {
        throw ConfigError("HOM: beam splitter reflectivity must lie in (0, 1)");
    }
    if (!(indistinguishability >= 0.0 && indistinguishability <= 1.0) ||
        !(interferometer_visibility >= 0.0 && interferometer_visibility <= 1.0)) {
        throw ConfigError("HOM: indistinguishability and interferometer visibility must lie in [0, 1]");
    }
    if (2.0 * delay_ns + 0.0 >= cluster_period_ns) {
        throw ConfigError("HOM: cluster period must exceed twice the delay");
    }
    output_detector.validate();
    require_positive(bin_width_ns, "HOM bin width");
    require_positive(window_ns, "HOM window");
}

CorrelationHistogram hom_simulate(const EventStream& photons, const HomConfig& config, std::uint64_t seed)
{
    config.validate();
    if (config.source_channel >= std::max<std::uint8_t>(photons.channel_count, 1)) {
        throw ConfigError("HOM: source channel not present in stream");
    }
    const double r = config.bs_reflectivity;
    const double t = 1.0 - r;
    const double overlap = config.copolarized
                               ? config.indistinguishability * config.interferometer_visibility *
                                     config.interferometer_visibility
                               : 0.0;
    const double p_split = r * r + t * t - 2.0 * r * t * overlap;
    const double p_both_transmitted = t * t / (r * r + t * t);
    const double sigma = config.output_detector.jitter_fwhm_ns / constants::fwhm_per_sigma;
    const double period = photons.rep_period_ns;

    Rng rng = make_rng(seed, 0);
    std::vector<double> out[2];

    struct Photon {
        double arrival = 0.0;
        int slot = 0;
        int port = 0;
        bool signal = true;
    };
    std::vector<Photon> cluster;

    const auto detect = [&](int output, double time) {
        if (sample_uniform(rng) < config.output_detector.efficiency) {
            out[output].push_back(time + sample_normal(rng, sigma));
        }
    };

    const auto flush = [&]() {
        std::vector<char> handled(cluster.size(), 0);
        // Interfering pair: one signal photon in each input port of slot 1.
        int in0 = -1, in1 = -1;
        for (std::size_t i = 0; i < cluster.size(); ++i) {
            const Photon& p = cluster[i];
            if (p.slot == 1 && p.signal) {
                if (p.port == 0 && in0 < 0) {
                    in0 = static_cast<int>(i);
                } else if (p.port == 1 && in1 < 0) {
                    in1 = static_cast<int>(i);
                }
            }
        }
        if (in0 >= 0 && in1 >= 0) {
            handled[in0] = handled[in1] = 1;
            if (sample_uniform(rng) < p_split) {
                const bool transmitted = sample_uniform(rng) < p_both_transmitted;
                detect(transmitted ? 0 : 1, cluster[in0].arrival);
                detect(transmitted ? 1 : 0, cluster[in1].arrival);
            } else {
                const int port = sample_uniform(rng) < 0.5 ? 0 : 1;
                detect(port, cluster[in0].arrival);
                detect(port, cluster[in1].arrival);
            }
        }
        for (std::size_t i = 0; i < cluster.size(); ++i) {
            if (handled[i]) {
                continue;
            }
            const int port = sample_uniform(rng) < t ? cluster[i].port : 1 - cluster[i].port;
            detect(port, cluster[i].arrival);
        }
        cluster.clear();
    };

    long long current = -1;
    for (const auto& e : photons.events) {
        if (e.channel != config.source_channel) {
            continue;
        }
        const long long pulse = static_cast<long long>(std::floor((e.t_ns - photons.first_pulse_ns) / period + 0.5));
        if (pulse < 0) {
            continue;
        }
        const long long j = pulse / 2;
        const int early_late = static_cast<int>(pulse % 2);
        if (j != current) {
            flush();
            current = j;
        }
        const double offset = e.t_ns - (photons.first_pulse_ns + static_cast<double>(pulse) * period);
        const int arm = sample_uniform(rng) < 0.5 ? 0 : 1;
        Photon p;
        p.slot = early_late + arm;
        p.port = arm;
        p.signal = e.tag == TruthTag::signal;
        p.arrival = static_cast<double>(j) * config.cluster_period_ns + p.slot * config.delay_ns + offset;
        cluster.push_back(p);
    }
    flush();

    for (auto& o : out) {
        std::sort(o.begin(), o.end());
        if (config.output_detector.deadtime_ns > 0.0) {
            std::vector<double> kept;
            double last = -std::numeric_limits<double>::infinity();
            for (double x : o) {
                if (x - last >= config.output_detector.deadtime_ns) {
                    kept.push_back(x);
                    last = x;
                }
            }
            o.swap(kept);
        }
    }
    return cross_correlate(out[0], out[1], config.bin_width_ns, config.window_ns);
}

double expected_hom_visibility(double indistinguishability, double bs_reflectivity,
                               double interferometer_visibility)
{
    const double r = bs_reflectivity;
    const double t = 1.0 - r;
    return indistinguishability * interferometer_visibility * interferometer_visibility * 2.0 * r * t /
           (r * r + t * t);
}

PeakFit fit_peak(const CorrelationHistogram& hist, double center_ns, double half_window_ns)
{
    std::vector<double> x, y;
    for (std::size_t i = 0; i < hist.counts.size(); ++i) {
        const double c = hist.center(i);
        if (c >= center_ns - half_window_ns && c < center_ns + half_window_ns) {
            x.push_back(c);
            y.push_back(static_cast<double>(hist.counts[i]));
        }
    }
    const int n = static_cast<int>(x.size());
    if (n < 6) {
        throw DataError("peak fit: window holds fewer than 6 bins");
    }
    const double w = hist.bin_width_ns;

    // Initial guesses from the window edges and the centroid.
    const int edge = std::max(1, n / 10);
    double b0 = 0.0;
    for (int i = 0; i < edge; ++i) {
        b0 += y[i] + y[n - 1 - i];
    }
    b0 /= 2.0 * edge;
    double area0 = 0.0, mean = 0.0, var = 0.0;
    for (int i = 0; i < n; ++i) {
        const double s = std::max(y[i] - b0, 0.0);
        area0 += s;
        mean += s * x[i];
    }
    mean = area0 > 0.0 ? mean / area0 : center_ns;
    for (int i = 0; i < n; ++i) {
        var += std::max(y[i] - b0, 0.0) * (x[i] - mean) * (x[i] - mean);
    }
    const double sigma0 = std::clamp(area0 > 0.0 ? std::sqrt(var / area0) : half_window_ns / 4.0, w,
                                     half_window_ns / 2.0);
    const double log_lo_sigma = std::log(0.25 * w);
    const double log_hi = std::log(half_window_ns);
    const double log_lo_tau = std::log(1e-4);

    const auto unpack = [&](const Eigen::VectorXd& p, double& sigma, double& tau) {
        sigma = std::exp(std::clamp(p[2], log_lo_sigma, log_hi));
        tau = std::exp(std::clamp(p[3], log_lo_tau, log_hi));
    };
    const fit::ResidualFn residuals = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
        double sigma = 0.0, tau = 0.0;
        unpack(p, sigma, tau);
        for (int i = 0; i < n; ++i) {
            const double model = p[0] * w * gauss_laplace(x[i] - p[1], sigma, tau) + p[4];
            r[i] = fit::poisson_deviance_residual(y[i], model);
        }
    };

    Eigen::VectorXd p0(5);
    p0 << area0, mean, std::log(sigma0), std::log(std::max(sigma0 / 3.0, 2e-4)), b0;
    const fit::Result res = fit::least_squares(residuals, n, p0);

    PeakFit out;
    out.area = res.x[0];
    out.area_err = std::sqrt(std::max(res.covariance(0, 0), 0.0));
    out.center_ns = res.x[1];
    unpack(res.x, out.sigma_ns, out.tau_ns);
    out.background = res.x[4];
    out.chi2 = res.cost;
    out.converged = res.converged && res.x.allFinite();
    out.status = res.status;
    return out;
}

VisibilityResult visibility_from_areas(double a_co, double a_co_err, double a_cross, double a_cross_err)
{
    if (!(a_cross > 0.0)) {
        throw DataError("visibility: cross-polarized peak area must be > 0");
    }
    VisibilityResult v;
    const double ratio = a_co / a_cross;
    v.v = 1.0 - ratio;
    v.v_err = std::sqrt(std::pow(a_co_err / a_cross, 2) + std::pow(ratio * a_cross_err / a_cross, 2));
    return v;
}

VisibilityResult hom_visibility(const CorrelationHistogram& co, const CorrelationHistogram& cross,
                                double peak_spacing_ns)
{
    require_positive(peak_spacing_ns, "peak spacing");
    const PeakFit fco = fit_peak(co, 0.0, 0.5 * peak_spacing_ns);
    const PeakFit fcross = fit_peak(cross, 0.0, 0.5 * peak_spacing_ns);
    if (!fco.converged) {
        throw NumericalError("HOM co-polarized zero-delay peak fit failed: " + fco.status);
    }
    if (!fcross.converged) {
        throw NumericalError("HOM cross-polarized zero-delay peak fit failed: " + fcross.status);
    }
    VisibilityResult v = visibility_from_areas(fco.area, fco.area_err, fcross.area, fcross.area_err);
    v.co = fco;
    v.cross = fcross;
    return v;
}

double indistinguishability_from_hom(double v_meas, double g2, double bs_reflectivity,
                                     double interferometer_visibility)
{
    if (!(bs_reflectivity > 0.0 && bs_reflectivity < 1.0)) {
        throw ConfigError("beam splitter reflectivity must lie in (0, 1)");
    }
    if (!(interferometer_visibility > 0.0 && interferometer_visibility <= 1.0)) {
        throw ConfigError("interferometer visibility must lie in (0, 1]");
    }
    if (!(g2 >= 0.0)) {
        throw ConfigError("g2 must be >= 0");
    }
    const double r = bs_reflectivity;
    const double t = 1.0 - r;
    return (v_meas + 2.0 * g2) * (r * r + t * t) / (2.0 * r * t) /
           (interferometer_visibility * interferometer_visibility);
}

double hom_upper_bound(double tau_x_ns, double tau_xx_ns)
{
    require_positive(tau_x_ns, "tau_x");
    require_positive(tau_xx_ns, "tau_xx");
    const double ratio = tau_x_ns / tau_xx_ns;
    return ratio / (1.0 + ratio);
}

double measured_rate(double arriving_rate_hz, double detector_efficiency, double deadtime_ns)
{
    const double detected = detector_efficiency * arriving_rate_hz;
    return detected / (1.0 + detected * deadtime_ns * 1e-9);
}

double arriving_rate(double measured_rate_hz, double detector_efficiency, double deadtime_ns)
{
    if (!(detector_efficiency > 0.0 && detector_efficiency <= 1.0)) {
        throw ConfigError("detector efficiency must lie in (0, 1]");
    }
    if (!(measured_rate_hz >= 0.0) || !(deadtime_ns >= 0.0)) {
        throw ConfigError("rates and deadtime must be >= 0");
    }
    const double live = 1.0 - measured_rate_hz * deadtime_ns * 1e-9;
    if (!(live > 0.0)) {
        throw NumericalError("measured rate saturates the detector (rate * deadtime >= 1)");
    }
    return measured_rate_hz / (detector_efficiency * live);
}

double extraction_efficiency(double arriving_rate_hz, double rep_rate_hz, double setup_transmission,
                             double prep_fidelity)
{
    require_positive(arriving_rate_hz, "arriving rate");
    require_positive(rep_rate_hz, "repetition rate");
    if (!(setup_transmission > 0.0 && setup_transmission <= 1.0) || !(prep_fidelity > 0.0 && prep_fidelity <= 1.0)) {
        throw ConfigError("setup transmission and preparation fidelity must lie in (0, 1]");
    }
    const double eta = arriving_rate_hz / (rep_rate_hz * setup_transmission * prep_fidelity);
    if (eta > 1.0 + 1e-12) {
        throw DataError("extraction efficiency " + io::format_double(eta) +
                        " exceeds 1: calibration inputs are inconsistent");
    }
    return eta;
}

void write_histogram_csv(std::ostream& out, const CorrelationHistogram& hist)
{
    out << "bin_center_ns,counts\n";
    for (std::size_t i = 0; i < hist.counts.size(); ++i) {
        out << io::format_double(hist.center(i)) << ',' << hist.counts[i] << '\n';
    }
}

CorrelationHistogram read_histogram_csv(std::istream& in)
{
    std::vector<double> centers;
    std::vector<std::uint64_t> counts;
    for (const auto& row : io::read_csv(in)) {
        if (row.fields.size() != 2) {
            throw DataError("line " + std::to_string(row.line) + ": expected bin_center_ns,counts");
        }
        centers.push_back(io::parse_double(row.fields[0], row.line, "bin_center_ns"));
        const long long c = io::parse_integer(row.fields[1], row.line, "counts");
        if (c < 0) {
            throw DataError("line " + std::to_string(row.line) + ": counts must be >= 0");
        }
        counts.push_back(static_cast<std::uint64_t>(c));
    }
    if (centers.size() < 3 || centers.size() % 2 == 0) {
        throw DataError("histogram needs an odd number (>= 3) of symmetric bins");
    }
    CorrelationHistogram h;
    h.bin_width_ns = centers[1] - centers[0];
    h.zero_bin = centers.size() / 2;
    if (!(h.bin_width_ns > 0.0) || std::abs(centers[h.zero_bin]) > 1e-6 * h.bin_width_ns) {
        throw DataError("histogram bins must be increasing and centred on zero delay");
    }
    h.counts = std::move(counts);
    return h;
}

HomConfig hom_from_json(const nlohmann::json& doc)
{
    HomConfig h;
    try {
        h.delay_ns = doc.value("delay_ns", h.delay_ns);
        h.indistinguishability = doc.value("indistinguishability", h.indistinguishability);
        h.bs_reflectivity = doc.value("bs_reflectivity", h.bs_reflectivity);
        h.interferometer_visibility = doc.value("interferometer_visibility", h.interferometer_visibility);
        h.cluster_period_ns = doc.value("cluster_period_ns", h.cluster_period_ns);
        h.bin_width_ns = doc.value("bin_width_ns", h.bin_width_ns);
        h.window_ns = doc.value("window_ns", h.window_ns);
        if (doc.contains("output_detector")) {
            h.output_detector = detector_from_json(doc.at("output_detector"));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("hom: ") + e.what());
    }
    h.validate();
    return h;
}

nlohmann::json to_json(const G2Result& g2)
{
    return nlohmann::json{{"g2", g2.g2},
                          {"g2_err", g2.g2_err},
                          {"zero_area", g2.zero_area},
                          {"side_mean", g2.side_mean},
                          {"side_peaks_per_side", g2.side_peaks}};
}

nlohmann::json to_json(const PeakFit& fit)
{
    return nlohmann::json{{"area", fit.area},         {"area_err", fit.area_err},
                          {"center_ns", fit.center_ns}, {"sigma_ns", fit.sigma_ns},
                          {"tau_ns", fit.tau_ns},     {"background_per_bin", fit.background},
                          {"chi2", fit.chi2},         {"converged", fit.converged},
                          {"status", fit.status}};
}

nlohmann::json to_json(const VisibilityResult& v)
{
    return nlohmann::json{{"visibility", v.v}, {"visibility_err", v.v_err},
                          {"co_peak", to_json(v.co)}, {"cross_peak", to_json(v.cross)}};
}

}  // namespace qdent::photon
