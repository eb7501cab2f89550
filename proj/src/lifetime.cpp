#include "qdent/lifetime.hpp"

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

namespace qdent::lifetime {

namespace {

// Cumulative emission probability by time t after excitation.
double cdf(Model model, double tau, double rise, double t)
{
    if (t <= 0.0) {
        return 0.0;
    }
    if (model == Model::single_exp) {
        return -std::expm1(-t / tau);
    }
    if (std::abs(tau - rise) < 1e-6 * std::max(tau, rise)) {
        const double m = 0.5 * (tau + rise);
        return 1.0 - (1.0 + t / m) * std::exp(-t / m);
    }
    return 1.0 - (tau * std::exp(-t / tau) - rise * std::exp(-t / rise)) / (tau - rise);
}

struct Kernel {
    std::vector<double> values;
    std::size_t origin = 0;
};

Kernel trimmed_kernel(std::span<const double> irf)
{
    if (irf.empty()) {
        throw DataError("decay trace carries no IRF");
    }
    const auto peak = static_cast<std::size_t>(std::max_element(irf.begin(), irf.end()) - irf.begin());
    const double cut = irf[peak] * 1e-14;
    std::size_t lo = 0, hi = irf.size();
    while (lo < peak && irf[lo] <= cut) {
        ++lo;
    }
    while (hi > peak + 1 && irf[hi - 1] <= cut) {
        --hi;
    }
    Kernel k;
    k.values.assign(irf.begin() + static_cast<std::ptrdiff_t>(lo), irf.begin() + static_cast<std::ptrdiff_t>(hi));
    k.origin = peak - lo;
    return k;
}

std::vector<double> unit_model(std::span<const double> centers, const Kernel& kernel, Model model, double tau,
                               double rise, double t0)
{
    const double half = 0.5 * (centers.size() > 1 ? centers[1] - centers[0] : 0.0);
    std::vector<double> emitted(centers.size());
    for (std::size_t i = 0; i < centers.size(); ++i) {
        emitted[i] = cdf(model, tau, rise, centers[i] + half - t0) - cdf(model, tau, rise, centers[i] - half - t0);
    }
    return convolve(emitted, kernel.values, kernel.origin);
}

// Weighted linear fit of y ~ a * shape + b.
std::pair<double, double> linear_amplitude(const std::vector<double>& y, const std::vector<double>& shape)
{
    double s00 = 0, s01 = 0, s11 = 0, t0 = 0, t1 = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double w = 1.0 / std::max(y[i], 1.0);
        s00 += w * shape[i] * shape[i];
        s01 += w * shape[i];
        s11 += w;
        t0 += w * shape[i] * y[i];
        t1 += w * y[i];
    }
    const double det = s00 * s11 - s01 * s01;
    if (!(std::abs(det) > 0.0)) {
        return {0.0, t1 / s11};
    }
    return {(t0 * s11 - t1 * s01) / det, (s00 * t1 - s01 * t0) / det};
}

double deviance(const std::vector<double>& y, const std::vector<double>& m)
{
    double d = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double r = fit::poisson_deviance_residual(y[i], m[i]);
        d += r * r;
    }
    return d;
}

}  // namespace

const char* model_name(Model model)
{
    return model == Model::single_exp ? "single_exp" : "rise_decay";
}

Model model_from_name(const std::string& name)
{
    if (name == "single_exp") {
        return Model::single_exp;
    }
    if (name == "rise_decay") {
        return Model::rise_decay;
    }
    throw ConfigError("unknown decay model '" + name + "' (expected single_exp or rise_decay)");
}

double DecayTrace::bin_width() const
{
    return bin_centers.size() > 1 ? bin_centers[1] - bin_centers[0] : 0.0;
}

std::uint64_t DecayTrace::total() const
{
    std::uint64_t t = 0;
    for (auto c : counts) {
        t += c;
    }
    return t;
}

void DecayTrace::validate() const
{
    if (counts.size() != bin_centers.size() || (!irf.empty() && irf.size() != bin_centers.size())) {
        throw DataError("decay trace: bin_centers, counts and irf differ in length");
    }
    if (bin_centers.size() < 2) {
        return;
    }
    const double w = bin_width();
    if (!(w > 0.0)) {
        throw DataError("decay trace: bin centres must increase");
    }
    for (std::size_t i = 1; i < bin_centers.size(); ++i) {
        if (std::abs(bin_centers[i] - bin_centers[i - 1] - w) > 1e-6 * w) {
            throw DataError("decay trace: grid is not uniform at bin " + std::to_string(i));
        }
    }
    if (!irf.empty()) {
        double sum = 0.0;
        for (double v : irf) {
            if (!(v >= 0.0)) {
                throw DataError("decay trace: IRF must be nonnegative");
            }
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-9) {
            throw DataError("decay trace: IRF sums to " + io::format_double(sum) + ", expected 1");
        }
    }
}

double combined_fwhm(double spad_fwhm_ns, double correlator_fwhm_ns)
{
    return std::hypot(spad_fwhm_ns, correlator_fwhm_ns);
}

std::vector<double> make_grid(double start_ns, double stop_ns, double bin_width_ns)
{
    if (!(bin_width_ns > 0.0) || !(stop_ns > start_ns)) {
        throw ConfigError("decay grid needs start < stop and a positive bin width");
    }
    const auto first = static_cast<long long>(std::ceil(start_ns / bin_width_ns - 1e-9));
    const auto last = static_cast<long long>(std::floor(stop_ns / bin_width_ns + 1e-9));
    std::vector<double> centers;
    for (long long i = first; i <= last; ++i) {
        centers.push_back(static_cast<double>(i) * bin_width_ns);
    }
    return centers;
}

std::vector<double> gaussian_irf(std::span<const double> bin_centers, double fwhm_ns)
{
    std::vector<double> irf(bin_centers.size(), 0.0);
    if (bin_centers.empty()) {
        return irf;
    }
    if (!(fwhm_ns >= 0.0)) {
        throw ConfigError("IRF FWHM must be >= 0");
    }
    if (fwhm_ns == 0.0) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < bin_centers.size(); ++i) {
            if (std::abs(bin_centers[i]) < std::abs(bin_centers[best])) {
                best = i;
            }
        }
        irf[best] = 1.0;
        return irf;
    }
    const double sigma = fwhm_ns / constants::fwhm_per_sigma;
    const double half = 0.5 * (bin_centers.size() > 1 ? bin_centers[1] - bin_centers[0] : fwhm_ns);
    double sum = 0.0;
    for (std::size_t i = 0; i < bin_centers.size(); ++i) {
        const double a = (bin_centers[i] - half) / (std::numbers::sqrt2 * sigma);
        const double b = (bin_centers[i] + half) / (std::numbers::sqrt2 * sigma);
        irf[i] = 0.5 * (std::erf(b) - std::erf(a));
        sum += irf[i];
    }
    if (!(sum > 0.0)) {
        throw ConfigError("IRF lies outside the trace grid");
    }
    for (double& v : irf) {
        v /= sum;
    }
    return irf;
}

std::vector<double> convolve(std::span<const double> signal, std::span<const double> kernel, std::size_t origin)
{
    const auto n = static_cast<long long>(signal.size());
    std::vector<double> out(signal.size(), 0.0);
    for (long long i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < kernel.size(); ++j) {
            const long long src = i - static_cast<long long>(j) + static_cast<long long>(origin);
            if (src >= 0 && src < n) {
                acc += signal[static_cast<std::size_t>(src)] * kernel[j];
            }
        }
        out[static_cast<std::size_t>(i)] = acc;
    }
    return out;
}

std::vector<double> model_counts(std::span<const double> bin_centers, std::span<const double> irf, Model model,
                                 double tau_ns, double rise_tau_ns, double t0_ns, double total_counts,
                                 double background_per_bin)
{
    std::vector<double> m = unit_model(bin_centers, trimmed_kernel(irf), model, tau_ns, rise_tau_ns, t0_ns);
    for (double& v : m) {
        v = total_counts * v + background_per_bin;
    }
    return m;
}

DecayTrace synthesize_trace(const SynthesisOptions& o, std::uint64_t seed)
{
    if (!(o.tau_ns > 0.0)) {
        throw ConfigError("synthesize_trace: tau must be > 0");
    }
    if (o.model == Model::rise_decay && !(o.rise_tau_ns > 0.0)) {
        throw ConfigError("synthesize_trace: rise_decay needs a positive rise time");
    }
    if (!(o.total_counts >= 0.0) || !(o.background_per_bin >= 0.0)) {
        throw ConfigError("synthesize_trace: counts and background must be >= 0");
    }
    DecayTrace trace;
    if (o.total_counts == 0.0) {
        return trace;
    }
    const double longest = std::max(o.tau_ns, o.model == Model::rise_decay ? o.rise_tau_ns : 0.0);
    const double stop = o.stop_ns.value_or(o.t0_ns + 15.0 * longest + 3.0 * o.irf_fwhm_ns + 0.1);
    trace.bin_centers = make_grid(o.start_ns, stop, o.bin_width_ns);
    trace.irf = gaussian_irf(trace.bin_centers, o.irf_fwhm_ns);
    const std::vector<double> expected = model_counts(trace.bin_centers, trace.irf, o.model, o.tau_ns,
                                                      o.rise_tau_ns, o.t0_ns, o.total_counts,
                                                      o.background_per_bin);
    Rng rng = make_rng(seed, 0);
    trace.counts.resize(expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) {
        trace.counts[i] = o.noiseless ? static_cast<std::uint64_t>(std::llround(expected[i]))
                                      : sample_poisson(rng, expected[i]);
    }
    return trace;
}

DecayFitResult fit_decay(const DecayTrace& trace, Model model, std::optional<double> fixed_rise_tau_ns,
                         const FitOptions& options)
{
    trace.validate();
    if (trace.empty() || trace.bin_centers.size() < 8) {
        throw DataError("fit_decay: trace needs at least 8 bins");
    }
    if (trace.total() == 0) {
        throw DataError("fit_decay: trace holds no counts");
    }
    double rise = 0.0;
    if (model == Model::rise_decay) {
        if (!fixed_rise_tau_ns || !(*fixed_rise_tau_ns > 0.0)) {
            throw ConfigError("fit_decay: rise_decay needs a positive fixed rise time");
        }
        rise = *fixed_rise_tau_ns;
    }
    if (!(options.ci_fraction > 0.0)) {
        throw ConfigError("fit_decay: ci_fraction must be > 0");
    }

    const std::vector<double>& x = trace.bin_centers;
    const std::vector<double> y(trace.counts.begin(), trace.counts.end());
    const int n = static_cast<int>(y.size());
    const double w = trace.bin_width();
    const Kernel kernel = trimmed_kernel(trace.irf);
    const double floor = 0.25 * w;
    const double ceiling = x.back() - x.front();
    const double log_floor = std::log(floor);
    const double log_ceiling = std::log(ceiling);

    // Coarse grid over (tau, t0) with the linear parameters solved exactly.
    const auto peak = static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin());
    const double t_peak = x[peak];
    const double t0_step = std::max(w, 0.4 / 200.0);
    double best_dev = std::numeric_limits<double>::infinity();
    double best_tau = 0.0, best_t0 = 0.0, best_a = 0.0, best_b = 0.0;
    const int n_tau = 20;
    for (int i = 0; i < n_tau; ++i) {
        const double tau = std::exp(log_floor + (std::log(0.5 * ceiling) - log_floor) * (i + 0.5) / n_tau);
        for (double t0 = t_peak - 0.3; t0 <= t_peak + 0.1; t0 += t0_step) {
            std::vector<double> shape = unit_model(x, kernel, model, tau, rise, t0);
            const auto [a, b] = linear_amplitude(y, shape);
            for (double& v : shape) {
                v = a * v + b;
            }
            const double d = deviance(y, shape);
            if (d < best_dev) {
                best_dev = d;
                best_tau = tau;
                best_t0 = t0;
                best_a = a;
                best_b = b;
            }
        }
    }

    const auto clamp_log_tau = [&](double u) { return std::clamp(u, log_floor, log_ceiling); };
    const auto residuals_at = [&](double t0, double a, double b, double log_tau, Eigen::VectorXd& r) {
        const std::vector<double> shape = unit_model(x, kernel, model, std::exp(clamp_log_tau(log_tau)), rise, t0);
        for (int i = 0; i < n; ++i) {
            r[i] = fit::poisson_deviance_residual(y[i], a * shape[i] + b);
        }
    };
    // p = (t0, amplitude, sqrt(background), log tau)
    const fit::ResidualFn full = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
        residuals_at(p[0], p[1], p[2] * p[2], p[3], r);
    };

    Eigen::VectorXd p0(4);
    p0 << best_t0, best_a, std::sqrt(std::max(best_b, 0.01)), std::log(best_tau);
    fit::Options lm;
    lm.xtol = 1e-10;
    lm.ftol = 1e-12;
    const fit::Result res = fit::least_squares(full, n, p0, lm);
    if (!res.converged || !res.x.allFinite()) {
        throw NumericalError("fit_decay: minimiser did not converge (" + res.status + ", " + std::to_string(res.evaluations) + " evaluations)");
    }

    DecayFitResult out;
    out.model = model;
    out.rise_tau_ns = rise;
    out.t0_ns = res.x[0];
    out.amplitude = res.x[1];
    out.background = res.x[2] * res.x[2];
    out.tau_ns = std::exp(clamp_log_tau(res.x[3]));
    out.tau_err_ns = out.tau_ns * std::sqrt(std::max(res.covariance(3, 3), 0.0));
    out.chi2 = res.cost;
    out.dof = n - 4;
    out.converged = true;
    out.tau_floor_ns = floor;
    out.tau_at_floor = res.x[3] <= log_floor + 1e-6;
    if (out.tau_at_floor) {
        out.warnings.push_back("lifetime at the resolution floor of " + io::format_double(floor) + " ns");
    }
    out.tau_ci = {out.tau_ns, out.tau_ns};
    out.tau_ci_delta1 = {out.tau_ns, out.tau_ns};
    if (!options.confidence_intervals) {
        return out;
    }

    // Profile deviance at fixed tau, warm-started from the previous profile.
    Eigen::VectorXd warm = res.x.head(3);
    const auto profile = [&](double log_tau) {
        const fit::ResidualFn fixed = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
            residuals_at(p[0], p[1], p[2] * p[2], log_tau, r);
        };
        const fit::Result pr = fit::least_squares(fixed, n, warm, lm);
        if (pr.x.allFinite()) {
            warm = pr.x;
        }
        return pr.cost;
    };

    const double log_hat = clamp_log_tau(res.x[3]);
    // Returns the crossing of `threshold` on one side and whether the bound
    // was reached first.
    const auto crossing = [&](double threshold, int direction) -> std::pair<double, bool> {
        warm = res.x.head(3);
        const double bound = direction > 0 ? log_ceiling : log_floor;
        double inside = log_hat;
        double step = 0.01;
        double outside = log_hat;
        for (;;) {
            outside = log_hat + direction * step;
            if ((direction > 0 && outside >= bound) || (direction < 0 && outside <= bound)) {
                outside = bound;
                if (profile(outside) <= threshold) {
                    return {bound, true};
                }
                break;
            }
            if (profile(outside) > threshold) {
                break;
            }
            inside = outside;
            step *= 2.0;
        }
        while (std::abs(outside - inside) > 1e-5) {
            const double mid = 0.5 * (inside + outside);
            if (profile(mid) > threshold) {
                outside = mid;
            } else {
                inside = mid;
            }
        }
        return {0.5 * (inside + outside), false};
    };

    const auto interval = [&](double threshold, bool record) {
        const auto [lo, lo_bound] = crossing(threshold, -1);
        const auto [hi, hi_bound] = crossing(threshold, +1);
        if (record) {
            out.ci_low_at_bound = lo_bound;
            out.ci_high_at_bound = hi_bound;
        }
        return Interval{std::min(std::exp(lo), out.tau_ns), std::max(std::exp(hi), out.tau_ns)};
    };
    out.tau_ci = interval((1.0 + options.ci_fraction) * out.chi2, true);
    out.tau_ci_delta1 = interval(out.chi2 + 1.0, false);
    if (out.ci_low_at_bound) {
        out.warnings.push_back("confidence interval reaches the lower lifetime bound");
    }
    if (out.ci_high_at_bound) {
        out.warnings.push_back("confidence interval reaches the upper lifetime bound");
    }
    return out;
}

void write_trace_csv(std::ostream& out, const DecayTrace& trace)
{
    const bool with_irf = !trace.irf.empty();
    out << "bin_center_ns,counts" << (with_irf ? ",irf" : "") << '\n';
    for (std::size_t i = 0; i < trace.bin_centers.size(); ++i) {
        out << io::format_double(trace.bin_centers[i]) << ',' << trace.counts[i];
        if (with_irf) {
            out << ',' << io::format_double(trace.irf[i]);
        }
        out << '\n';
    }
}

DecayTrace read_trace_csv(std::istream& in)
{
    DecayTrace trace;
    std::size_t width = 0;
    for (const auto& row : io::read_csv(in)) {
        if (width == 0) {
            width = row.fields.size();
            if (width != 2 && width != 3) {
                throw DataError("line " + std::to_string(row.line) + ": expected bin_center_ns,counts[,irf]");
            }
        }
        if (row.fields.size() != width) {
            throw DataError("line " + std::to_string(row.line) + ": expected " + std::to_string(width) +
                            " columns");
        }
        trace.bin_centers.push_back(io::parse_double(row.fields[0], row.line, "bin_center_ns"));
        const long long c = io::parse_integer(row.fields[1], row.line, "counts");
        if (c < 0) {
            throw DataError("line " + std::to_string(row.line) + ": counts must be >= 0");
        }
        trace.counts.push_back(static_cast<std::uint64_t>(c));
        if (width == 3) {
            trace.irf.push_back(io::parse_double(row.fields[2], row.line, "irf"));
        }
    }
    trace.validate();
    return trace;
}

nlohmann::json to_json(const DecayFitResult& r)
{
    nlohmann::json j{{"model", model_name(r.model)},
                     {"tau_ns", r.tau_ns},
                     {"tau_err_ns", r.tau_err_ns},
                     {"tau_ci_ns", {r.tau_ci.low, r.tau_ci.high}},
                     {"tau_ci_delta_chi2_1_ns", {r.tau_ci_delta1.low, r.tau_ci_delta1.high}},
                     {"amplitude_counts", r.amplitude},
                     {"background_per_bin", r.background},
                     {"t0_ns", r.t0_ns},
                     {"chi2", r.chi2},
                     {"dof", r.dof},
                     {"converged", r.converged},
                     {"tau_at_floor", r.tau_at_floor},
                     {"tau_floor_ns", r.tau_floor_ns},
                     {"ci_low_at_bound", r.ci_low_at_bound},
                     {"ci_high_at_bound", r.ci_high_at_bound},
                     {"warnings", r.warnings}};
    if (r.model == Model::rise_decay) {
        j["rise_tau_ns"] = r.rise_tau_ns;
    }
    return j;
}

}  // namespace qdent::lifetime
