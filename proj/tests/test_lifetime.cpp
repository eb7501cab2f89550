#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "oracles.hpp"
#include "qdent/error.hpp"
#include "qdent/lifetime.hpp"

using namespace qdent;
using namespace qdent::lifetime;

namespace {

SynthesisOptions single(double tau, double counts, bool noiseless = false)
{
    SynthesisOptions o;
    o.model = Model::single_exp;
    o.tau_ns = tau;
    o.total_counts = counts;
    o.noiseless = noiseless;
    return o;
}

double width_at_half_maximum(const std::vector<double>& centers, const std::vector<double>& values)
{
    const double peak = *std::max_element(values.begin(), values.end());
    double first = 0.0;
    double last = 0.0;
    bool seen = false;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (values[i] >= peak / 2.0) {
            if (!seen) {
                first = centers[i];
                seen = true;
            }
            last = centers[i];
        }
    }
    return last - first;
}

}  // namespace

TEST_CASE("model names")
{
    CHECK(model_from_name("single_exp") == Model::single_exp);
    CHECK(model_from_name("rise_decay") == Model::rise_decay);
    CHECK(std::string(model_name(Model::rise_decay)) == "rise_decay");
    CHECK_THROWS_AS(model_from_name("stretched"), ConfigError);
}

TEST_CASE("IRF construction")
{
    CHECK(combined_fwhm(0.06, 0.036) == doctest::Approx(std::hypot(0.06, 0.036)));
    const std::vector<double> grid = make_grid(-0.4, 0.6, 0.004);
    CHECK(std::find(grid.begin(), grid.end(), 0.0) != grid.end());
    const std::vector<double> irf = gaussian_irf(grid, 0.070);
    CHECK(std::accumulate(irf.begin(), irf.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(width_at_half_maximum(grid, irf) - 0.070) <= 2 * 0.004 + 1e-12);
    const std::vector<double> delta = gaussian_irf(grid, 0.0);
    CHECK(std::count_if(delta.begin(), delta.end(), [](double v) { return v > 0.0; }) == 1);
    CHECK_THROWS_AS(gaussian_irf(grid, -1.0), ConfigError);
}

TEST_CASE("convolution preserves area")
{
    std::vector<double> signal(200, 0.0);
    for (std::size_t i = 50; i < 120; ++i) {
        signal[i] = std::exp(-static_cast<double>(i - 50) / 10.0);
    }
    const std::vector<double> grid = make_grid(-0.1, 0.1, 0.004);
    const std::vector<double> kernel = gaussian_irf(grid, 0.03);
    const std::size_t origin = static_cast<std::size_t>(std::max_element(kernel.begin(), kernel.end()) - kernel.begin());
    const std::vector<double> out = convolve(signal, kernel, origin);
    CHECK(std::accumulate(out.begin(), out.end(), 0.0) ==
          doctest::Approx(std::accumulate(signal.begin(), signal.end(), 0.0)).epsilon(1e-9));

    const std::vector<double> unit{1.0};
    CHECK(convolve(signal, unit, 0) == signal);
}

TEST_CASE("model_counts matches bin integrals of the decay law")
{
    const std::vector<double> grid = make_grid(-0.1, 0.5, 0.004);
    const std::vector<double> delta = gaussian_irf(grid, 0.0);
    const double h = 0.002;
    for (Model model : {Model::single_exp, Model::rise_decay}) {
        const double tau = 0.023;
        const double rise = 0.014;
        const std::function<double(double)> pdf = [&](double t) {
            if (model == Model::single_exp) {
                return std::exp(-t / tau) / tau;
            }
            return (std::exp(-t / tau) - std::exp(-t / rise)) / (tau - rise);
        };
        const double t0 = 0.01;
        const std::vector<double> m = model_counts(grid, delta, model, tau, rise, t0, 1e5, 2.0);
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const double lo = std::max(grid[i] - h, t0);
            const double hi = grid[i] + h;
            const double expected = (hi > lo ? 1e5 * oracle::integrate([&](double t) { return pdf(t - t0); }, lo, hi) : 0.0) + 2.0;
            CHECK(std::abs(m[i] - expected) < 1e-6);
        }
    }
}

TEST_CASE("IRF broadening")
{
    const std::vector<double> grid = make_grid(-0.4, 0.6, 0.004);
    const std::vector<double> sharp = model_counts(grid, gaussian_irf(grid, 0.0), Model::single_exp, 0.1, 0.0, 0.0, 1e5, 0.0);
    const std::vector<double> blurred = model_counts(grid, gaussian_irf(grid, 0.07), Model::single_exp, 0.1, 0.0, 0.0, 1e5, 0.0);
    const auto peak_sharp = std::max_element(sharp.begin(), sharp.end()) - sharp.begin();
    CHECK(std::abs(grid[static_cast<std::size_t>(peak_sharp)]) <= 0.004 + 1e-12);
    CHECK(width_at_half_maximum(grid, blurred) > width_at_half_maximum(grid, sharp));
    CHECK(*std::max_element(blurred.begin(), blurred.end()) < *std::max_element(sharp.begin(), sharp.end()));
}

TEST_CASE("synthesis edge cases")
{
    CHECK(synthesize_trace(single(0.023, 0.0), 1).empty());
    CHECK_THROWS_AS(synthesize_trace(single(0.0, 1e4), 1), ConfigError);
    SynthesisOptions o = single(0.023, 1e4);
    o.model = Model::rise_decay;
    CHECK_THROWS_AS(synthesize_trace(o, 1), ConfigError);

    const DecayTrace t = synthesize_trace(single(0.023, 1e5), 2);
    CHECK_NOTHROW(t.validate());
    CHECK(std::abs(static_cast<double>(t.total()) - 1e5) < 5.0 * std::sqrt(1e5));
    CHECK(synthesize_trace(single(0.023, 1e5), 2).counts == t.counts);
}

TEST_CASE("trace validation")
{
    DecayTrace t = synthesize_trace(single(0.05, 1e4), 3);
    t.irf.pop_back();
    CHECK_THROWS_AS(t.validate(), DataError);
    t = synthesize_trace(single(0.05, 1e4), 3);
    t.irf[0] += 0.1;
    CHECK_THROWS_AS(t.validate(), DataError);
    t = synthesize_trace(single(0.05, 1e4), 3);
    t.bin_centers[5] += 0.001;
    CHECK_THROWS_AS(t.validate(), DataError);
}

TEST_CASE("noiseless single exponential is recovered")
{
    const DecayFitResult r = fit_decay(synthesize_trace(single(0.014, 1e7, true), 1), Model::single_exp, std::nullopt);
    CHECK(r.converged);
    CHECK(std::abs(r.tau_ns - 0.014) < 1e-4);
    CHECK(r.tau_ci.low <= r.tau_ns);
    CHECK(r.tau_ci.high >= r.tau_ns);
}

TEST_CASE("rise-decay fit at typical statistics")
{
    SynthesisOptions o;
    o.model = Model::rise_decay;
    o.tau_ns = 0.023;
    o.rise_tau_ns = 0.014;
    o.total_counts = 1e5;
    const DecayFitResult r = fit_decay(synthesize_trace(o, 4), Model::rise_decay, 0.014);
    CHECK(r.converged);
    CHECK(r.tau_ns >= 0.021);
    CHECK(r.tau_ns <= 0.025);
    CHECK(r.tau_ci.low <= 0.023);
    CHECK(r.tau_ci.high >= 0.023);
    CHECK(r.rise_tau_ns == 0.014);
    CHECK_THROWS_AS(fit_decay(synthesize_trace(o, 4), Model::rise_decay, std::nullopt), ConfigError);
}

TEST_CASE("a trace shaped like the IRF is flagged")
{
    const DecayFitResult r = fit_decay(synthesize_trace(single(1e-4, 1e5), 5), Model::single_exp, std::nullopt);
    CHECK(r.tau_at_floor);
    CHECK_FALSE(r.warnings.empty());
}

TEST_CASE("fit rejects unusable traces")
{
    DecayTrace t = synthesize_trace(single(0.05, 1e4), 6);
    std::fill(t.counts.begin(), t.counts.end(), 0);
    CHECK_THROWS_AS(fit_decay(t, Model::single_exp, std::nullopt), DataError);
    CHECK_THROWS_AS(fit_decay(DecayTrace{}, Model::single_exp, std::nullopt), DataError);
}

TEST_CASE("fitted lifetimes are unbiased at high statistics")
{
    std::vector<double> taus;
    int covered = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const DecayFitResult r = fit_decay(synthesize_trace(single(0.05, 1e6), 100 + seed), Model::single_exp, std::nullopt);
        taus.push_back(r.tau_ns);
        covered += (r.tau_ci_delta1.low <= 0.05 && 0.05 <= r.tau_ci_delta1.high) ? 1 : 0;
    }
    CHECK(std::abs(oracle::mean(taus) / 0.05 - 1.0) < 0.01);
    // Delta chi2 = 1 intervals should cover about 68% of the time.
    MESSAGE("delta-chi2=1 coverage: " << covered << " / 20");
    CHECK(covered >= 8);
}

TEST_CASE("trace CSV round trip")
{
    const DecayTrace t = synthesize_trace(single(0.05, 1e4), 7);
    std::stringstream buffer;
    write_trace_csv(buffer, t);
    const DecayTrace back = read_trace_csv(buffer);
    CHECK(back.counts == t.counts);
    REQUIRE(back.irf.size() == t.irf.size());
    for (std::size_t i = 0; i < t.irf.size(); ++i) {
        CHECK(back.bin_centers[i] == t.bin_centers[i]);
        CHECK(back.irf[i] == t.irf[i]);
    }
    std::istringstream bad("bin_center_ns,counts\n0.0,-3\n");
    CHECK_THROWS_AS(read_trace_csv(bad), DataError);
    std::istringstream no_irf("bin_center_ns,counts\n0.0,3\n0.004,5\n");
    CHECK(read_trace_csv(no_irf).irf.empty());
}
