#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>
#include <vector>

#include "oracles.hpp"
#include "qdent/correlation.hpp"
#include "qdent/error.hpp"

using namespace qdent;
using namespace qdent::photon;

namespace {

DetectorConfig detector(Line line, double efficiency, double jitter = 0.35)
{
    DetectorConfig d;
    d.line = line;
    d.efficiency = efficiency;
    d.jitter_fwhm_ns = jitter;
    return d;
}

EventStream hbt_stream(const SourceConfig& s, double duration, std::uint64_t seed)
{
    const std::vector<DetectorConfig> dets{detector(Line::xx, 0.5), detector(Line::xx, 0.5)};
    return simulate_stream(s, dets, duration, seed);
}

EventStream ideal_photons(const SourceConfig& s, double duration, std::uint64_t seed)
{
    const std::vector<DetectorConfig> dets{detector(Line::x, 1.0, 0.0)};
    return simulate_stream(s, dets, duration, seed);
}

}  // namespace

TEST_CASE("histogram geometry")
{
    const CorrelationHistogram h = empty_histogram(0.5, 10.0);
    CHECK(h.counts.size() == 2 * h.zero_bin + 1);
    CHECK(h.center(h.zero_bin) == 0.0);
    CHECK(h.half_range_ns() >= 10.0);
    CHECK_THROWS_AS(empty_histogram(0.0, 10.0), ConfigError);
}

TEST_CASE("cross_correlate counts all pairs")
{
    const std::vector<double> a{0.0, 10.0};
    const std::vector<double> b{0.1, 5.0, 10.1};
    const CorrelationHistogram h = cross_correlate(a, b, 0.2, 12.0);
    CHECK(h.total() == 6);
    CHECK(h.sum(-0.1, 0.3) == 2);
    CHECK(h.sum(-10.0, -9.8) + h.sum(-10.2, -9.8) >= 1);
}

TEST_CASE("g2 from peak areas")
{
    const std::vector<double> sides{1000.0, 1000.0, 1000.0, 1000.0};
    const G2Result g = g2_from_areas(12.0, sides);
    CHECK(g.g2 == doctest::Approx(0.012));
    CHECK(g.g2_err > 0.0);
    CHECK(g2_from_areas(1000.0, sides).g2 == doctest::Approx(1.0));
    const G2Result zero = g2_from_areas(0.0, sides);
    CHECK(zero.g2 == 0.0);
    CHECK(zero.g2_err == doctest::Approx(1.0 / 1000.0));
}

TEST_CASE("expected g2 of the cascade generator")
{
    SourceConfig s;
    s.multiphoton_prob = 0.0;
    CHECK(expected_g2_zero(s) == 0.0);
    s.multiphoton_prob = 0.02;
    s.prep_fidelity = 0.9;
    CHECK(expected_g2_zero(s) == doctest::Approx(2.0 * 0.02 / (0.9 * 1.02 * 1.02)));
    s.statistics = Statistics::poissonian;
    CHECK(expected_g2_zero(s) == 1.0);
}

TEST_CASE("simulated HBT matches the closed form")
{
    SourceConfig s;
    s.prep_fidelity = 0.9;
    s.multiphoton_prob = 0.02;
    s.extraction_eff = 0.7;
    const EventStream stream = hbt_stream(s, 0.1, 21);
    const G2Result g = g2_zero(hbt_histogram(stream, 0.05, 60.0), stream.rep_period_ns);
    CHECK(std::abs(g.g2 - expected_g2_zero(s)) < 3.0 * g.g2_err);
}

TEST_CASE("a Poisson source gives g2 of one")
{
    SourceConfig s;
    s.statistics = Statistics::poissonian;
    s.mean_photons = 0.3;
    s.extraction_eff = 0.7;
    const std::vector<DetectorConfig> dets{detector(Line::x, 0.5), detector(Line::x, 0.5)};
    const EventStream stream = simulate_stream(s, dets, 0.05, 22);
    const G2Result g = g2_zero(hbt_histogram(stream, 0.05, 60.0), stream.rep_period_ns);
    CHECK(std::abs(g.g2 - 1.0) < 3.0 * g.g2_err);
}

TEST_CASE("g2_zero needs enough side peaks")
{
    const CorrelationHistogram narrow = empty_histogram(0.05, 20.0);
    CHECK_THROWS_AS(g2_zero(narrow, 12.5), DataError);
}

TEST_CASE("HOM visibility formula agrees with the two-photon amplitude oracle")
{
    for (double r : {0.5, 0.48, 0.4}) {
        for (double m : {0.0, 0.3, 0.71, 1.0}) {
            for (double vs : {1.0, 0.96}) {
                const double overlap = m * vs * vs;
                const double co = oracle::hom_split_probability(r, overlap);
                const double cross = oracle::hom_split_probability(r, 0.0);
                CHECK(expected_hom_visibility(m, r, vs) == doctest::Approx(1.0 - co / cross).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("perfect indistinguishability suppresses the central HOM peak")
{
    SourceConfig s;
    const EventStream photons = ideal_photons(s, 0.02, 23);
    HomConfig h;
    h.indistinguishability = 1.0;
    h.bs_reflectivity = 0.5;
    h.output_detector = detector(Line::x, 1.0);
    const CorrelationHistogram co = hom_simulate(photons, h, 1);
    h.copolarized = false;
    const CorrelationHistogram cross = hom_simulate(photons, h, 2);
    CHECK(cross.sum(-0.9, 0.9) > 1000);
    CHECK(static_cast<double>(co.sum(-0.9, 0.9)) < 0.01 * static_cast<double>(cross.sum(-0.9, 0.9)));
    const VisibilityResult v = hom_visibility(co, cross, h.delay_ns);
    CHECK(v.v > 0.97);
}

TEST_CASE("distinguishable photons show no interference")
{
    SourceConfig s;
    const EventStream photons = ideal_photons(s, 0.02, 24);
    HomConfig h;
    h.indistinguishability = 0.0;
    h.output_detector = detector(Line::x, 1.0);
    const CorrelationHistogram co = hom_simulate(photons, h, 1);
    h.copolarized = false;
    const CorrelationHistogram cross = hom_simulate(photons, h, 2);
    const VisibilityResult v = hom_visibility(co, cross, h.delay_ns);
    CHECK(std::abs(v.v) < 3.0 * v.v_err);
}

TEST_CASE("simulated HOM visibility follows the expected visibility")
{
    SourceConfig s;
    const EventStream photons = ideal_photons(s, 0.05, 25);
    HomConfig h;
    h.indistinguishability = 0.71;
    h.bs_reflectivity = 0.48;
    h.interferometer_visibility = 0.96;
    h.output_detector = detector(Line::x, 0.5);
    const CorrelationHistogram co = hom_simulate(photons, h, 1);
    h.copolarized = false;
    const CorrelationHistogram cross = hom_simulate(photons, h, 2);
    const VisibilityResult v = hom_visibility(co, cross, h.delay_ns);
    CHECK(std::abs(v.v - expected_hom_visibility(0.71, 0.48, 0.96)) < 3.0 * v.v_err + 0.01);
}

TEST_CASE("visibility and indistinguishability arithmetic")
{
    const VisibilityResult v = visibility_from_areas(40.0, 2.0, 100.0, 5.0);
    CHECK(v.v == doctest::Approx(0.6));
    CHECK(v.v_err == doctest::Approx(0.4 * std::sqrt(0.05 * 0.05 + 0.05 * 0.05)));
    CHECK_THROWS(visibility_from_areas(1.0, 1.0, 0.0, 1.0));

    CHECK(indistinguishability_from_hom(1.0, 0.0, 0.5, 1.0) == doctest::Approx(1.0));
    const double r = 0.48;
    const double t = 1.0 - r;
    const double m = (0.60 + 2.0 * 0.025) * (r * r + t * t) / (2.0 * r * t) / (0.96 * 0.96);
    CHECK(indistinguishability_from_hom(0.60, 0.025, 0.48, 0.96) == doctest::Approx(m));
    CHECK(std::abs(indistinguishability_from_hom(0.60, 0.025, 0.48, 0.96) - 0.71) < 0.02);

    CHECK(hom_upper_bound(0.044, 0.018) == doctest::Approx(0.044 / 0.062));
    CHECK(std::abs(hom_upper_bound(0.044, 0.018) - 0.710) < 0.005);
    CHECK(hom_upper_bound(1.0, 1.0) == doctest::Approx(0.5));
}

TEST_CASE("detector saturation and extraction efficiency")
{
    CHECK(arriving_rate(1e6, 1.0, 0.0) == doctest::Approx(1e6));
    const double r = arriving_rate(3.52e6, 0.40, 25.0);
    CHECK(r == doctest::Approx(3.52e6 / (0.40 * (1.0 - 3.52e6 * 25e-9))));
    CHECK(std::abs(r / 9.63e6 - 1.0) < 0.01);
    CHECK(measured_rate(r, 0.40, 25.0) == doctest::Approx(3.52e6));
    CHECK_THROWS_AS(arriving_rate(4.1e7, 0.4, 25.0), NumericalError);
    CHECK_THROWS_AS(arriving_rate(1e6, 0.0, 25.0), ConfigError);

    CHECK(extraction_efficiency(80e6 * 0.5, 80e6, 0.5, 1.0) == doctest::Approx(1.0));
    CHECK(extraction_efficiency(9.6e6, 80e6, 0.174, 1.0) == doctest::Approx(0.6897).epsilon(1e-4));
    CHECK(std::abs(extraction_efficiency(9.6e6, 80e6, 0.174, 1.0) - 0.69) < 0.01);
    CHECK_THROWS_AS(extraction_efficiency(2.0 * 80e6 * 0.174, 80e6, 0.174, 1.0), DataError);
}

TEST_CASE("fit_peak recovers a noiseless peak")
{
    CorrelationHistogram h = empty_histogram(0.02, 5.0);
    const double area = 1e5;
    const double sigma = 0.15;
    const double background = 3.0;
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        const double x = h.center(i) - 0.1;
        const double density = std::exp(-0.5 * x * x / (sigma * sigma)) / (sigma * std::sqrt(2.0 * std::numbers::pi));
        h.counts[i] = static_cast<std::uint64_t>(std::llround(area * h.bin_width_ns * density + background));
    }
    const PeakFit f = fit_peak(h, 0.0, 1.5);
    CHECK(f.converged);
    CHECK(std::abs(f.area / area - 1.0) < 0.01);
    CHECK(std::abs(f.center_ns - 0.1) < 0.005);
    CHECK(std::abs(f.background - background) < 0.5);
}

TEST_CASE("histogram CSV round trip")
{
    CorrelationHistogram h = empty_histogram(0.1, 3.0);
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        h.counts[i] = i * 3;
    }
    std::stringstream buffer;
    write_histogram_csv(buffer, h);
    const CorrelationHistogram back = read_histogram_csv(buffer);
    CHECK(back.counts == h.counts);
    CHECK(back.zero_bin == h.zero_bin);
    CHECK(back.bin_width_ns == doctest::Approx(0.1));
}
