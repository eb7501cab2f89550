#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <vector>

#include "oracles.hpp"
#include "qdent/error.hpp"
#include "qdent/strain.hpp"

using namespace qdent;
using namespace qdent::strain;

namespace {

StrainModel device()
{
    StrainModel m;
    m.d0 = Vec2(-8.132, -11.537);
    m.u14 = Vec2(0.9, 0.35);
    m.u25 = Vec2(-0.4, 1.1);
    m.e0_ev = 1.589;
    return m;
}

std::vector<double> range(double start, double stop, double step)
{
    std::vector<double> v;
    for (int i = 0; start + i * step <= stop + 1e-9; ++i) {
        v.push_back(start + i * step);
    }
    return v;
}

}  // namespace

TEST_CASE("model validation")
{
    CHECK_NOTHROW(device().validate());
    StrainModel m = device();
    m.plate_thickness_um = 0.0;
    CHECK_THROWS_AS(m.validate(), ConfigError);
    CHECK(device().condition_number() < 10.0);
    m = device();
    m.u25 = 2.0 * m.u14;
    const double cond = m.condition_number();
    CHECK((std::isinf(cond) || cond > 1e12));
}

TEST_CASE("fss vector geometry")
{
    StrainModel m;
    m.d0 = Vec2(0.0, 2.0);
    const Fss f = fss_vector(m, {});
    CHECK(f.s == doctest::Approx(2.0));
    CHECK(f.phi == doctest::Approx(std::numbers::pi / 4.0));
    m.d0 = Vec2(3.0, 0.0);
    const Fss g = fss_vector(m, {1.0, 0.0, 5.0});
    CHECK(g.d(0) == doctest::Approx(4.0));
    CHECK(g.d(1) == doctest::Approx(0.0));
}

TEST_CASE("find_null solves the linear system")
{
    const StrainModel m = device();
    const FieldSetting f = find_null(m);
    CHECK(std::abs(f.e14 - 12.0) < 1e-9);
    CHECK(std::abs(f.e25 - 6.67) < 1e-9);
    CHECK(fss_vector(m, f).s < 1e-12);
    CHECK(f.within(m.field_limit_kv_cm));

    StrainModel singular = m;
    singular.u25 = -singular.u14;
    CHECK_THROWS_AS(find_null(singular), NumericalError);
}

TEST_CASE("sweep has a single minimum at the null")
{
    const StrainModel m = device();
    const std::vector<double> e14 = range(0.0, 24.0, 2.0);
    const std::vector<double> e25 = range(0.0, 13.34, 0.667);
    const std::vector<SweepPoint> sweep = sweep_fss(m, e14, e25);
    REQUIRE(sweep.size() == e14.size() * e25.size());
    const auto best = std::min_element(sweep.begin(), sweep.end(), [](const auto& a, const auto& b) { return a.s < b.s; });
    CHECK(best->e14 == doctest::Approx(12.0));
    CHECK(best->e25 == doctest::Approx(6.67));
    CHECK(best->s < 1e-9);

    // Each row and column of |d| is convex, so it has one local minimum.
    for (std::size_t i = 0; i < e14.size(); ++i) {
        int minima = 0;
        for (std::size_t j = 0; j < e25.size(); ++j) {
            const double s = sweep[i * e25.size() + j].s;
            const bool left = j == 0 || sweep[i * e25.size() + j - 1].s > s;
            const bool right = j + 1 == e25.size() || sweep[i * e25.size() + j + 1].s > s;
            minima += (left && right) ? 1 : 0;
        }
        CHECK(minima == 1);
    }
    CHECK_THROWS_AS(sweep_fss(m, std::vector<double>{}, e25), ConfigError);
}

TEST_CASE("energy tuning")
{
    StrainModel m = device();
    CHECK(energy_at(m, {}) == doctest::Approx(1.589));
    CHECK(field_to_voltage(12.0, 300.0) == doctest::Approx(360.0));
    const double shift_uev = (energy_at(m, {12.0, 0.0, 0.0}) - m.e0_ev) * 1e6;
    CHECK(shift_uev == doctest::Approx(32.4).epsilon(1e-9));
    const double volts_shift = (energy_at(m, {360.0, 0.0, 0.0}, Drive::voltages) - m.e0_ev) * 1e6;
    CHECK(volts_shift == doctest::Approx(32.4).epsilon(1e-9));
    const double negative = (energy_at(m, {-12.0, 0.0, 0.0}) - m.e0_ev) * 1e6;
    CHECK(negative == doctest::Approx(-32.4).epsilon(1e-9));
}

TEST_CASE("noiseless scan extrema and extraction")
{
    const double s = 3.0;
    const double phi = 0.4;
    const std::vector<ScanPoint> scan = synthesize_polarization_scan(s, phi, 0.0, 72, 1, 2.0);
    const auto hi = std::max_element(scan.begin(), scan.end(), [](const auto& a, const auto& b) {
        return a.energy_difference_uev < b.energy_difference_uev;
    });
    CHECK(hi->energy_difference_uev <= 2.0 + s + 1e-12);
    CHECK(std::abs(std::fmod(hi->hwp_angle_rad, std::numbers::pi / 2.0) - phi / 2.0) <= std::numbers::pi / 72.0);

    const FssEstimate e = extract_fss(scan);
    CHECK(e.s == doctest::Approx(s).epsilon(1e-12));
    CHECK(e.phi == doctest::Approx(phi).epsilon(1e-12));
    CHECK(e.mean == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(e.residual_rms < 1e-12);

    CHECK_THROWS_AS(synthesize_polarization_scan(s, phi, 0.0, 4, 1), ConfigError);
    const std::vector<ScanPoint> few(scan.begin(), scan.begin() + 5);
    CHECK_THROWS_AS(extract_fss(few), DataError);
    const std::vector<ScanPoint> narrow(scan.begin(), scan.begin() + 10);
    CHECK_THROWS_AS(extract_fss(narrow), DataError);
}

TEST_CASE("extracted angle is monotone in the true angle")
{
    double previous = -1.0;
    for (int i = 0; i < 20; ++i) {
        const double phi = 0.05 + 0.15 * i;
        const FssEstimate e = extract_fss(synthesize_polarization_scan(2.0, phi, 0.0, 36, 1));
        CHECK(e.phi > previous);
        previous = e.phi;
    }
}

TEST_CASE("extraction is scale invariant")
{
    const std::vector<ScanPoint> scan = synthesize_polarization_scan(5.0, 1.1, 0.5, 36, 9);
    std::vector<ScanPoint> scaled = scan;
    for (ScanPoint& p : scaled) {
        p.energy_difference_uev *= 3.0;
    }
    const FssEstimate a = extract_fss(scan);
    const FssEstimate b = extract_fss(scaled);
    CHECK(b.s == doctest::Approx(3.0 * a.s));
    CHECK(b.phi == doctest::Approx(a.phi));
    CHECK(b.s_err == doctest::Approx(3.0 * a.s_err));
}

TEST_CASE("repeated noisy scans recover the splitting")
{
    std::vector<double> values;
    int within = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const FssEstimate e = extract_fss(synthesize_polarization_scan(5.0, 0.4, 0.5, 36, seed));
        values.push_back(e.s);
        CHECK(std::abs(e.s - 5.0) < 1.0);
        within += std::abs(e.s - 5.0) <= 0.2 ? 1 : 0;
    }
    CHECK(std::abs(oracle::mean(values) - 5.0) < 0.2);
    CHECK(oracle::sample_std(values) < 0.2);
    MESSAGE("fraction within 0.2 ueV: " << within / 100.0);
}

TEST_CASE("null scans show the amplitude bias")
{
    std::vector<double> values;
    double predicted = 0.0;
    for (std::uint64_t seed = 0; seed < 400; ++seed) {
        const FssEstimate e = extract_fss(synthesize_polarization_scan(0.0, 0.0, 0.5, 36, seed));
        values.push_back(e.s);
        predicted = e.null_bias;
    }
    CHECK(oracle::mean(values) == doctest::Approx(predicted).epsilon(0.1));
}

TEST_CASE("calibration recovers the model")
{
    const StrainModel truth = device();
    std::vector<Observation> obs;
    for (double e14 : {0.0, 8.0, 16.0, 24.0}) {
        for (double e25 : {0.0, 5.0, 10.0}) {
            const FieldSetting f{e14, e25, 0.0};
            const Fss fss = fss_vector(truth, f);
            obs.push_back({f, fss.s, fss.phi});
        }
    }
    const Calibration c = calibrate(obs, StrainModel{});
    CHECK((c.model.d0 - truth.d0).norm() < 1e-9);
    CHECK((c.model.u14 - truth.u14).norm() < 1e-9);
    CHECK((c.model.u25 - truth.u25).norm() < 1e-9);
    CHECK(c.rms_residual_uev < 1e-9);

    const std::vector<Observation> collinear{{{0, 0, 0}, 1.0, 0.0}, {{1, 1, 0}, 1.0, 0.0}, {{2, 2, 0}, 1.0, 0.0}};
    CHECK_THROWS_AS(calibrate(collinear, StrainModel{}), DataError);
    CHECK_THROWS_AS(calibrate(std::vector<Observation>(obs.begin(), obs.begin() + 2), StrainModel{}), DataError);
}

TEST_CASE("JSON and CSV")
{
    const StrainModel back = model_from_json(to_json(device()));
    CHECK((back.d0 - device().d0).norm() == 0.0);
    CHECK(back.e0_ev == 1.589);
    CHECK_THROWS_AS(model_from_json({{"d0_ueV", {1.0}}}), ConfigError);

    const std::vector<ScanPoint> scan = synthesize_polarization_scan(1.0, 0.2, 0.1, 16, 3);
    std::stringstream buffer;
    write_scan_csv(buffer, scan);
    const std::vector<ScanPoint> read = read_scan_csv(buffer);
    REQUIRE(read.size() == scan.size());
    for (std::size_t i = 0; i < scan.size(); ++i) {
        CHECK(read[i].hwp_angle_rad == scan[i].hwp_angle_rad);
        CHECK(read[i].energy_difference_uev == scan[i].energy_difference_uev);
    }
}
