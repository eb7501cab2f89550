#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include "qdent/error.hpp"
#include "qdent/positioning.hpp"

using namespace qdent;
using namespace qdent::positioning;

namespace {

ImageSpec spec(double tilt = 0.004)
{
    ImageSpec s;
    s.grid.tilt_rad = tilt;
    return s;
}

ImageSpec noiseless(double tilt = 0.004)
{
    ImageSpec s = spec(tilt);
    s.poisson_scale = 0.0;
    return s;
}

const LocatedSpot* nearest(const Localization& loc, const Eigen::Vector2d& target)
{
    const LocatedSpot* best = nullptr;
    double best_d = 1e300;
    for (const LocatedSpot& s : loc.spots) {
        const double d = std::hypot(s.x_nm - target.x(), s.y_nm - target.y());
        if (d < best_d) {
            best_d = d;
            best = &s;
        }
    }
    return best;
}

std::vector<Spot> interior_spots(double photons)
{
    return {{2600, 2900, 150, photons}, {4300, 3100, 150, photons}, {7700, 2800, 150, photons},
            {2800, 8000, 150, photons}, {9200, 7800, 150, photons}};
}

}  // namespace

TEST_CASE("image spec validation")
{
    CHECK_NOTHROW(spec().validate());
    ImageSpec s = spec();
    s.width = 0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = spec();
    s.pixel_nm = -1.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("marker-only image gives the grid and no spots")
{
    const SyntheticImage image = render_image({}, spec(), 1);
    const Localization loc = locate_qds(image);
    CHECK(loc.spots.empty());
    CHECK_FALSE(loc.vertical.empty());
    CHECK_FALSE(loc.horizontal.empty());
    CHECK(std::abs(loc.origin_nm.x() - 1000.0) < 10.0);
    CHECK(std::abs(loc.origin_nm.y() - 1200.0) < 10.0);
    CHECK(std::abs(loc.axis_angle_rad - 0.004) < 1e-3);
}

TEST_CASE("images without markers are rejected")
{
    ImageSpec s = spec();
    s.markers = false;
    const std::vector<Spot> spots{{3000, 3000, 150, 5000}};
    CHECK_THROWS_AS(locate_qds(render_image(spots, s, 2)), DataError);
}

TEST_CASE("noiseless spot rendering")
{
    ImageSpec s = noiseless(0.0);
    s.markers = false;
    s.background = 0.0;
    const std::vector<Spot> spots{{3025.0, 4025.0, 150.0, 10000.0}};
    const SyntheticImage image = render_image(spots, s, 3);
    const auto peak = std::max_element(image.pixels.begin(), image.pixels.end()) - image.pixels.begin();
    CHECK(peak % image.width == 60);
    CHECK(peak / image.width == 80);
    double total = 0.0;
    for (double p : image.pixels) {
        total += p;
    }
    CHECK(total == doctest::Approx(10000.0).epsilon(1e-3));
}

TEST_CASE("noiseless spots are located exactly")
{
    const SyntheticImage image = render_image(interior_spots(5000.0), noiseless(), 4);
    const Localization loc = locate_qds(image);
    CHECK(loc.spots.size() == 5);
    for (const Spot& truth : image.truth.spots) {
        const Eigen::Vector2d expected = to_marker_frame(image.truth.grid, truth.x_nm, truth.y_nm);
        const LocatedSpot* found = nearest(loc, expected);
        REQUIRE(found != nullptr);
        CHECK(std::hypot(found->x_nm - expected.x(), found->y_nm - expected.y()) < 0.1);
        CHECK(std::abs(found->sigma_nm / 150.0 - 1.0) < 0.02);
        CHECK(found->converged);
        CHECK_FALSE(found->contaminated);
    }
}

TEST_CASE("spots on a marker line are flagged")
{
    const std::vector<Spot> spots{{6000.0, 3500.0, 150.0, 5000.0}, {3500.0, 3500.0, 150.0, 5000.0}};
    const Localization loc = locate_qds(render_image(spots, noiseless(0.0), 5));
    const LocatedSpot* on_line = nearest(loc, to_marker_frame(MarkerGrid{}, 6000.0, 3500.0));
    const LocatedSpot* clear = nearest(loc, to_marker_frame(MarkerGrid{}, 3500.0, 3500.0));
    REQUIRE(on_line != nullptr);
    REQUIRE(clear != nullptr);
    CHECK(on_line != clear);
    CHECK(on_line->contaminated);
    CHECK_FALSE(clear->contaminated);
}

TEST_CASE("translating the spots translates the result")
{
    std::vector<Spot> moved = interior_spots(5000.0);
    for (Spot& s : moved) {
        s.x_nm += 137.0;
        s.y_nm -= 61.0;
    }
    const Localization a = locate_qds(render_image(interior_spots(5000.0), noiseless(0.0), 6));
    const Localization b = locate_qds(render_image(moved, noiseless(0.0), 6));
    REQUIRE(a.spots.size() == b.spots.size());
    for (const LocatedSpot& s : a.spots) {
        const LocatedSpot* t = nearest(b, Eigen::Vector2d(s.x_nm + 137.0, s.y_nm - 61.0));
        REQUIRE(t != nullptr);
        CHECK(std::abs(t->x_nm - s.x_nm - 137.0) < 0.1);
        CHECK(std::abs(t->y_nm - s.y_nm + 61.0) < 0.1);
    }
}

TEST_CASE("repeatability of identical frames is zero")
{
    const SyntheticImage image = render_image(interior_spots(2000.0), spec(), 7);
    const std::vector<SyntheticImage> frames{image, image, image};
    const RepeatabilityReport r = repeatability(frames);
    CHECK(r.frames == 3);
    CHECK(r.spots.size() == 5);
    for (const SpotRepeatability& s : r.spots) {
        CHECK(s.std_nm == doctest::Approx(0.0));
    }
    CHECK(r.fraction_below(1.0) == 1.0);
}

TEST_CASE("repeatability input checks")
{
    const SyntheticImage a = render_image(interior_spots(2000.0), spec(), 8);
    const SyntheticImage b = render_image(interior_spots(2000.0), spec(), 9);
    const std::vector<SyntheticImage> two{a, b};
    CHECK_FALSE(repeatability(two).warnings.empty());
    const std::vector<SyntheticImage> one{a};
    CHECK_THROWS_AS(repeatability(one), DataError);
    std::vector<Spot> other = interior_spots(2000.0);
    other.pop_back();
    const std::vector<SyntheticImage> mismatched{a, render_image(other, spec(), 10)};
    CHECK_THROWS_AS(repeatability(mismatched), DataError);
}

TEST_CASE("precision scales as one over root photons")
{
    const auto median_std = [](double photons) {
        ImageSpec s = spec();
        s.background = 0.5;
        std::vector<SyntheticImage> frames;
        for (std::uint64_t seed = 0; seed < 30; ++seed) {
            frames.push_back(render_image(interior_spots(photons), s, 1000 + seed));
        }
        return repeatability(frames).median_std_nm;
    };
    const double low = median_std(1000.0);
    const double high = median_std(10000.0);
    CHECK(std::abs(low / high / std::sqrt(10.0) - 1.0) < 0.25);
}

TEST_CASE("PGM round trip")
{
    const SyntheticImage image = render_image(interior_spots(2000.0), spec(), 11);
    std::stringstream buffer;
    write_pgm(buffer, image);
    const SyntheticImage back = read_pgm(buffer, 50.0);
    CHECK(back.width == image.width);
    CHECK(back.height == image.height);
    for (std::size_t i = 0; i < image.pixels.size(); ++i) {
        CHECK(back.pixels[i] == std::round(image.pixels[i]));
    }
    std::istringstream bad("P5\n2 2\n255\n");
    CHECK_THROWS_AS(read_pgm(bad, 50.0), DataError);
}

TEST_CASE("truth sidecar round trip")
{
    SyntheticImage image = render_image(interior_spots(2000.0), spec(), 12);
    const nlohmann::json doc = truth_to_json(image);
    SyntheticImage copy = image;
    copy.truth = Truth{};
    apply_truth_json(copy, doc);
    CHECK(copy.truth.spots.size() == 5);
    CHECK(copy.truth.grid.tilt_rad == image.truth.grid.tilt_rad);
}
