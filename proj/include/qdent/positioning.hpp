#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace qdent::positioning {

struct Spot {
    double x_nm = 0.0;  // image frame
    double y_nm = 0.0;
    double sigma_nm = 150.0;
    double photons = 2000.0;  // integrated over the spot
};

// Square marker grid drawn as straight lines of Gaussian cross-section.
// Lines run at u = k * pitch and v = k * pitch (k >= 0) in the frame
// rotated by `tilt_rad` about the origin, so the origin is the crossing of
// the first vertical and the first horizontal line.
struct MarkerGrid {
    double pitch_nm = 5000.0;
    double origin_x_nm = 1000.0;
    double origin_y_nm = 1200.0;
    double line_fwhm_nm = 500.0;
    double intensity = 200.0;  // peak photons per pixel
    double tilt_rad = 0.0;
};

struct ImageSpec {
    int width = 256;
    int height = 256;
    double pixel_nm = 50.0;
    double background = 4.0;     // photons per pixel
    double poisson_scale = 1.0;  // pixel = Poisson(I * scale) / scale; 0 renders noiseless
    bool markers = true;
    MarkerGrid grid;

    void validate() const;
};

struct Truth {
    std::vector<Spot> spots;
    bool markers = true;
    MarkerGrid grid;
};

// Row-major intensities; pixel (c, r) covers [c, c+1) x [r, r+1) pixels.
struct SyntheticImage {
    int width = 0;
    int height = 0;
    double pixel_nm = 50.0;
    std::vector<double> pixels;
    Truth truth;

    double at(int c, int r) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
};

// Background, marker lines and spots, then Poisson noise from `seed`.
SyntheticImage render_image(std::span<const Spot> spots, const ImageSpec& spec, std::uint64_t seed);

// Marker-frame coordinates (nm) of an image-frame point for a known grid.
Eigen::Vector2d to_marker_frame(const MarkerGrid& grid, double x_nm, double y_nm);

// x = a + b y for vertical lines, y = a + b x for horizontal ones, pixels.
struct MarkerLine {
    bool vertical = true;
    double a = 0.0;
    double b = 0.0;
    double sigma_px = 0.0;  // Gaussian cross-section
};

struct LocatedSpot {
    double x_nm = 0.0;  // marker frame
    double y_nm = 0.0;
    double sigma_nm = 0.0;
    double photons = 0.0;
    Eigen::Matrix2d covariance = Eigen::Matrix2d::Zero();  // nm^2, marker frame
    double image_x_nm = 0.0;
    double image_y_nm = 0.0;
    bool converged = false;
    bool contaminated = false;  // within reach of a marker line
    bool overlapping = false;   // another spot closer than four widths

    double std_nm() const;  // larger per-axis standard deviation
};

struct LocateOptions {
    double sigma_guess_nm = 150.0;
    double detection_threshold = 5.0;  // in noise standard deviations
    // Candidates whose fitted width falls outside this range of the guess
    // are discarded as noise or marker residue.
    double min_width_ratio = 0.5;
    double max_width_ratio = 2.0;
};

struct Localization {
    std::vector<MarkerLine> vertical;
    std::vector<MarkerLine> horizontal;
    Eigen::Vector2d origin_nm = Eigen::Vector2d::Zero();  // image frame
    double axis_angle_rad = 0.0;
    std::vector<LocatedSpot> spots;
    std::vector<std::string> warnings;
};

// Fits the marker lines, then every spot with a 2D Gaussian over a crop of
// 7 sigma.  DataError when no vertical or no horizontal marker is found.
Localization locate_qds(const SyntheticImage& image, const LocateOptions& options = {});

struct SpotRepeatability {
    double x_nm = 0.0;  // mean over frames, marker frame
    double y_nm = 0.0;
    double sigma_nm = 0.0;
    double std_x_nm = 0.0;
    double std_y_nm = 0.0;
    double std_nm = 0.0;  // max(std_x, std_y)
    int frames = 0;
    bool contaminated = false;
};

struct RepeatabilityReport {
    std::vector<SpotRepeatability> spots;
    int frames = 0;
    double median_std_nm = 0.0;
    double mode_std_nm = 0.0;  // centre of the most populated 1 nm bin
    std::vector<std::string> warnings;

    double fraction_below(double limit_nm) const;
};

// Spots are matched to the first frame by nearest neighbour.  DataError
// when the images carry different truth layouts or fewer than 2 frames
// are given.
RepeatabilityReport repeatability(std::span<const SyntheticImage> images, const LocateOptions& options = {});
RepeatabilityReport repeatability(std::span<const Localization> frames, double match_radius_nm);

// Plain PGM (P2).  Pixel values are rounded; DataError above 65535.
void write_pgm(std::ostream& out, const SyntheticImage& image);
SyntheticImage read_pgm(std::istream& in, double pixel_nm);

nlohmann::json truth_to_json(const SyntheticImage& image);
// Attaches a truth sidecar (and its pixel size) to an image.
void apply_truth_json(SyntheticImage& image, const nlohmann::json& doc);
ImageSpec image_spec_from_json(const nlohmann::json& doc);
std::vector<Spot> spots_from_json(const nlohmann::json& doc);

// x_nm, y_nm, sigma_nm, std_nm
void write_located_csv(std::ostream& out, const Localization& result);
void write_repeatability_csv(std::ostream& out, const RepeatabilityReport& report);
nlohmann::json to_json(const Localization& result);
nlohmann::json to_json(const RepeatabilityReport& report);

}  // namespace qdent::positioning
