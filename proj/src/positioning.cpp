#include "qdent/positioning.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <numbers>
#include <ostream>
#include <sstream>
#include <tuple>

#include "qdent/constants.hpp"
#include "qdent/error.hpp"
#include "qdent/fit.hpp"
#include "qdent/io.hpp"
#include "qdent/random.hpp"

namespace qdent::positioning {

namespace {

double median(std::vector<double> v)
{
    if (v.empty()) {
        return 0.0;
    }
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    if (v.size() % 2 == 1) {
        return *mid;
    }
    const double upper = *mid;
    const double lower = *std::max_element(v.begin(), mid);
    return 0.5 * (lower + upper);
}

// Mean and variance after iterative 4-sigma clipping.
std::pair<double, double> clipped_moments(const std::vector<double>& v)
{
    double lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
    double mean = 0.0, var = 0.0;
    for (int iter = 0; iter < 10; ++iter) {
        double s = 0.0, ss = 0.0, n = 0.0;
        for (double x : v) {
            if (x >= lo && x <= hi) {
                s += x;
                ss += x * x;
                n += 1.0;
            }
        }
        if (n < 2.0) {
            break;
        }
        mean = s / n;
        var = std::max(ss / n - mean * mean, 0.0);
        lo = mean - 4.0 * std::sqrt(var);
        hi = mean + 4.0 * std::sqrt(var);
    }
    return {mean, var};
}

double mad_sigma(const std::vector<double>& v)
{
    const double m = median(v);
    std::vector<double> dev(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        dev[i] = std::abs(v[i] - m);
    }
    return 1.4826 * median(dev);
}

// Contiguous runs of a 1D profile above threshold: (weighted centre, width).
std::vector<std::pair<double, double>> segments(const std::vector<double>& profile, double baseline,
                                                double threshold)
{
    std::vector<std::pair<double, double>> out;
    std::size_t i = 0;
    while (i < profile.size()) {
        if (profile[i] <= threshold) {
            ++i;
            continue;
        }
        double w = 0.0, wx = 0.0;
        const std::size_t start = i;
        while (i < profile.size() && profile[i] > threshold) {
            w += profile[i] - baseline;
            wx += (profile[i] - baseline) * (static_cast<double>(i) + 0.5);
            ++i;
        }
        out.emplace_back(wx / w, static_cast<double>(i - start));
    }
    return out;
}

// Position across the line (x for vertical, y for horizontal) at the
// coordinate along it, pixels.
double line_at(const MarkerLine& l, double along)
{
    return l.a + l.b * along;
}

struct Pixels {
    int width = 0;
    int height = 0;
    std::vector<double> v;

    double& operator()(int c, int r) { return v[static_cast<std::size_t>(r) * width + c]; }
    double operator()(int c, int r) const { return v[static_cast<std::size_t>(r) * width + c]; }
};

// Value of pixel (along, across) for a line family; vertical lines run along rows.
double sample(const Pixels& p, bool vertical, int along, int across)
{
    return vertical ? p(across, along) : p(along, across);
}

// Fits one family of marker lines.  `other` bands are skipped.
std::vector<MarkerLine> fit_lines(const Pixels& img, bool vertical, double background,
                                  const std::vector<std::pair<double, double>>& coarse,
                                  const std::vector<std::pair<double, double>>& other)
{
    const int n_along = vertical ? img.height : img.width;
    const int n_across = vertical ? img.width : img.height;
    std::vector<MarkerLine> lines;
    for (const auto& [centre, width] : coarse) {
        const double sigma0 = std::max(width / constants::fwhm_per_sigma, 0.5);
        MarkerLine line;
        line.vertical = vertical;
        line.a = centre;
        line.b = 0.0;
        line.sigma_px = sigma0;
        for (int pass = 0; pass < 3; ++pass) {
            const double half = std::max(3.0 * line.sigma_px, 2.0) + (pass == 0 ? 2.0 : 0.0);
            std::vector<double> ts, xs;
            double spread_w = 0.0, spread = 0.0;
            for (int k = 0; k < n_along; ++k) {
                const double t = k + 0.5;
                bool crossing = false;
                for (const auto& [oc, ow] : other) {
                    if (std::abs(t - oc) < ow + 3.0 * sigma0 + 2.0) {
                        crossing = true;
                    }
                }
                if (crossing) {
                    continue;
                }
                const double predicted = line_at(line, t);
                const int lo = std::max(0, static_cast<int>(std::floor(predicted - half)));
                const int hi = std::min(n_across - 1, static_cast<int>(std::ceil(predicted + half)));
                double w = 0.0, wx = 0.0, wxx = 0.0;
                for (int j = lo; j <= hi; ++j) {
                    const double x = j + 0.5;
                    if (std::abs(x - predicted) > half) {
                        continue;
                    }
                    const double value = std::max(sample(img, vertical, k, j) - background, 0.0);
                    w += value;
                    wx += value * x;
                    wxx += value * x * x;
                }
                if (w > 0.0) {
                    const double mean = wx / w;
                    ts.push_back(t);
                    xs.push_back(mean);
                    spread += wxx - w * mean * mean;
                    spread_w += w;
                }
            }
            if (ts.size() < 3) {
                break;
            }
            // Linear regression with one round of outlier rejection.
            std::vector<char> keep(ts.size(), 1);
            for (int round = 0; round < 2; ++round) {
                double st = 0, sx = 0, stt = 0, stx = 0, n = 0;
                for (std::size_t i = 0; i < ts.size(); ++i) {
                    if (!keep[i]) {
                        continue;
                    }
                    st += ts[i];
                    sx += xs[i];
                    stt += ts[i] * ts[i];
                    stx += ts[i] * xs[i];
                    n += 1;
                }
                const double det = n * stt - st * st;
                if (!(det > 0.0)) {
                    break;
                }
                line.b = (n * stx - st * sx) / det;
                line.a = (sx - line.b * st) / n;
                std::vector<double> res(ts.size());
                for (std::size_t i = 0; i < ts.size(); ++i) {
                    res[i] = xs[i] - line_at(line, ts[i]);
                }
                const double scale = mad_sigma(res);
                for (std::size_t i = 0; i < ts.size(); ++i) {
                    keep[i] = std::abs(res[i]) <= 4.0 * scale + 0.05;
                }
            }
            if (spread_w > 0.0 && pass > 0) {
                // Truncated-window second moment underestimates sigma slightly.
                line.sigma_px = std::max(std::sqrt(spread / spread_w), 0.5);
            }
        }
        // Keep candidates whose ridge is bright along most of the line.
        std::vector<double> ridge;
        for (int k = 0; k < n_along; ++k) {
            const int j = static_cast<int>(std::floor(line_at(line, k + 0.5)));
            if (j >= 0 && j < n_across) {
                ridge.push_back(sample(img, vertical, k, j) - background);
            }
        }
        if (!ridge.empty() && median(ridge) > 5.0 * std::sqrt(std::max(background, 1.0))) {
            lines.push_back(line);
        }
    }
    std::sort(lines.begin(), lines.end(), [](const MarkerLine& p, const MarkerLine& q) { return p.a < q.a; });
    return lines;
}

// Removes the median cross-section of every line from `img`; returns the
// largest profile value removed.
double subtract_lines(Pixels& img, const std::vector<MarkerLine>& lines, double background,
                    const std::vector<MarkerLine>& other)
{
    constexpr double bin = 0.2;
    double peak = 0.0;
    for (const auto& line : lines) {
        const int n_along = line.vertical ? img.height : img.width;
        const int n_across = line.vertical ? img.width : img.height;
        const double reach = 4.0 * line.sigma_px + 1.0;
        const int n_bins = static_cast<int>(std::ceil(2.0 * reach / bin)) + 1;
        std::vector<std::vector<double>> samples(static_cast<std::size_t>(n_bins));
        std::vector<double> offset_sum(static_cast<std::size_t>(n_bins), 0.0);
        const auto bin_of = [&](double d) { return static_cast<int>(std::floor((d + reach) / bin)); };
        for (int k = 0; k < n_along; ++k) {
            const double t = k + 0.5;
            bool crossing = false;
            for (const auto& o : other) {
                const double o_pos = line_at(o, line_at(line, t));
                if (std::abs(t - o_pos) < 4.0 * o.sigma_px + 2.0) {
                    crossing = true;
                }
            }
            if (crossing) {
                continue;
            }
            const double centre = line_at(line, t);
            for (int j = std::max(0, static_cast<int>(centre - reach)); j < std::min(n_across, static_cast<int>(centre + reach) + 1); ++j) {
                const double d = j + 0.5 - centre;
                const int b = bin_of(d);
                if (b >= 0 && b < n_bins) {
                    samples[static_cast<std::size_t>(b)].push_back(sample(img, line.vertical, k, j) - background);
                    offset_sum[static_cast<std::size_t>(b)] += d;
                }
            }
        }
        std::vector<double> centres, values;
        for (int b = 0; b < n_bins; ++b) {
            const auto& bucket = samples[static_cast<std::size_t>(b)];
            if (!bucket.empty()) {
                centres.push_back(offset_sum[static_cast<std::size_t>(b)] / static_cast<double>(bucket.size()));
                values.push_back(median(samples[static_cast<std::size_t>(b)]));
            }
        }
        if (centres.size() < 2) {
            continue;
        }
        double tail = 0.0;
        int tail_n = 0;
        for (std::size_t i = 0; i < centres.size(); ++i) {
            if (std::abs(centres[i]) > reach - 1.5) {
                tail += values[i];
                ++tail_n;
            }
        }
        if (tail_n > 0) {
            for (double& v : values) {
                v -= tail / tail_n;
            }
        }
        peak = std::max(peak, *std::max_element(values.begin(), values.end()));
        const auto profile = [&](double d) {
            if (d <= centres.front()) {
                return values.front();
            }
            if (d >= centres.back()) {
                return values.back();
            }
            const auto it = std::upper_bound(centres.begin(), centres.end(), d);
            const auto i = static_cast<std::size_t>(it - centres.begin());
            const double f = (d - centres[i - 1]) / (centres[i] - centres[i - 1]);
            return values[i - 1] + f * (values[i] - values[i - 1]);
        };
        for (int k = 0; k < n_along; ++k) {
            const double centre = line_at(line, k + 0.5);
            for (int j = std::max(0, static_cast<int>(centre - reach)); j < std::min(n_across, static_cast<int>(centre + reach) + 1); ++j) {
                const double d = j + 0.5 - centre;
                if (std::abs(d) > reach) {
                    continue;
                }
                double& px = line.vertical ? img(j, k) : img(k, j);
                px -= profile(d);
            }
        }
    }
    return peak;
}

double distance_to_line(const MarkerLine& l, double x, double y)
{
    const double along = l.vertical ? y : x;
    const double across = l.vertical ? x : y;
    return std::abs(across - line_at(l, along)) / std::sqrt(1.0 + l.b * l.b);
}

}  // namespace

void ImageSpec::validate() const
{
    if (width < 16 || height < 16) {
        throw ConfigError("image must be at least 16 x 16 pixels");
    }
    if (!(pixel_nm > 0.0)) {
        throw ConfigError("pixel size must be > 0");
    }
    if (!(background >= 0.0) || !(poisson_scale >= 0.0)) {
        throw ConfigError("background and poisson scale must be >= 0");
    }
    if (markers && (!(grid.pitch_nm > 0.0) || !(grid.line_fwhm_nm > 0.0) || !(grid.intensity >= 0.0))) {
        throw ConfigError("marker grid needs positive pitch and width and nonnegative intensity");
    }
}

Eigen::Vector2d to_marker_frame(const MarkerGrid& grid, double x_nm, double y_nm)
{
    const double c = std::cos(grid.tilt_rad), s = std::sin(grid.tilt_rad);
    const double dx = x_nm - grid.origin_x_nm, dy = y_nm - grid.origin_y_nm;
    return {c * dx + s * dy, -s * dx + c * dy};
}

SyntheticImage render_image(std::span<const Spot> spots, const ImageSpec& spec, std::uint64_t seed)
{
    spec.validate();
    for (const auto& s : spots) {
        if (!(s.sigma_nm > 0.0)) {
            throw ConfigError("spot sigma must be > 0");
        }
        if (!(s.photons >= 0.0)) {
            throw ConfigError("spot photons must be >= 0");
        }
    }
    SyntheticImage img;
    img.width = spec.width;
    img.height = spec.height;
    img.pixel_nm = spec.pixel_nm;
    img.truth.spots.assign(spots.begin(), spots.end());
    img.truth.markers = spec.markers;
    img.truth.grid = spec.grid;
    img.pixels.assign(static_cast<std::size_t>(spec.width) * spec.height, spec.background);

    const double a = spec.pixel_nm;
    if (spec.markers) {
        const MarkerGrid& g = spec.grid;
        const double sigma = g.line_fwhm_nm / constants::fwhm_per_sigma;
        const double reach = 8.0 * sigma;
        for (int r = 0; r < spec.height; ++r) {
            for (int c = 0; c < spec.width; ++c) {
                const Eigen::Vector2d uv = to_marker_frame(g, (c + 0.5) * a, (r + 0.5) * a);
                double value = 0.0;
                for (int axis = 0; axis < 2; ++axis) {
                    const double coord = uv[axis];
                    const double k = std::max(0.0, std::round(coord / g.pitch_nm));
                    for (double kk = std::max(0.0, k - 1.0); kk <= k + 1.0; kk += 1.0) {
                        const double d = coord - kk * g.pitch_nm;
                        if (std::abs(d) < reach) {
                            value += g.intensity * std::exp(-0.5 * d * d / (sigma * sigma));
                        }
                    }
                }
                img.pixels[static_cast<std::size_t>(r) * spec.width + c] += value;
            }
        }
    }
    for (const auto& s : spots) {
        const double reach = 8.0 * s.sigma_nm;
        const double peak = s.photons * a * a / (2.0 * std::numbers::pi * s.sigma_nm * s.sigma_nm);
        const int c_lo = std::max(0, static_cast<int>((s.x_nm - reach) / a));
        const int c_hi = std::min(spec.width - 1, static_cast<int>((s.x_nm + reach) / a));
        const int r_lo = std::max(0, static_cast<int>((s.y_nm - reach) / a));
        const int r_hi = std::min(spec.height - 1, static_cast<int>((s.y_nm + reach) / a));
        for (int r = r_lo; r <= r_hi; ++r) {
            for (int c = c_lo; c <= c_hi; ++c) {
                const double dx = (c + 0.5) * a - s.x_nm, dy = (r + 0.5) * a - s.y_nm;
                img.pixels[static_cast<std::size_t>(r) * spec.width + c] +=
                    peak * std::exp(-0.5 * (dx * dx + dy * dy) / (s.sigma_nm * s.sigma_nm));
            }
        }
    }
    if (spec.poisson_scale > 0.0) {
        Rng rng = make_rng(seed, 0);
        for (double& p : img.pixels) {
            p = static_cast<double>(sample_poisson(rng, p * spec.poisson_scale)) / spec.poisson_scale;
        }
    }
    return img;
}

double LocatedSpot::std_nm() const
{
    return std::sqrt(std::max({covariance(0, 0), covariance(1, 1), 0.0}));
}

Localization locate_qds(const SyntheticImage& image, const LocateOptions& options)
{
    if (image.width < 16 || image.height < 16 ||
        image.pixels.size() != static_cast<std::size_t>(image.width) * image.height) {
        throw DataError("locate_qds: image must be at least 16 x 16 pixels with matching data");
    }
    if (!(image.pixel_nm > 0.0)) {
        throw ConfigError("locate_qds: pixel size must be > 0");
    }
    Pixels img{image.width, image.height, image.pixels};
    const double background = median(img.v);

    // Coarse marker positions from the row and column projections.
    std::vector<double> cols(static_cast<std::size_t>(img.width), 0.0), rows(static_cast<std::size_t>(img.height), 0.0);
    for (int r = 0; r < img.height; ++r) {
        for (int c = 0; c < img.width; ++c) {
            cols[static_cast<std::size_t>(c)] += img(c, r) / img.height;
            rows[static_cast<std::size_t>(r)] += img(c, r) / img.width;
        }
    }
    const auto coarse = [&](const std::vector<double>& profile, int depth) {
        const double base = median(profile);
        const double top = *std::max_element(profile.begin(), profile.end());
        const double noise = std::sqrt(std::max(base, 0.0) / depth);
        if (!(top - base > std::max(8.0 * noise, 1e-9 * (std::abs(base) + 1.0)))) {
            return std::vector<std::pair<double, double>>{};
        }
        return segments(profile, base, base + 0.5 * (top - base));
    };
    const auto coarse_v = coarse(cols, img.height);
    const auto coarse_h = coarse(rows, img.width);
    if (coarse_v.empty() || coarse_h.empty()) {
        throw DataError("locate_qds: no marker lines found");
    }

    Localization out;
    out.vertical = fit_lines(img, true, background, coarse_v, coarse_h);
    out.horizontal = fit_lines(img, false, background, coarse_h, coarse_v);
    if (out.vertical.empty() || out.horizontal.empty()) {
        throw DataError("locate_qds: no marker lines found");
    }
    const MarkerLine& v0 = out.vertical.front();
    const MarkerLine& h0 = out.horizontal.front();

    // Origin: x = av + bv y, y = ah + bh x.
    const double oy = (h0.a + h0.b * v0.a) / (1.0 - h0.b * v0.b);
    const double ox = v0.a + v0.b * oy;
    out.origin_nm = Eigen::Vector2d(ox, oy) * image.pixel_nm;
    double angle_sum = 0.0;
    for (const auto& l : out.horizontal) {
        angle_sum += std::atan(l.b);
    }
    for (const auto& l : out.vertical) {
        angle_sum += std::atan(-l.b);
    }
    out.axis_angle_rad = angle_sum / static_cast<double>(out.horizontal.size() + out.vertical.size());
    const double ca = std::cos(out.axis_angle_rad), sa = std::sin(out.axis_angle_rad);
    Eigen::Matrix2d rot;
    rot << ca, sa, -sa, ca;

    // Spots on the marker-free residual.
    Pixels resid = img;
    const double marker_peak = std::max(subtract_lines(resid, out.vertical, background, out.horizontal),
                                        subtract_lines(resid, out.horizontal, background, out.vertical));

    std::vector<double> far;
    for (int r = 0; r < img.height; ++r) {
        for (int c = 0; c < img.width; ++c) {
            bool near = false;
            for (const auto* family : {&out.vertical, &out.horizontal}) {
                for (const auto& l : *family) {
                    if (distance_to_line(l, c + 0.5, r + 0.5) < 4.0 * l.sigma_px + 1.0) {
                        near = true;
                    }
                }
            }
            if (!near) {
                far.push_back(img(c, r));
            }
        }
    }
    const auto [sky, sky_var] = far.empty() ? std::pair<double, double>{background, 0.0} : clipped_moments(far);
    const double gain = sky > 0.0 ? sky_var / sky : 0.0;

    Pixels smooth{img.width, img.height, std::vector<double>(img.v.size(), 0.0)};
    double smooth_max = 0.0;
    for (int r = 1; r + 1 < img.height; ++r) {
        for (int c = 1; c + 1 < img.width; ++c) {
            double s = 0.0;
            for (int dr = -1; dr <= 1; ++dr) {
                for (int dc = -1; dc <= 1; ++dc) {
                    s += resid(c + dc, r + dr) - sky;
                }
            }
            smooth(c, r) = s / 9.0;
            smooth_max = std::max(smooth_max, smooth(c, r));
        }
    }

    const double sigma_px = options.sigma_guess_nm / image.pixel_nm;
    const int half = std::max(3, static_cast<int>(std::ceil(3.5 * sigma_px)));
    const int nms = std::max(2, static_cast<int>(std::round(1.5 * sigma_px)));
    struct Peak {
        int c, r;
        double value;
    };
    std::vector<Peak> peaks;
    for (int r = 1; r + 1 < img.height; ++r) {
        for (int c = 1; c + 1 < img.width; ++c) {
            const double v = smooth(c, r);
            const double noise = std::sqrt(gain * std::max(img(c, r), sky)) / 3.0;
            const double floor = std::max(0.05 * smooth_max, 0.02 * marker_peak);
            if (v <= std::max(options.detection_threshold * noise, floor) || v <= 0.0) {
                continue;
            }
            bool is_max = true;
            for (int dr = -nms; dr <= nms && is_max; ++dr) {
                for (int dc = -nms; dc <= nms; ++dc) {
                    const int cc = c + dc, rr = r + dr;
                    if ((dc == 0 && dr == 0) || cc < 1 || rr < 1 || cc + 1 >= img.width || rr + 1 >= img.height) {
                        continue;
                    }
                    const double w = smooth(cc, rr);
                    if (w > v || (w == v && (rr < r || (rr == r && cc < c)))) {
                        is_max = false;
                        break;
                    }
                }
            }
            if (is_max) {
                peaks.push_back({c, r, v});
            }
        }
    }

    for (const auto& p : peaks) {
        const int c0 = std::max(0, p.c - half), c1 = std::min(img.width - 1, p.c + half);
        const int r0 = std::max(0, p.r - half), r1 = std::min(img.height - 1, p.r + half);
        const int nc = c1 - c0 + 1, nr = r1 - r0 + 1;
        const int n = nc * nr;
        std::vector<double> border;
        double total = 0.0;
        for (int r = r0; r <= r1; ++r) {
            for (int c = c0; c <= c1; ++c) {
                total += resid(c, r);
                if (r == r0 || r == r1 || c == c0 || c == c1) {
                    border.push_back(resid(c, r));
                }
            }
        }
        const double b0 = median(border);
        const fit::ResidualFn residuals = [&](const Eigen::VectorXd& x, Eigen::VectorXd& res) {
            const double s = std::exp(x[2]);
            const double norm = x[3] / (2.0 * std::numbers::pi * s * s);
            int i = 0;
            for (int r = r0; r <= r1; ++r) {
                for (int c = c0; c <= c1; ++c) {
                    const double dx = c + 0.5 - x[0], dy = r + 0.5 - x[1];
                    res[i++] = resid(c, r) - (norm * std::exp(-0.5 * (dx * dx + dy * dy) / (s * s)) + x[4]);
                }
            }
        };
        Eigen::VectorXd x0(5);
        x0 << p.c + 0.5, p.r + 0.5, std::log(sigma_px), std::max(total - b0 * n, 1.0), b0;
        const fit::Result fr = fit::least_squares(residuals, n, x0);
        const double sx = fr.x[0], sy = fr.x[1];
        const double width_ratio = std::exp(fr.x[2]) / sigma_px;
        if (!fr.x.allFinite() || sx < c0 || sx > c1 + 1 || sy < r0 || sy > r1 + 1 || !(fr.x[3] > 0.0)) {
            out.warnings.push_back("spot near pixel (" + std::to_string(p.c) + ", " + std::to_string(p.r) +
                                   ") could not be fitted");
            continue;
        }
        if (width_ratio < options.min_width_ratio || width_ratio > options.max_width_ratio) {
            continue;
        }
        LocatedSpot spot;
        spot.converged = fr.converged;
        spot.image_x_nm = sx * image.pixel_nm;
        spot.image_y_nm = sy * image.pixel_nm;
        const Eigen::Vector2d uv = rot * (Eigen::Vector2d(spot.image_x_nm, spot.image_y_nm) - out.origin_nm);
        spot.x_nm = uv[0];
        spot.y_nm = uv[1];
        spot.sigma_nm = std::exp(fr.x[2]) * image.pixel_nm;
        spot.photons = fr.x[3];
        const double scale = n > 5 ? fr.cost / (n - 5) : 0.0;
        const Eigen::Matrix2d cov_px = fr.covariance.topLeftCorner<2, 2>() * scale;
        spot.covariance = rot * cov_px * rot.transpose() * image.pixel_nm * image.pixel_nm;
        const double s_px = std::exp(fr.x[2]);
        for (const auto* family : {&out.vertical, &out.horizontal}) {
            for (const auto& l : *family) {
                if (distance_to_line(l, sx, sy) < 3.0 * l.sigma_px + 3.0 * s_px) {
                    spot.contaminated = true;
                }
            }
        }
        out.spots.push_back(spot);
    }
    for (std::size_t i = 0; i < out.spots.size(); ++i) {
        for (std::size_t j = i + 1; j < out.spots.size(); ++j) {
            auto& a = out.spots[i];
            auto& b = out.spots[j];
            const double d = std::hypot(a.image_x_nm - b.image_x_nm, a.image_y_nm - b.image_y_nm);
            if (d < 4.0 * std::max(a.sigma_nm, b.sigma_nm)) {
                a.overlapping = b.overlapping = true;
            }
        }
    }
    std::sort(out.spots.begin(), out.spots.end(), [](const LocatedSpot& a, const LocatedSpot& b) {
        return std::tie(a.y_nm, a.x_nm) < std::tie(b.y_nm, b.x_nm);
    });
    for (const auto& s : out.spots) {
        if (s.contaminated) {
            out.warnings.push_back("spot at (" + io::format_double(std::round(s.x_nm)) + ", " +
                                   io::format_double(std::round(s.y_nm)) + ") nm overlaps a marker line");
        }
    }
    return out;
}

double RepeatabilityReport::fraction_below(double limit_nm) const
{
    if (spots.empty()) {
        return 0.0;
    }
    std::size_t n = 0;
    for (const auto& s : spots) {
        if (s.std_nm < limit_nm) {
            ++n;
        }
    }
    return static_cast<double>(n) / static_cast<double>(spots.size());
}

RepeatabilityReport repeatability(std::span<const Localization> frames, double match_radius_nm)
{
    if (frames.size() < 2) {
        throw DataError("repeatability needs at least 2 frames");
    }
    RepeatabilityReport rep;
    rep.frames = static_cast<int>(frames.size());
    if (frames.size() < 5) {
        rep.warnings.push_back("only " + std::to_string(frames.size()) +
                               " frames: standard deviations are poorly determined");
    }
    const auto& ref = frames.front().spots;
    for (std::size_t k = 0; k < ref.size(); ++k) {
        std::vector<const LocatedSpot*> found;
        for (const auto& f : frames) {
            const LocatedSpot* best = nullptr;
            double best_d = match_radius_nm;
            for (const auto& s : f.spots) {
                const double d = std::hypot(s.x_nm - ref[k].x_nm, s.y_nm - ref[k].y_nm);
                if (d < best_d) {
                    best_d = d;
                    best = &s;
                }
            }
            if (best) {
                found.push_back(best);
            }
        }
        SpotRepeatability s;
        s.frames = static_cast<int>(found.size());
        double mx = 0, my = 0, ms = 0;
        for (const auto* f : found) {
            mx += f->x_nm;
            my += f->y_nm;
            ms += f->sigma_nm;
            s.contaminated = s.contaminated || f->contaminated;
        }
        const double n = static_cast<double>(found.size());
        s.x_nm = mx / n;
        s.y_nm = my / n;
        s.sigma_nm = ms / n;
        if (found.size() < 2) {
            rep.warnings.push_back("spot " + std::to_string(k) + " found in fewer than 2 frames");
            continue;
        }
        double vx = 0, vy = 0;
        for (const auto* f : found) {
            vx += (f->x_nm - s.x_nm) * (f->x_nm - s.x_nm);
            vy += (f->y_nm - s.y_nm) * (f->y_nm - s.y_nm);
        }
        s.std_x_nm = std::sqrt(vx / (n - 1.0));
        s.std_y_nm = std::sqrt(vy / (n - 1.0));
        s.std_nm = std::max(s.std_x_nm, s.std_y_nm);
        if (found.size() < frames.size()) {
            rep.warnings.push_back("spot " + std::to_string(k) + " missing in " +
                                   std::to_string(frames.size() - found.size()) + " frames");
        }
        rep.spots.push_back(s);
    }
    std::vector<double> stds;
    std::map<long long, int> bins;
    for (const auto& s : rep.spots) {
        stds.push_back(s.std_nm);
        ++bins[static_cast<long long>(std::floor(s.std_nm))];
    }
    rep.median_std_nm = median(stds);
    int best = -1;
    for (const auto& [b, count] : bins) {
        if (count > best) {
            best = count;
            rep.mode_std_nm = static_cast<double>(b) + 0.5;
        }
    }
    return rep;
}

RepeatabilityReport repeatability(std::span<const SyntheticImage> images, const LocateOptions& options)
{
    if (images.size() < 2) {
        throw DataError("repeatability needs at least 2 frames");
    }
    const Truth& t0 = images.front().truth;
    for (const auto& img : images) {
        bool same = img.truth.spots.size() == t0.spots.size() && img.pixel_nm == images.front().pixel_nm;
        for (std::size_t i = 0; same && i < t0.spots.size(); ++i) {
            same = img.truth.spots[i].x_nm == t0.spots[i].x_nm && img.truth.spots[i].y_nm == t0.spots[i].y_nm;
        }
        if (!same) {
            throw DataError("repeatability: frames carry different spot layouts");
        }
    }
    std::vector<Localization> frames;
    frames.reserve(images.size());
    for (const auto& img : images) {
        frames.push_back(locate_qds(img, options));
    }
    return repeatability(frames, 2.0 * options.sigma_guess_nm);
}

void write_pgm(std::ostream& out, const SyntheticImage& image)
{
    long long maxval = 255;
    std::vector<long long> values(image.pixels.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] = std::llround(std::max(image.pixels[i], 0.0));
        maxval = std::max(maxval, values[i]);
    }
    if (maxval > 65535) {
        throw DataError("write_pgm: pixel value " + std::to_string(maxval) + " exceeds 65535");
    }
    out << "P2\n" << image.width << ' ' << image.height << '\n' << maxval << '\n';
    for (int r = 0; r < image.height; ++r) {
        for (int c = 0; c < image.width; ++c) {
            out << values[static_cast<std::size_t>(r) * image.width + c] << (c + 1 < image.width ? ' ' : '\n');
        }
    }
}

SyntheticImage read_pgm(std::istream& in, double pixel_nm)
{
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.resize(hash);
        }
        std::istringstream ls(line);
        std::string tok;
        while (ls >> tok) {
            tokens.push_back(tok);
        }
    }
    if (tokens.size() < 4 || tokens[0] != "P2") {
        throw DataError("read_pgm: not a plain PGM (P2) file");
    }
    SyntheticImage img;
    img.pixel_nm = pixel_nm;
    img.width = static_cast<int>(io::parse_integer(tokens[1], 1, "width"));
    img.height = static_cast<int>(io::parse_integer(tokens[2], 1, "height"));
    const long long maxval = io::parse_integer(tokens[3], 1, "maxval");
    if (img.width <= 0 || img.height <= 0 || maxval <= 0 || maxval > 65535) {
        throw DataError("read_pgm: invalid header");
    }
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
    if (tokens.size() != 4 + n) {
        throw DataError("read_pgm: expected " + std::to_string(n) + " pixels, found " +
                        std::to_string(tokens.size() - 4));
    }
    img.pixels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const long long v = io::parse_integer(tokens[4 + i], 0, "pixel");
        if (v < 0 || v > maxval) {
            throw DataError("read_pgm: pixel " + std::to_string(i) + " outside [0, maxval]");
        }
        img.pixels[i] = static_cast<double>(v);
    }
    img.truth.markers = false;
    return img;
}

namespace {

nlohmann::json grid_to_json(const MarkerGrid& g)
{
    return {{"pitch_nm", g.pitch_nm},         {"origin_x_nm", g.origin_x_nm}, {"origin_y_nm", g.origin_y_nm},
            {"line_fwhm_nm", g.line_fwhm_nm}, {"intensity", g.intensity},     {"tilt_rad", g.tilt_rad}};
}

MarkerGrid grid_from_json(const nlohmann::json& doc)
{
    MarkerGrid g;
    g.pitch_nm = doc.value("pitch_nm", g.pitch_nm);
    g.origin_x_nm = doc.value("origin_x_nm", g.origin_x_nm);
    g.origin_y_nm = doc.value("origin_y_nm", g.origin_y_nm);
    g.line_fwhm_nm = doc.value("line_fwhm_nm", g.line_fwhm_nm);
    g.intensity = doc.value("intensity", g.intensity);
    g.tilt_rad = doc.value("tilt_rad", g.tilt_rad);
    return g;
}

}  // namespace

nlohmann::json truth_to_json(const SyntheticImage& image)
{
    nlohmann::json spots = nlohmann::json::array();
    for (const auto& s : image.truth.spots) {
        const Eigen::Vector2d uv = to_marker_frame(image.truth.grid, s.x_nm, s.y_nm);
        spots.push_back({{"x_nm", s.x_nm},
                         {"y_nm", s.y_nm},
                         {"sigma_nm", s.sigma_nm},
                         {"photons", s.photons},
                         {"marker_x_nm", uv[0]},
                         {"marker_y_nm", uv[1]}});
    }
    return {{"width", image.width},
            {"height", image.height},
            {"pixel_nm", image.pixel_nm},
            {"markers", image.truth.markers},
            {"grid", grid_to_json(image.truth.grid)},
            {"spots", spots}};
}

void apply_truth_json(SyntheticImage& image, const nlohmann::json& doc)
{
    try {
        if (doc.value("width", image.width) != image.width || doc.value("height", image.height) != image.height) {
            throw DataError("truth sidecar size does not match the image");
        }
        image.pixel_nm = doc.value("pixel_nm", image.pixel_nm);
        image.truth.markers = doc.value("markers", true);
        if (doc.contains("grid")) {
            image.truth.grid = grid_from_json(doc.at("grid"));
        }
        image.truth.spots = spots_from_json(doc);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("truth sidecar: ") + e.what());
    }
}

ImageSpec image_spec_from_json(const nlohmann::json& doc)
{
    ImageSpec spec;
    try {
        spec.width = doc.value("width", spec.width);
        spec.height = doc.value("height", spec.height);
        spec.pixel_nm = doc.value("pixel_nm", spec.pixel_nm);
        spec.background = doc.value("background", spec.background);
        spec.poisson_scale = doc.value("poisson_scale", spec.poisson_scale);
        spec.markers = doc.value("markers", spec.markers);
        if (doc.contains("grid")) {
            spec.grid = grid_from_json(doc.at("grid"));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("image spec: ") + e.what());
    }
    spec.validate();
    return spec;
}

std::vector<Spot> spots_from_json(const nlohmann::json& doc)
{
    std::vector<Spot> spots;
    if (!doc.contains("spots")) {
        return spots;
    }
    for (const auto& s : doc.at("spots")) {
        Spot spot;
        spot.x_nm = s.at("x_nm").get<double>();
        spot.y_nm = s.at("y_nm").get<double>();
        spot.sigma_nm = s.value("sigma_nm", spot.sigma_nm);
        spot.photons = s.value("photons", spot.photons);
        spots.push_back(spot);
    }
    return spots;
}

void write_located_csv(std::ostream& out, const Localization& result)
{
    out << "x_nm,y_nm,sigma_nm,std_nm\n";
    for (const auto& s : result.spots) {
        out << io::format_double(s.x_nm) << ',' << io::format_double(s.y_nm) << ','
            << io::format_double(s.sigma_nm) << ',' << io::format_double(s.std_nm()) << '\n';
    }
}

void write_repeatability_csv(std::ostream& out, const RepeatabilityReport& report)
{
    out << "x_nm,y_nm,sigma_nm,std_nm\n";
    for (const auto& s : report.spots) {
        out << io::format_double(s.x_nm) << ',' << io::format_double(s.y_nm) << ','
            << io::format_double(s.sigma_nm) << ',' << io::format_double(s.std_nm) << '\n';
    }
}

nlohmann::json to_json(const Localization& result)
{
    nlohmann::json spots = nlohmann::json::array();
    for (const auto& s : result.spots) {
        spots.push_back({{"x_nm", s.x_nm},
                         {"y_nm", s.y_nm},
                         {"sigma_nm", s.sigma_nm},
                         {"photons", s.photons},
                         {"covariance_nm2",
                          {{s.covariance(0, 0), s.covariance(0, 1)}, {s.covariance(1, 0), s.covariance(1, 1)}}},
                         {"image_x_nm", s.image_x_nm},
                         {"image_y_nm", s.image_y_nm},
                         {"converged", s.converged},
                         {"contaminated", s.contaminated},
                         {"overlapping", s.overlapping}});
    }
    const auto lines = [](const std::vector<MarkerLine>& ls) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& l : ls) {
            arr.push_back({{"a_px", l.a}, {"b", l.b}, {"sigma_px", l.sigma_px}});
        }
        return arr;
    };
    return {{"origin_nm", {result.origin_nm[0], result.origin_nm[1]}},
            {"axis_angle_rad", result.axis_angle_rad},
            {"vertical_lines", lines(result.vertical)},
            {"horizontal_lines", lines(result.horizontal)},
            {"spots", spots},
            {"warnings", result.warnings}};
}

nlohmann::json to_json(const RepeatabilityReport& report)
{
    nlohmann::json spots = nlohmann::json::array();
    for (const auto& s : report.spots) {
        spots.push_back({{"x_nm", s.x_nm},
                         {"y_nm", s.y_nm},
                         {"sigma_nm", s.sigma_nm},
                         {"std_x_nm", s.std_x_nm},
                         {"std_y_nm", s.std_y_nm},
                         {"std_nm", s.std_nm},
                         {"frames", s.frames},
                         {"contaminated", s.contaminated}});
    }
    return {{"frames", report.frames},
            {"median_std_nm", report.median_std_nm},
            {"mode_std_nm", report.mode_std_nm},
            {"fraction_below_15_nm", report.fraction_below(15.0)},
            {"spots", spots},
            {"warnings", report.warnings}};
}

}  // namespace qdent::positioning
