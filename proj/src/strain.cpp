#include "qdent/strain.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>

#include "qdent/error.hpp"
#include "qdent/io.hpp"
#include "qdent/random.hpp"

namespace qdent::strain {

namespace {

Eigen::Matrix2d response(const StrainModel& m)
{
    Eigen::Matrix2d a;
    a.col(0) = m.u14;
    a.col(1) = m.u25;
    return a;
}

Vec2 vec2_from_json(const nlohmann::json& doc, const char* key, Vec2 fallback)
{
    if (!doc.contains(key)) {
        return fallback;
    }
    const auto& v = doc.at(key);
    if (!v.is_array() || v.size() != 2) {
        throw ConfigError(std::string("strain model: '") + key + "' must be a 2-element array");
    }
    return Vec2(v.at(0).get<double>(), v.at(1).get<double>());
}

double wrap_pi(double angle)
{
    double a = std::fmod(angle, std::numbers::pi);
    if (a < 0.0) {
        a += std::numbers::pi;
    }
    return a >= std::numbers::pi ? 0.0 : a;
}

}  // namespace

void StrainModel::validate() const
{
    if (!d0.allFinite() || !u14.allFinite() || !u25.allFinite()) {
        throw ConfigError("strain model: response vectors must be finite");
    }
    if (!(plate_thickness_um > 0.0)) {
        throw ConfigError("strain model: plate thickness must be > 0");
    }
    if (!(field_limit_kv_cm > 0.0)) {
        throw ConfigError("strain model: field limit must be > 0");
    }
    for (double k : kappa_nev_per_v) {
        if (!std::isfinite(k)) {
            throw ConfigError("strain model: energy slopes must be finite");
        }
    }
}

double StrainModel::condition_number() const
{
    const Eigen::JacobiSVD<Eigen::Matrix2d> svd(response(*this));
    const auto sv = svd.singularValues();
    if (!(sv[1] > 0.0)) {
        return std::numeric_limits<double>::infinity();
    }
    return sv[0] / sv[1];
}

bool FieldSetting::within(double limit_kv_cm) const
{
    return std::abs(e14) <= limit_kv_cm && std::abs(e25) <= limit_kv_cm && std::abs(e36) <= limit_kv_cm;
}

Fss fss_vector(const StrainModel& model, const FieldSetting& f)
{
    Fss out;
    out.d = model.d0 + f.e14 * model.u14 + f.e25 * model.u25;
    out.s = out.d.norm();
    out.phi = 0.5 * std::atan2(out.d[1], out.d[0]);
    return out;
}

FieldSetting find_null(const StrainModel& model)
{
    model.validate();
    const double cond = model.condition_number();
    if (!(cond <= 1e12)) {
        throw NumericalError("find_null: response matrix is singular (u14 and u25 are dependent)");
    }
    const Eigen::Matrix2d a = response(model);
    const Vec2 e = a.fullPivLu().solve(-model.d0);
    return FieldSetting{e[0], e[1], 0.0};
}

std::vector<SweepPoint> sweep_fss(const StrainModel& model, std::span<const double> e14_values,
                                  std::span<const double> e25_values)
{
    if (e14_values.empty() || e25_values.empty()) {
        throw ConfigError("sweep_fss: field grids must be nonempty");
    }
    std::vector<SweepPoint> out;
    out.reserve(e14_values.size() * e25_values.size());
    for (double e14 : e14_values) {
        for (double e25 : e25_values) {
            const Fss f = fss_vector(model, FieldSetting{e14, e25, 0.0});
            out.push_back(SweepPoint{e14, e25, f.s, f.phi});
        }
    }
    return out;
}

double field_to_voltage(double field_kv_cm, double thickness_um)
{
    return field_kv_cm * thickness_um * 0.1;
}

double energy_at(const StrainModel& model, const FieldSetting& f, Drive drive)
{
    const std::array<double, 3> drive_values{f.e14, f.e25, f.e36};
    double shift_nev = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        const double volts =
            drive == Drive::fields ? field_to_voltage(drive_values[i], model.plate_thickness_um) : drive_values[i];
        shift_nev += model.kappa_nev_per_v[i] * volts;
    }
    return model.e0_ev + shift_nev * 1e-9;
}

std::vector<ScanPoint> synthesize_polarization_scan(double s_uev, double phi_rad, double noise_sigma_uev,
                                                    int n_angles, std::uint64_t seed, double mean_uev)
{
    if (n_angles < 8) {
        throw ConfigError("polarization scan needs at least 8 angles");
    }
    if (!(s_uev >= 0.0) || !(noise_sigma_uev >= 0.0)) {
        throw ConfigError("polarization scan: splitting and noise must be >= 0");
    }
    Rng rng = make_rng(seed, 0);
    std::vector<ScanPoint> scan(static_cast<std::size_t>(n_angles));
    for (int i = 0; i < n_angles; ++i) {
        const double theta = std::numbers::pi * i / n_angles;
        scan[static_cast<std::size_t>(i)] = {
            theta, mean_uev + s_uev * std::cos(4.0 * theta - 2.0 * phi_rad) + sample_normal(rng, noise_sigma_uev)};
    }
    return scan;
}

FssEstimate extract_fss(std::span<const ScanPoint> scan)
{
    const auto n = static_cast<Eigen::Index>(scan.size());
    if (n < 8) {
        throw DataError("extract_fss: need at least 8 scan points, got " + std::to_string(n));
    }
    double lo = scan[0].hwp_angle_rad, hi = lo;
    for (const auto& p : scan) {
        lo = std::min(lo, p.hwp_angle_rad);
        hi = std::max(hi, p.hwp_angle_rad);
    }
    const double coverage = (hi - lo) * static_cast<double>(n) / static_cast<double>(n - 1);
    if (coverage < 0.5 * std::numbers::pi - 1e-9) {
        throw DataError("extract_fss: scan angles do not cover a 90 degree period");
    }
    Eigen::MatrixXd x(n, 3);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double t = scan[static_cast<std::size_t>(i)].hwp_angle_rad;
        x(i, 0) = 1.0;
        x(i, 1) = std::cos(4.0 * t);
        x(i, 2) = std::sin(4.0 * t);
        y[i] = scan[static_cast<std::size_t>(i)].energy_difference_uev;
    }
    const Eigen::Matrix3d xtx = x.transpose() * x;
    const Eigen::FullPivLU<Eigen::Matrix3d> lu(xtx);
    if (!lu.isInvertible()) {
        throw DataError("extract_fss: scan angles do not determine the sinusoid");
    }
    const Eigen::Vector3d beta = lu.solve(x.transpose() * y);
    const Eigen::VectorXd resid = y - x * beta;
    const double rss = resid.squaredNorm();
    const double var = rss / static_cast<double>(n - 3);
    const Eigen::Matrix3d cov = var * lu.inverse();

    FssEstimate e;
    const double a = beta[1], b = beta[2];
    e.mean = beta[0];
    e.s = std::hypot(a, b);
    e.phi = wrap_pi(0.5 * std::atan2(b, a));
    e.residual_rms = std::sqrt(rss / static_cast<double>(n));
    const double amp_var = 0.5 * (cov(1, 1) + cov(2, 2));
    if (e.s > 0.0) {
        e.s_err = std::sqrt(std::max(a * a * cov(1, 1) + b * b * cov(2, 2) + 2.0 * a * b * cov(1, 2), 0.0)) / e.s;
        e.phi_err =
            0.5 * std::sqrt(std::max(b * b * cov(1, 1) + a * a * cov(2, 2) - 2.0 * a * b * cov(1, 2), 0.0)) /
            (e.s * e.s);
    } else {
        e.s_err = std::sqrt(std::max(amp_var, 0.0));
        e.phi_err = std::numbers::pi / 2.0;
    }
    e.null_bias = std::sqrt(std::max(amp_var, 0.0)) * std::sqrt(std::numbers::pi / 2.0);
    return e;
}

Calibration calibrate(std::span<const Observation> observations, const StrainModel& base)
{
    const auto n = static_cast<Eigen::Index>(observations.size());
    if (n < 3) {
        throw DataError("calibrate: need at least 3 observations");
    }
    Eigen::MatrixXd x(n, 3);
    Eigen::MatrixXd y(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& o = observations[static_cast<std::size_t>(i)];
        x(i, 0) = 1.0;
        x(i, 1) = o.field.e14;
        x(i, 2) = o.field.e25;
        y(i, 0) = o.s * std::cos(2.0 * o.phi);
        y(i, 1) = o.s * std::sin(2.0 * o.phi);
    }
    const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
    if (qr.rank() < 3) {
        throw DataError("calibrate: observation fields do not span both leg pairs");
    }
    const Eigen::MatrixXd beta = qr.solve(y);
    Calibration c;
    c.model = base;
    c.model.d0 = beta.row(0).transpose();
    c.model.u14 = beta.row(1).transpose();
    c.model.u25 = beta.row(2).transpose();
    c.rms_residual_uev = std::sqrt((y - x * beta).squaredNorm() / static_cast<double>(n));
    return c;
}

StrainModel model_from_json(const nlohmann::json& doc)
{
    StrainModel m;
    try {
        m.d0 = vec2_from_json(doc, "d0_ueV", m.d0);
        m.u14 = vec2_from_json(doc, "u14_ueV_per_kV_cm", m.u14);
        m.u25 = vec2_from_json(doc, "u25_ueV_per_kV_cm", m.u25);
        m.e0_ev = doc.value("e0_eV", m.e0_ev);
        if (doc.contains("kappa_neV_per_V")) {
            const auto& k = doc.at("kappa_neV_per_V");
            if (k.is_number()) {
                m.kappa_nev_per_v.fill(k.get<double>());
            } else if (k.is_array() && k.size() == 3) {
                for (std::size_t i = 0; i < 3; ++i) {
                    m.kappa_nev_per_v[i] = k.at(i).get<double>();
                }
            } else {
                throw ConfigError("strain model: 'kappa_neV_per_V' must be a number or a 3-element array");
            }
        }
        m.plate_thickness_um = doc.value("plate_thickness_um", m.plate_thickness_um);
        m.field_limit_kv_cm = doc.value("field_limit_kV_cm", m.field_limit_kv_cm);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("strain model: ") + e.what());
    }
    m.validate();
    return m;
}

nlohmann::json to_json(const StrainModel& m)
{
    return nlohmann::json{{"d0_ueV", {m.d0[0], m.d0[1]}},
                          {"u14_ueV_per_kV_cm", {m.u14[0], m.u14[1]}},
                          {"u25_ueV_per_kV_cm", {m.u25[0], m.u25[1]}},
                          {"e0_eV", m.e0_ev},
                          {"kappa_neV_per_V", m.kappa_nev_per_v},
                          {"plate_thickness_um", m.plate_thickness_um},
                          {"field_limit_kV_cm", m.field_limit_kv_cm}};
}

void write_sweep_csv(std::ostream& out, std::span<const SweepPoint> sweep)
{
    out << "e14_kV_cm,e25_kV_cm,s_ueV,phi_rad\n";
    for (const auto& p : sweep) {
        out << io::format_double(p.e14) << ',' << io::format_double(p.e25) << ',' << io::format_double(p.s) << ','
            << io::format_double(p.phi) << '\n';
    }
}

void write_scan_csv(std::ostream& out, std::span<const ScanPoint> scan)
{
    out << "hwp_angle_rad,energy_difference_ueV\n";
    for (const auto& p : scan) {
        out << io::format_double(p.hwp_angle_rad) << ',' << io::format_double(p.energy_difference_uev) << '\n';
    }
}

std::vector<ScanPoint> read_scan_csv(std::istream& in)
{
    std::vector<ScanPoint> scan;
    for (const auto& row : io::read_csv(in)) {
        if (row.fields.size() != 2) {
            throw DataError("line " + std::to_string(row.line) + ": expected hwp_angle_rad,energy_difference_ueV");
        }
        scan.push_back({io::parse_double(row.fields[0], row.line, "hwp_angle_rad"),
                        io::parse_double(row.fields[1], row.line, "energy_difference_ueV")});
    }
    return scan;
}

}  // namespace qdent::strain
