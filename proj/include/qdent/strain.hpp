#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace qdent::strain {

using Vec2 = Eigen::Vector2d;

// Affine response of the exciton fine structure vector to the fields of the
// three actuator leg pairs.  Pair 3-6 only shifts the emission energy.
struct StrainModel {
    Vec2 d0 = Vec2::Zero();   // zero-field FSS vector, ueV
    Vec2 u14 = Vec2::UnitX(); // ueV per kV/cm
    Vec2 u25 = Vec2::UnitY(); // ueV per kV/cm
    double e0_ev = 1.3;       // unperturbed exciton energy
    std::array<double, 3> kappa_nev_per_v{90.0, 90.0, 90.0};  // pairs 1-4, 2-5, 3-6
    double plate_thickness_um = 300.0;
    double field_limit_kv_cm = 50.0;  // |E| allowed on each pair

    void validate() const;
    // Ratio of singular values of [u14 u25]; infinite for dependent legs.
    double condition_number() const;
};

struct FieldSetting {
    double e14 = 0.0;  // kV/cm
    double e25 = 0.0;
    double e36 = 0.0;

    bool within(double limit_kv_cm) const;
};

struct Fss {
    Vec2 d = Vec2::Zero();
    double s = 0.0;    // |d|, ueV
    double phi = 0.0;  // polarization angle 0.5 atan2(d2, d1), rad
};

Fss fss_vector(const StrainModel& model, const FieldSetting& f);

// Solves d0 + e14 u14 + e25 u25 = 0.  NumericalError when the response
// matrix is singular (condition number above 1e12).
FieldSetting find_null(const StrainModel& model);

struct SweepPoint {
    double e14 = 0.0;
    double e25 = 0.0;
    double s = 0.0;
    double phi = 0.0;
};

// Row-major over e14 (outer) and e25 (inner).  ConfigError on empty grids.
std::vector<SweepPoint> sweep_fss(const StrainModel& model, std::span<const double> e14_values,
                                  std::span<const double> e25_values);

// Plate voltage for a field across the actuator: E [kV/cm] * t [um] * 0.1.
double field_to_voltage(double field_kv_cm, double thickness_um);

enum class Drive { fields, voltages };

// e0 + sum kappa_pair * V_pair, in eV.  With Drive::voltages the setting's
// entries are read as volts.
double energy_at(const StrainModel& model, const FieldSetting& f, Drive drive = Drive::fields);

struct ScanPoint {
    double hwp_angle_rad = 0.0;
    double energy_difference_uev = 0.0;
};

// D(theta) = mean + s cos(4 theta - 2 phi) + Gaussian noise, on n_angles
// equally spaced half-wave-plate angles over [0, pi).  ConfigError for
// n_angles < 8.
std::vector<ScanPoint> synthesize_polarization_scan(double s_uev, double phi_rad, double noise_sigma_uev,
                                                    int n_angles, std::uint64_t seed, double mean_uev = 0.0);

struct FssEstimate {
    double s = 0.0;
    double s_err = 0.0;
    double phi = 0.0;  // [0, pi)
    double phi_err = 0.0;
    double mean = 0.0;
    double residual_rms = 0.0;
    // Expected fitted amplitude for a true splitting of zero,
    // sigma_amp sqrt(pi/2): the bias of |amplitude| at the null.
    double null_bias = 0.0;
};

// Linear least-squares fit of c + a cos(4 theta) + b sin(4 theta).  DataError
// with fewer than 8 points or angles not covering a 90 degree period.
FssEstimate extract_fss(std::span<const ScanPoint> scan);

struct Observation {
    FieldSetting field;
    double s = 0.0;
    double phi = 0.0;
};

struct Calibration {
    StrainModel model;  // d0, u14, u25 replaced; other members kept
    double rms_residual_uev = 0.0;
};

// Least-squares d0, u14, u25 from observed (s, phi) at known fields; the
// FSS vector of each observation is s (cos 2 phi, sin 2 phi).  DataError
// with fewer than 3 observations or degenerate field layouts.
Calibration calibrate(std::span<const Observation> observations, const StrainModel& base);

StrainModel model_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const StrainModel& model);

// e14_kV_cm, e25_kV_cm, s_ueV, phi_rad
void write_sweep_csv(std::ostream& out, std::span<const SweepPoint> sweep);
// hwp_angle_rad, energy_difference_ueV
void write_scan_csv(std::ostream& out, std::span<const ScanPoint> scan);
std::vector<ScanPoint> read_scan_csv(std::istream& in);

}  // namespace qdent::strain
