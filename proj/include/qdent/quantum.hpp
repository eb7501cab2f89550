#pragma once

#include <complex>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace qdent::quantum {

using Complex = std::complex<double>;
using Vector4c = Eigen::Vector4cd;
using Matrix4c = Eigen::Matrix4cd;
using Matrix2c = Eigen::Matrix2cd;

// Two-photon polarization basis index: first photon is the X photon,
// second the XX photon.  HH=0, HV=1, VH=2, VV=3.
enum BasisIndex : int { HH = 0, HV = 1, VH = 2, VV = 3 };

inline constexpr double norm_tolerance = 1e-12;
inline constexpr double hermiticity_tolerance = 1e-12;
inline constexpr double trace_tolerance = 1e-12;
inline constexpr double eigenvalue_tolerance = -1e-10;

class PureState {
public:
    // Throws ConfigError unless the squared norm is 1 within norm_tolerance.
    explicit PureState(const Vector4c& amplitudes);

    // Rescales arbitrary nonzero amplitudes to unit norm.
    static PureState normalized(const Vector4c& amplitudes);

    static PureState phi_plus();
    static PureState phi_minus();
    static PureState psi_plus();
    static PureState psi_minus();
    static PureState basis(BasisIndex index);

    const Vector4c& amplitudes() const { return amps_; }

private:
    Vector4c amps_;
};

class DensityMatrix {
public:
    static DensityMatrix maximally_mixed();
    static DensityMatrix from_pure(const PureState& state);

    const Matrix4c& matrix() const { return m_; }
    Complex operator()(int row, int col) const { return m_(row, col); }

private:
    explicit DensityMatrix(const Matrix4c& m) : m_(m) {}

    Matrix4c m_;

    friend DensityMatrix validate_density_matrix(const Matrix4c& m);
    friend DensityMatrix project_to_physical(const Matrix4c& m);
};

struct ValidationReport {
    double hermiticity_error = 0.0;  // max |m - m^dagger|
    double trace_error = 0.0;        // |tr m - 1|
    double min_eigenvalue = 0.0;     // of the Hermitian part
    bool ok = false;
    std::string failure;             // empty when ok
};

ValidationReport check_density_matrix(const Matrix4c& m);

// Accepts a matrix that is Hermitian, unit-trace and PSD within tolerance.
// Throws DataError naming the violated invariant and its size. The stored
// matrix is symmetrised but never projected.
DensityMatrix validate_density_matrix(const Matrix4c& m);

// Closest unit-trace PSD matrix in the Frobenius sense to the Hermitian part
// of `m` (eigenvalue simplex projection).
DensityMatrix project_to_physical(const Matrix4c& m);

// Columns are the magic basis:
//   e1 = (HH + VV)/sqrt2,   e2 = i(HH - VV)/sqrt2,
//   e3 = i(HV + VH)/sqrt2,  e4 = (HV - VH)/sqrt2.
Matrix4c magic_basis();

// max over maximally entangled |phi> of <phi|rho|phi>; the largest eigenvalue
// of Re(rho) written in the magic basis.
double fully_entangled_fraction(const DensityMatrix& rho);

// Wootters concurrence.
double concurrence(const DensityMatrix& rho);

double fidelity_to_state(const DensityMatrix& rho, const PureState& target);

double purity(const DensityMatrix& rho);

// (1/2) sum |eigenvalues of (a - b)|.
double trace_distance(const DensityMatrix& a, const DensityMatrix& b);

// (ua (x) ub) rho (ua (x) ub)^dagger
DensityMatrix apply_local_unitaries(const DensityMatrix& rho, const Matrix2c& ua, const Matrix2c& ub);

Matrix4c kron(const Matrix2c& a, const Matrix2c& b);

struct MetricReport {
    double fef = 0.0;
    double concurrence = 0.0;
    double purity = 0.0;
    double fidelity_to_target = 0.0;
};

MetricReport compute_metrics(const DensityMatrix& rho, const PureState& target = PureState::phi_plus());

nlohmann::json to_json(const MetricReport& metrics);

struct Metadata {
    std::string source;
    std::string timestamp;
    std::vector<std::string> provenance;
};

// {"basis": ["HH","HV","VH","VV"], "matrix": 4x4 of [re, im], "metadata": {...}}
nlohmann::json to_json(const DensityMatrix& rho, const Metadata& metadata);

// Parses the schema above and validates the result.
DensityMatrix density_matrix_from_json(const nlohmann::json& doc);

}  // namespace qdent::quantum
