#include "qdent/quantum.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>

#include "qdent/error.hpp"

namespace qdent::quantum {

namespace {

const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
const Complex I(0.0, 1.0);

Matrix4c hermitian_part(const Matrix4c& m)
{
    return 0.5 * (m + m.adjoint());
}

// Euclidean projection of `values` onto the probability simplex.
Eigen::Vector4d project_to_simplex(const Eigen::Vector4d& values)
{
    std::array<double, 4> sorted{values[0], values[1], values[2], values[3]};
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    double cumulative = 0.0;
    double shift = 0.0;
    for (int k = 0; k < 4; ++k) {
        cumulative += sorted[k];
        const double candidate = (cumulative - 1.0) / (k + 1);
        if (sorted[k] - candidate > 0.0) {
            shift = candidate;
        }
    }
    return (values.array() - shift).max(0.0).matrix();
}

}  // namespace

PureState::PureState(const Vector4c& amplitudes) : amps_(amplitudes)
{
    const double n = amps_.squaredNorm();
    if (!(std::abs(n - 1.0) <= norm_tolerance)) {
        std::ostringstream msg;
        msg << "pure state amplitudes are not normalised: |psi|^2 = " << n;
        throw ConfigError(msg.str());
    }
}

PureState PureState::normalized(const Vector4c& amplitudes)
{
    const double n = amplitudes.norm();
    if (!(n > 0.0) || !std::isfinite(n)) {
        throw ConfigError("cannot normalise a zero or non-finite state vector");
    }
    Vector4c v = amplitudes / n;
    // Remove rounding so the constructor's tolerance always holds.
    v /= v.norm();
    return PureState(v);
}

PureState PureState::phi_plus()
{
    return PureState(Vector4c(inv_sqrt2, 0.0, 0.0, inv_sqrt2));
}

PureState PureState::phi_minus()
{
    return PureState(Vector4c(inv_sqrt2, 0.0, 0.0, -inv_sqrt2));
}

PureState PureState::psi_plus()
{
    return PureState(Vector4c(0.0, inv_sqrt2, inv_sqrt2, 0.0));
}

PureState PureState::psi_minus()
{
    return PureState(Vector4c(0.0, inv_sqrt2, -inv_sqrt2, 0.0));
}

PureState PureState::basis(BasisIndex index)
{
    Vector4c v = Vector4c::Zero();
    v[index] = 1.0;
    return PureState(v);
}

DensityMatrix DensityMatrix::maximally_mixed()
{
    return DensityMatrix(Matrix4c::Identity() / 4.0);
}

DensityMatrix DensityMatrix::from_pure(const PureState& state)
{
    const Vector4c& a = state.amplitudes();
    return DensityMatrix(a * a.adjoint());
}

ValidationReport check_density_matrix(const Matrix4c& m)
{
    ValidationReport report;
    if (!m.allFinite()) {
        report.failure = "matrix has non-finite entries";
        report.hermiticity_error = std::numeric_limits<double>::infinity();
        return report;
    }
    report.hermiticity_error = (m - m.adjoint()).cwiseAbs().maxCoeff();
    report.trace_error = std::abs(m.trace() - Complex(1.0, 0.0));
    Eigen::SelfAdjointEigenSolver<Matrix4c> eig(hermitian_part(m), Eigen::EigenvaluesOnly);
    report.min_eigenvalue = eig.eigenvalues().minCoeff();

    std::ostringstream msg;
    if (report.hermiticity_error > hermiticity_tolerance) {
        msg << "not Hermitian: max |m - m^dagger| = " << report.hermiticity_error;
    } else if (report.trace_error > trace_tolerance) {
        msg << "trace differs from 1 by " << report.trace_error;
    } else if (report.min_eigenvalue < eigenvalue_tolerance) {
        msg << "negative eigenvalue " << report.min_eigenvalue;
    }
    report.failure = msg.str();
    report.ok = report.failure.empty();
    return report;
}

DensityMatrix validate_density_matrix(const Matrix4c& m)
{
    const ValidationReport report = check_density_matrix(m);
    if (!report.ok) {
        throw DataError("invalid density matrix: " + report.failure);
    }
    return DensityMatrix(hermitian_part(m));
}

DensityMatrix project_to_physical(const Matrix4c& m)
{
    if (!m.allFinite()) {
        throw NumericalError("cannot project a matrix with non-finite entries");
    }
    Eigen::SelfAdjointEigenSolver<Matrix4c> eig(hermitian_part(m));
    const Eigen::Vector4d lambda = project_to_simplex(eig.eigenvalues());
    const Matrix4c& u = eig.eigenvectors();
    Matrix4c out = u * lambda.cast<Complex>().asDiagonal() * u.adjoint();
    out = hermitian_part(out);
    out /= out.trace().real();
    return DensityMatrix(out);
}

Matrix4c magic_basis()
{
    Matrix4c b = Matrix4c::Zero();
    b(HH, 0) = inv_sqrt2;
    b(VV, 0) = inv_sqrt2;
    b(HH, 1) = I * inv_sqrt2;
    b(VV, 1) = -I * inv_sqrt2;
    b(HV, 2) = I * inv_sqrt2;
    b(VH, 2) = I * inv_sqrt2;
    b(HV, 3) = inv_sqrt2;
    b(VH, 3) = -inv_sqrt2;
    return b;
}

double fully_entangled_fraction(const DensityMatrix& rho)
{
    static const Matrix4c basis = magic_basis();
    const Matrix4c in_magic = basis.adjoint() * rho.matrix() * basis;
    const Eigen::Matrix4d real_part = in_magic.real();
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> eig(0.5 * (real_part + real_part.transpose()),
                                                       Eigen::EigenvaluesOnly);
    return eig.eigenvalues().maxCoeff();
}

double concurrence(const DensityMatrix& rho)
{
    Matrix4c yy = Matrix4c::Zero();
    // sigma_y (x) sigma_y is real in the (HH,HV,VH,VV) basis.
    yy(HH, VV) = -1.0;
    yy(HV, VH) = 1.0;
    yy(VH, HV) = 1.0;
    yy(VV, HH) = -1.0;
    // With rho = X X^dagger, the square roots of the eigenvalues of
    // rho (yy rho* yy) are the singular values of X^T yy X.
    Eigen::SelfAdjointEigenSolver<Matrix4c> eig_rho(rho.matrix());
    const Eigen::Vector4d root = eig_rho.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Matrix4c x = eig_rho.eigenvectors() * root.cast<Complex>().asDiagonal();
    const Matrix4c m = x.transpose() * yy * x;
    Eigen::JacobiSVD<Matrix4c> svd(m);
    Eigen::Vector4d lambda = svd.singularValues();
    std::sort(lambda.data(), lambda.data() + 4, std::greater<>());
    return std::max(0.0, lambda[0] - lambda[1] - lambda[2] - lambda[3]);
}

double fidelity_to_state(const DensityMatrix& rho, const PureState& target)
{
    const Vector4c& a = target.amplitudes();
    const double f = (a.adjoint() * rho.matrix() * a)(0, 0).real();
    return std::clamp(f, 0.0, 1.0);
}

double purity(const DensityMatrix& rho)
{
    return (rho.matrix() * rho.matrix()).trace().real();
}

double trace_distance(const DensityMatrix& a, const DensityMatrix& b)
{
    Eigen::SelfAdjointEigenSolver<Matrix4c> eig(hermitian_part(a.matrix() - b.matrix()),
                                                Eigen::EigenvaluesOnly);
    return 0.5 * eig.eigenvalues().cwiseAbs().sum();
}

Matrix4c kron(const Matrix2c& a, const Matrix2c& b)
{
    Matrix4c out;
    for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
            out.block<2, 2>(2 * i, 2 * j) = a(i, j) * b;
        }
    }
    return out;
}

DensityMatrix apply_local_unitaries(const DensityMatrix& rho, const Matrix2c& ua, const Matrix2c& ub)
{
    const Matrix4c u = kron(ua, ub);
    return validate_density_matrix(hermitian_part(u * rho.matrix() * u.adjoint()));
}

MetricReport compute_metrics(const DensityMatrix& rho, const PureState& target)
{
    MetricReport r;
    r.fef = fully_entangled_fraction(rho);
    r.concurrence = concurrence(rho);
    r.purity = purity(rho);
    r.fidelity_to_target = fidelity_to_state(rho, target);
    return r;
}

nlohmann::json to_json(const MetricReport& metrics)
{
    return nlohmann::json{{"fef", metrics.fef},
                          {"concurrence", metrics.concurrence},
                          {"purity", metrics.purity},
                          {"fidelity_to_target", metrics.fidelity_to_target}};
}

nlohmann::json to_json(const DensityMatrix& rho, const Metadata& metadata)
{
    nlohmann::json rows = nlohmann::json::array();
    for (int i = 0; i < 4; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int j = 0; j < 4; ++j) {
            row.push_back({rho(i, j).real(), rho(i, j).imag()});
        }
        rows.push_back(row);
    }
    return nlohmann::json{
        {"basis", {"HH", "HV", "VH", "VV"}},
        {"matrix", rows},
        {"metadata",
         {{"source", metadata.source},
          {"timestamp", metadata.timestamp},
          {"provenance", metadata.provenance}}}};
}

DensityMatrix density_matrix_from_json(const nlohmann::json& doc)
{
    if (!doc.contains("matrix") || !doc.at("matrix").is_array() || doc.at("matrix").size() != 4) {
        throw DataError("density matrix JSON needs a 4x4 'matrix' array");
    }
    Matrix4c m;
    for (int i = 0; i < 4; ++i) {
        const auto& row = doc.at("matrix").at(i);
        if (!row.is_array() || row.size() != 4) {
            throw DataError("density matrix row " + std::to_string(i) + " must have 4 entries");
        }
        for (int j = 0; j < 4; ++j) {
            const auto& entry = row.at(j);
            if (!entry.is_array() || entry.size() != 2 || !entry.at(0).is_number() ||
                !entry.at(1).is_number()) {
                throw DataError("density matrix entries must be [re, im] number pairs");
            }
            m(i, j) = Complex(entry.at(0).get<double>(), entry.at(1).get<double>());
        }
    }
    return validate_density_matrix(m);
}

}  // namespace qdent::quantum
