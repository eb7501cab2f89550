#include "oracles.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <numbers>
#include <numeric>

#include <gsl/gsl_integration.h>
#include <gsl/gsl_multimin.h>
#include <gsl/gsl_qrng.h>

namespace qdent::oracle {

namespace {

using Complex = std::complex<double>;
constexpr double hbar = 0.6582119569;  // ueV ns

Vector4c phi_plus()
{
    Vector4c v = Vector4c::Zero();
    v(0) = v(3) = 1.0 / std::sqrt(2.0);
    return v;
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

struct OverlapProblem {
    const Matrix4c* rho;
};

double negative_overlap(const gsl_vector* x, void* params)
{
    const auto* problem = static_cast<const OverlapProblem*>(params);
    double angles[6];
    for (int i = 0; i < 6; ++i) {
        angles[i] = gsl_vector_get(x, i);
    }
    return -maximally_entangled_overlap(*problem->rho, angles);
}

double nelder_mead(const Matrix4c& rho, const double start[6])
{
    OverlapProblem problem{&rho};
    gsl_multimin_function fn{&negative_overlap, 6, &problem};
    gsl_vector* x = gsl_vector_alloc(6);
    gsl_vector* step = gsl_vector_alloc(6);
    for (int i = 0; i < 6; ++i) {
        gsl_vector_set(x, i, start[i]);
        gsl_vector_set(step, i, 0.3);
    }
    gsl_multimin_fminimizer* s = gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, 6);
    gsl_multimin_fminimizer_set(s, &fn, x, step);
    for (int iter = 0; iter < 5000; ++iter) {
        if (gsl_multimin_fminimizer_iterate(s) != 0) {
            break;
        }
        if (gsl_multimin_test_size(gsl_multimin_fminimizer_size(s), 1e-10) == GSL_SUCCESS) {
            break;
        }
    }
    const double best = -gsl_multimin_fminimizer_minimum(s);
    gsl_multimin_fminimizer_free(s);
    gsl_vector_free(step);
    gsl_vector_free(x);
    return best;
}

double integrate_gsl(const std::function<double(double)>& f, double a, double b, bool upper_infinite)
{
    gsl_integration_workspace* w = gsl_integration_workspace_alloc(2000);
    auto trampoline = [](double t, void* p) { return (*static_cast<const std::function<double(double)>*>(p))(t); };
    gsl_function fn{trampoline, const_cast<std::function<double(double)>*>(&f)};
    double result = 0.0;
    double error = 0.0;
    if (upper_infinite) {
        gsl_integration_qagiu(&fn, a, 1e-14, 1e-12, 2000, w, &result, &error);
    } else {
        gsl_integration_qags(&fn, a, b, 1e-14, 1e-12, 2000, w, &result, &error);
    }
    gsl_integration_workspace_free(w);
    return result;
}

}  // namespace

Matrix2c euler_unitary(double a, double b, double c)
{
    const Complex i(0.0, 1.0);
    Matrix2c rz_a;
    rz_a << std::exp(-i * a / 2.0), 0.0, 0.0, std::exp(i * a / 2.0);
    Matrix2c ry_b;
    ry_b << std::cos(b / 2.0), -std::sin(b / 2.0), std::sin(b / 2.0), std::cos(b / 2.0);
    Matrix2c rz_c;
    rz_c << std::exp(-i * c / 2.0), 0.0, 0.0, std::exp(i * c / 2.0);
    return rz_a * ry_b * rz_c;
}

double maximally_entangled_overlap(const Matrix4c& rho, const double angles[6])
{
    const Matrix4c u = kron(euler_unitary(angles[0], angles[1], angles[2]),
                            euler_unitary(angles[3], angles[4], angles[5]));
    const Vector4c phi = u * phi_plus();
    return (phi.adjoint() * rho * phi)(0, 0).real();
}

double fef_bruteforce(const Matrix4c& rho, int grid_resolution)
{
    const int samples = grid_resolution * grid_resolution * grid_resolution * grid_resolution;
    constexpr int keep = 6;
    std::vector<std::pair<double, std::array<double, 6>>> best;
    gsl_qrng* q = gsl_qrng_alloc(gsl_qrng_sobol, 6);
    const double span[6] = {2 * std::numbers::pi, std::numbers::pi, 2 * std::numbers::pi,
                            2 * std::numbers::pi, std::numbers::pi, 2 * std::numbers::pi};
    for (int n = 0; n < samples; ++n) {
        double u[6];
        gsl_qrng_get(q, u);
        std::array<double, 6> a{};
        for (int i = 0; i < 6; ++i) {
            a[i] = u[i] * span[i];
        }
        const double value = maximally_entangled_overlap(rho, a.data());
        if (static_cast<int>(best.size()) < keep || value > best.back().first) {
            best.emplace_back(value, a);
            std::sort(best.begin(), best.end(), [](const auto& l, const auto& r) { return l.first > r.first; });
            if (static_cast<int>(best.size()) > keep) {
                best.pop_back();
            }
        }
    }
    gsl_qrng_free(q);
    double result = best.front().first;
    for (const auto& [value, start] : best) {
        result = std::max(result, nelder_mead(rho, start.data()));
    }
    return result;
}

Matrix4c werner(double p)
{
    const Vector4c phi = phi_plus();
    return p * (phi * phi.adjoint()) + (1.0 - p) * Matrix4c::Identity() / 4.0;
}

Matrix4c random_density_matrix(Rng& rng, int rank)
{
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::Matrix<Complex, 4, Eigen::Dynamic> g(4, rank);
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < rank; ++j) {
            g(i, j) = Complex(normal(rng), normal(rng));
        }
    }
    Matrix4c m = g * g.adjoint();
    m /= m.trace().real();
    return (m + m.adjoint()) / 2.0;
}

Matrix2c random_unitary(Rng& rng)
{
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix2c g;
    for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
            g(i, j) = Complex(normal(rng), normal(rng));
        }
    }
    Eigen::HouseholderQR<Matrix2c> qr(g);
    Matrix2c q = qr.householderQ();
    const Matrix2c r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int j = 0; j < 2; ++j) {
        const Complex d = r(j, j);
        q.col(j) *= d / std::abs(d);
    }
    return q;
}

Vector4c random_maximally_entangled(Rng& rng)
{
    return kron(random_unitary(rng), random_unitary(rng)) * phi_plus();
}

Vector4c schmidt_state(double a, Rng& rng)
{
    Vector4c v = Vector4c::Zero();
    v(0) = std::cos(a);
    v(3) = std::sin(a);
    return kron(random_unitary(rng), random_unitary(rng)) * v;
}

Matrix4c time_average_by_quadrature(double s_uev, double tau_x_ns, double k)
{
    const double w = s_uev / hbar;
    const std::function<double(double)> re = [&](double t) { return std::exp(-t / tau_x_ns) / tau_x_ns * std::cos(w * t); };
    const std::function<double(double)> im = [&](double t) { return std::exp(-t / tau_x_ns) / tau_x_ns * std::sin(w * t); };
    const Complex avg_phase(integrate_gsl(re, 0.0, 0.0, true), integrate_gsl(im, 0.0, 0.0, true));
    Matrix4c avg = Matrix4c::Zero();
    avg(0, 0) = 0.5;
    avg(3, 3) = 0.5;
    // |psi><psi| has (HH, VV) entry a_HH conj(a_VV) = e^{-i w t} / 2.
    avg(0, 3) = std::conj(avg_phase) / 2.0;
    avg(3, 0) = avg_phase / 2.0;
    return k * avg + (1.0 - k) * Matrix4c::Identity() / 4.0;
}

double integrate(const std::function<double(double)>& f, double a, double b)
{
    return integrate_gsl(f, a, b, false);
}

double hom_split_probability(double reflectivity, double overlap)
{
    const Complex t(std::sqrt(1.0 - reflectivity), 0.0);
    const Complex r(0.0, std::sqrt(reflectivity));
    // Photon a enters port 1, photon b port 2.  "Split" = one photon in each
    // exit port: both transmitted or both reflected.
    const Complex tt = t * t;
    const Complex rr = r * r;
    const double identical = std::norm(tt + rr);
    const double distinguishable = std::norm(tt) + std::norm(rr);
    return overlap * identical + (1.0 - overlap) * distinguishable;
}

double mean(const std::vector<double>& v)
{
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v)
{
    const double m = mean(v);
    double ss = 0.0;
    for (double x : v) {
        ss += (x - m) * (x - m);
    }
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace qdent::oracle
