#pragma once

// Independent reference computations used only by the tests.  None of these
// call the library routine they are meant to check.

#include <cstdint>
#include <functional>
#include <vector>

#include "qdent/quantum.hpp"
#include "qdent/random.hpp"

namespace qdent::oracle {

using quantum::Matrix2c;
using quantum::Matrix4c;
using quantum::Vector4c;

// Single-qubit unitary from three Euler angles: Rz(a) Ry(b) Rz(c).
Matrix2c euler_unitary(double a, double b, double c);

// <Phi|rho|Phi> for |Phi> = (U_A (x) U_B)|Phi+> with U_A, U_B from the six
// angles (a1, b1, c1, a2, b2, c2).
double maximally_entangled_overlap(const Matrix4c& rho, const double angles[6]);

// Maximises maximally_entangled_overlap over the six angles: a
// low-discrepancy sample of grid_resolution^4 points followed by
// Nelder-Mead refinement from the best starts.  Returns a lower bound on
// the fully entangled fraction.
double fef_bruteforce(const Matrix4c& rho, int grid_resolution = 8);

// p |Phi+><Phi+| + (1 - p) I/4
Matrix4c werner(double p);

// Random full-rank (or rank-limited) density matrix from a complex Ginibre
// matrix: G G^dagger / tr.
Matrix4c random_density_matrix(Rng& rng, int rank = 4);

// Haar-random 2x2 unitary via QR of a complex Gaussian matrix.
Matrix2c random_unitary(Rng& rng);

// Random maximally entangled state (U_A (x) U_B)|Phi+>.
Vector4c random_maximally_entangled(Rng& rng);

// cos(a)|HH> + sin(a)|VV> rotated by random local unitaries.
Vector4c schmidt_state(double a, Rng& rng);

// Numerical quadrature of int_0^inf (1/tau) e^{-t/tau} |psi(t)><psi(t)| dt
// with psi(t) = (|HH> + e^{i s t / hbar}|VV>)/sqrt2, mixed as
// k rho + (1 - k) I/4.
Matrix4c time_average_by_quadrature(double s_uev, double tau_x_ns, double k);

// Adaptive quadrature of f over [a, b].
double integrate(const std::function<double(double)>& f, double a, double b);

// Coincidence probability between the two exit ports for the interfering
// early-long / late-short photon pair at a beam splitter of reflectivity R,
// from the symmetrised two-photon amplitudes with overlap `overlap`.
double hom_split_probability(double reflectivity, double overlap);

// Sample standard deviation.
double sample_std(const std::vector<double>& v);
double mean(const std::vector<double>& v);

}  // namespace qdent::oracle
