#pragma once

#include <numbers>

namespace qdent::constants {

// Reduced Planck constant in the units used throughout: ueV * ns.
inline constexpr double hbar_uev_ns = 0.6582119569;

inline constexpr double pi = std::numbers::pi;

// Gaussian FWHM = fwhm_per_sigma * sigma.
inline constexpr double fwhm_per_sigma = 2.3548200450309493;  // 2 sqrt(2 ln 2)

}  // namespace qdent::constants
