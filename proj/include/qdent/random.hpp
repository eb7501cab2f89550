#pragma once

#include <cstdint>
#include <random>

namespace qdent {

using Rng = std::mt19937_64;

// Independent generator for substream `stream` of a master seed. The same
// (master, stream) pair always yields the same sequence, so work split into
// substreams reproduces regardless of how the substreams are scheduled.
Rng make_rng(std::uint64_t master_seed, std::uint64_t stream = 0);

// Poisson draw that accepts mean == 0.
std::uint64_t sample_poisson(Rng& rng, double mean);

double sample_exponential(Rng& rng, double mean);

double sample_normal(Rng& rng, double sigma);

double sample_uniform(Rng& rng);

}  // namespace qdent
