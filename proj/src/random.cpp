#include "qdent/random.hpp"

namespace qdent {

Rng make_rng(std::uint64_t master_seed, std::uint64_t stream)
{
    std::seed_seq seq{
        static_cast<std::uint32_t>(master_seed & 0xffffffffu),
        static_cast<std::uint32_t>(master_seed >> 32),
        static_cast<std::uint32_t>(stream & 0xffffffffu),
        static_cast<std::uint32_t>(stream >> 32),
        0x51d3e7u};
    return Rng(seq);
}

std::uint64_t sample_poisson(Rng& rng, double mean)
{
    if (!(mean > 0.0)) {
        return 0;
    }
    std::poisson_distribution<std::uint64_t> dist(mean);
    return dist(rng);
}

double sample_exponential(Rng& rng, double mean)
{
    if (!(mean > 0.0)) {
        return 0.0;
    }
    std::exponential_distribution<double> dist(1.0 / mean);
    return dist(rng);
}

double sample_normal(Rng& rng, double sigma)
{
    if (!(sigma > 0.0)) {
        return 0.0;
    }
    std::normal_distribution<double> dist(0.0, sigma);
    return dist(rng);
}

double sample_uniform(Rng& rng)
{
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    return dist(rng);
}

}  // namespace qdent
