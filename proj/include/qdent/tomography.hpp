#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "qdent/quantum.hpp"
#include "qdent/random.hpp"

namespace qdent::tomography {

// D = (H+V)/sqrt2, A = (H-V)/sqrt2, R = (H-iV)/sqrt2, L = (H+iV)/sqrt2.
enum class Pol : std::uint8_t { H, V, D, A, R, L };

char to_char(Pol p);
Pol pol_from_char(char c);  // throws DataError
Eigen::Vector2cd polarization_vector(Pol p);

struct BasisLabel {
    Pol arm_x = Pol::H;
    Pol arm_xx = Pol::H;

    auto operator<=>(const BasisLabel&) const = default;
    std::string str() const;
};

// All 36 (arm_x, arm_xx) combinations, H V D A R L order on each arm.
const std::array<BasisLabel, 36>& all_labels();

// |a><a| (x) |b><b|
quantum::Matrix4c projector(const BasisLabel& label);

struct CountEntry {
    std::uint64_t counts = 0;
    double acquisition_time_s = 1.0;
};

class CountTable {
public:
    void set(const BasisLabel& label, std::uint64_t counts, double acquisition_time_s = 1.0);
    bool contains(const BasisLabel& label) const { return entries_.count(label) != 0; }
    const CountEntry& at(const BasisLabel& label) const;
    std::size_t size() const { return entries_.size(); }
    bool complete() const { return entries_.size() == 36; }
    std::uint64_t total_counts() const;
    const std::map<BasisLabel, CountEntry>& entries() const { return entries_; }

private:
    std::map<BasisLabel, CountEntry> entries_;
};

// n(label) = pairs_per_group * <projector(label), rho>; each local-basis
// pair (e.g. {HH, HV, VH, VV}) sums to pairs_per_group.
std::map<BasisLabel, double> expected_counts(const quantum::DensityMatrix& rho, double pairs_per_group);

// Poisson-sampled counts with equal unit exposure.
CountTable sample_counts(const quantum::DensityMatrix& rho, double pairs_per_group, Rng& rng);

// Expected counts rounded to the nearest integer.
CountTable noiseless_counts(const quantum::DensityMatrix& rho, double pairs_per_group);

// Poisson log-likelihood with the overall pair rate profiled out, up to a
// rho-independent constant.
double log_likelihood(const CountTable& counts, const quantum::DensityMatrix& rho);

struct MleOptions {
    int max_iter = 20000;
    double tol = 1e-9;  // stop when successive log-likelihood change < tol
};

struct MetricErrors {
    double fef = 0.0;
    double concurrence = 0.0;
    double purity = 0.0;
    double fidelity_to_target = 0.0;
};

struct TomographyResult {
    quantum::DensityMatrix rho = quantum::DensityMatrix::maximally_mixed();
    quantum::MetricReport metrics;
    MetricErrors metric_errors;  // Monte Carlo standard deviations (zero until filled)
    int mc_runs = 0;
    int mc_failed = 0;
    double loglik = 0.0;
    int iterations = 0;
    bool converged = false;
    std::vector<std::string> warnings;
};

// Maximum-likelihood state from 36 coincidence counts using the R rho R
// fixed-point iteration, started from I/4, with diluted steps whenever a full
// step lowers the likelihood.
TomographyResult reconstruct_mle(const CountTable& counts, const MleOptions& options = {});

struct MonteCarloOptions {
    int runs = 2000;
    std::uint64_t seed = 0;
    unsigned workers = 1;
    MleOptions mle{20000, 1e-8};
};

struct MonteCarloErrors {
    MetricErrors sigma;
    int runs = 0;
    int failed = 0;
    std::vector<std::string> warnings;
};

// Resamples every count as Poisson(observed), reconstructs each resample and
// returns the per-metric standard deviation.  Each run draws from its own
// substream of the master seed, so results do not depend on `workers`.
MonteCarloErrors monte_carlo_errors(const CountTable& counts, const MonteCarloOptions& options);

// Columns: arm_x, arm_xx, counts, acquisition_time_s
void write_counts_csv(std::ostream& out, const CountTable& counts);
CountTable read_counts_csv(std::istream& in);

nlohmann::json to_json(const TomographyResult& result, const quantum::Metadata& metadata);

}  // namespace qdent::tomography
