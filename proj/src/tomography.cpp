#include "qdent/tomography.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>
#include <thread>

#include "qdent/error.hpp"
#include "qdent/io.hpp"

namespace qdent::tomography {

using quantum::Complex;
using quantum::DensityMatrix;
using quantum::Matrix4c;
using quantum::Vector4c;

namespace {

constexpr double probability_floor = 1e-300;

struct Setting {
    Vector4c v;  // projector = v v^dagger
    double n = 0.0;
    double t = 1.0;
};

std::vector<Setting> settings_of(const CountTable& counts)
{
    std::vector<Setting> out;
    out.reserve(counts.size());
    for (const auto& [label, entry] : counts.entries()) {
        const Eigen::Vector2cd a = polarization_vector(label.arm_x);
        const Eigen::Vector2cd b = polarization_vector(label.arm_xx);
        Setting s;
        s.v << a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1];
        s.n = static_cast<double>(entry.counts);
        s.t = entry.acquisition_time_s;
        out.push_back(s);
    }
    return out;
}

double probability(const Setting& s, const Matrix4c& rho)
{
    return std::max((s.v.adjoint() * rho * s.v)(0, 0).real(), probability_floor);
}

double profile_loglik(const std::vector<Setting>& settings, const Matrix4c& rho)
{
    double total = 0.0;
    double exposure = 0.0;
    double sum = 0.0;
    for (const auto& s : settings) {
        const double p = probability(s, rho);
        total += s.n;
        exposure += s.t * p;
        if (s.n > 0.0) {
            sum += s.n * std::log(s.t * p);
        }
    }
    if (total <= 0.0) {
        return 0.0;
    }
    return sum + total * std::log(total / exposure) - total;
}

Matrix4c normalized(const Matrix4c& m)
{
    Matrix4c h = 0.5 * (m + m.adjoint());
    return h / h.trace().real();
}

void check_reconstructable(const CountTable& counts)
{
    if (!counts.complete()) {
        throw DataError("tomography needs all 36 settings (got " + std::to_string(counts.size()) + ")");
    }
    if (counts.total_counts() == 0) {
        throw DataError("tomography: all counts are zero");
    }
}

double sample_std(const std::vector<double>& xs)
{
    if (xs.size() < 2) {
        return 0.0;
    }
    double mean = 0.0;
    for (double x : xs) {
        mean += x;
    }
    mean /= static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) {
        ss += (x - mean) * (x - mean);
    }
    return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

}  // namespace

char to_char(Pol p)
{
    static constexpr char names[] = {'H', 'V', 'D', 'A', 'R', 'L'};
    return names[static_cast<int>(p)];
}

Pol pol_from_char(char c)
{
    switch (c) {
    case 'H': return Pol::H;
    case 'V': return Pol::V;
    case 'D': return Pol::D;
    case 'A': return Pol::A;
    case 'R': return Pol::R;
    case 'L': return Pol::L;
    default: throw DataError(std::string("unknown polarization '") + c + "'");
    }
}

Eigen::Vector2cd polarization_vector(Pol p)
{
    const double a = 1.0 / std::numbers::sqrt2;
    const Complex i(0.0, 1.0);
    switch (p) {
    case Pol::H: return {1.0, 0.0};
    case Pol::V: return {0.0, 1.0};
    case Pol::D: return {a, a};
    case Pol::A: return {a, -a};
    case Pol::R: return {a, -i * a};
    case Pol::L: return {a, i * a};
    }
    return {1.0, 0.0};
}

std::string BasisLabel::str() const
{
    return std::string{to_char(arm_x), to_char(arm_xx)};
}

const std::array<BasisLabel, 36>& all_labels()
{
    static const std::array<BasisLabel, 36> labels = [] {
        std::array<BasisLabel, 36> out{};
        for (int a = 0; a < 6; ++a) {
            for (int b = 0; b < 6; ++b) {
                out[6 * a + b] = {static_cast<Pol>(a), static_cast<Pol>(b)};
            }
        }
        return out;
    }();
    return labels;
}

Matrix4c projector(const BasisLabel& label)
{
    const Eigen::Vector2cd a = polarization_vector(label.arm_x);
    const Eigen::Vector2cd b = polarization_vector(label.arm_xx);
    return quantum::kron(a * a.adjoint(), b * b.adjoint());
}

void CountTable::set(const BasisLabel& label, std::uint64_t counts, double acquisition_time_s)
{
    if (!(acquisition_time_s > 0.0) || !std::isfinite(acquisition_time_s)) {
        throw DataError("acquisition time for " + label.str() + " must be > 0");
    }
    entries_[label] = {counts, acquisition_time_s};
}

const CountEntry& CountTable::at(const BasisLabel& label) const
{
    const auto it = entries_.find(label);
    if (it == entries_.end()) {
        throw DataError("no counts for setting " + label.str());
    }
    return it->second;
}

std::uint64_t CountTable::total_counts() const
{
    std::uint64_t total = 0;
    for (const auto& [label, entry] : entries_) {
        total += entry.counts;
    }
    return total;
}

std::map<BasisLabel, double> expected_counts(const DensityMatrix& rho, double pairs_per_group)
{
    if (!(pairs_per_group > 0.0)) {
        throw ConfigError("expected_counts: pair number must be > 0");
    }
    std::map<BasisLabel, double> out;
    for (const auto& label : all_labels()) {
        out[label] = pairs_per_group * (projector(label) * rho.matrix()).trace().real();
    }
    return out;
}

CountTable sample_counts(const DensityMatrix& rho, double pairs_per_group, Rng& rng)
{
    CountTable table;
    for (const auto& [label, mean] : expected_counts(rho, pairs_per_group)) {
        table.set(label, sample_poisson(rng, std::max(mean, 0.0)));
    }
    return table;
}

CountTable noiseless_counts(const DensityMatrix& rho, double pairs_per_group)
{
    CountTable table;
    for (const auto& [label, mean] : expected_counts(rho, pairs_per_group)) {
        table.set(label, static_cast<std::uint64_t>(std::llround(std::max(mean, 0.0))));
    }
    return table;
}

double log_likelihood(const CountTable& counts, const DensityMatrix& rho)
{
    return profile_loglik(settings_of(counts), rho.matrix());
}

TomographyResult reconstruct_mle(const CountTable& counts, const MleOptions& options)
{
    check_reconstructable(counts);
    const std::vector<Setting> settings = settings_of(counts);

    Matrix4c exposure_op = Matrix4c::Zero();
    double total = 0.0;
    for (const auto& s : settings) {
        exposure_op += s.t * s.v * s.v.adjoint();
        total += s.n;
    }
    const Matrix4c exposure_inv = exposure_op.inverse();

    TomographyResult result;
    Matrix4c rho = Matrix4c::Identity() / 4.0;
    double ll = profile_loglik(settings, rho);

    int it = 0;
    for (; it < options.max_iter; ++it) {
        double expected = 0.0;
        Matrix4c r = Matrix4c::Zero();
        for (const auto& s : settings) {
            const double p = probability(s, rho);
            expected += s.t * p;
            if (s.n > 0.0) {
                r += (s.n / p) * s.v * s.v.adjoint();
            }
        }
        const double rate = total / expected;
        const Matrix4c step = exposure_inv * r / rate;

        // Full step first; dilute toward the identity map if it fails to help.
        double dilution = 1.0;
        Matrix4c next;
        double next_ll = -std::numeric_limits<double>::infinity();
        while (dilution >= 1e-6) {
            const Matrix4c a = Matrix4c::Identity() + dilution * (step - Matrix4c::Identity());
            next = normalized(a * rho * a.adjoint());
            next_ll = profile_loglik(settings, next);
            if (next_ll >= ll - 1e-12 * std::max(1.0, std::abs(ll))) {
                break;
            }
            dilution *= 0.5;
        }
        if (dilution < 1e-6) {
            // No step increases the likelihood: either converged to machine
            // precision or a genuine failure.
            const double change = std::abs(next_ll - ll);
            if (change < std::max(options.tol, 1e-9 * std::max(1.0, std::abs(ll)))) {
                result.converged = true;
                break;
            }
            throw NumericalError("tomography: likelihood failed to increase at iteration " +
                                 std::to_string(it) + " (log-likelihood " + io::format_double(ll) + ")");
        }
        const double change = next_ll - ll;
        rho = next;
        ll = next_ll;
        if (std::abs(change) < options.tol) {
            result.converged = true;
            ++it;
            break;
        }
    }
    result.iterations = it;
    if (!result.converged) {
        result.warnings.push_back("iteration cap of " + std::to_string(options.max_iter) +
                                  " reached before the log-likelihood converged");
    }
    result.rho = quantum::validate_density_matrix(normalized(rho));
    result.metrics = quantum::compute_metrics(result.rho);
    result.loglik = ll;
    return result;
}

MonteCarloErrors monte_carlo_errors(const CountTable& counts, const MonteCarloOptions& options)
{
    if (options.runs < 2) {
        throw ConfigError("monte carlo error estimation needs at least 2 runs");
    }
    check_reconstructable(counts);

    const int runs = options.runs;
    std::vector<quantum::MetricReport> metrics(runs);
    std::vector<char> ok(runs, 0);

    const auto work = [&](unsigned worker, unsigned workers) {
        for (int run = static_cast<int>(worker); run < runs; run += static_cast<int>(workers)) {
            Rng rng = make_rng(options.seed, static_cast<std::uint64_t>(run));
            CountTable resampled;
            for (const auto& [label, entry] : counts.entries()) {
                resampled.set(label, sample_poisson(rng, static_cast<double>(entry.counts)),
                              entry.acquisition_time_s);
            }
            try {
                const TomographyResult r = reconstruct_mle(resampled, options.mle);
                metrics[run] = r.metrics;
                ok[run] = 1;
            } catch (const Error&) {
                ok[run] = 0;
            }
        }
    };

    const unsigned workers = std::max(1u, options.workers);
    if (workers == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < workers; ++w) {
            pool.emplace_back(work, w, workers);
        }
        for (auto& t : pool) {
            t.join();
        }
    }

    std::vector<double> fef, conc, pur, fid;
    MonteCarloErrors out;
    out.runs = runs;
    for (int run = 0; run < runs; ++run) {
        if (!ok[run]) {
            ++out.failed;
            continue;
        }
        fef.push_back(metrics[run].fef);
        conc.push_back(metrics[run].concurrence);
        pur.push_back(metrics[run].purity);
        fid.push_back(metrics[run].fidelity_to_target);
    }
    if (fef.size() < 2) {
        throw NumericalError("monte carlo: fewer than 2 successful reconstructions");
    }
    out.sigma = {sample_std(fef), sample_std(conc), sample_std(pur), sample_std(fid)};
    if (runs < 100) {
        out.warnings.push_back("only " + std::to_string(runs) +
                               " Monte Carlo runs; standard deviations are poorly determined");
    }
    if (out.failed > 0) {
        out.warnings.push_back(std::to_string(out.failed) + " Monte Carlo runs failed to reconstruct");
    }
    return out;
}

void write_counts_csv(std::ostream& out, const CountTable& counts)
{
    out << "arm_x,arm_xx,counts,acquisition_time_s\n";
    for (const auto& [label, entry] : counts.entries()) {
        out << to_char(label.arm_x) << ',' << to_char(label.arm_xx) << ',' << entry.counts << ','
            << io::format_double(entry.acquisition_time_s) << '\n';
    }
}

CountTable read_counts_csv(std::istream& in)
{
    CountTable table;
    for (const auto& row : io::read_csv(in)) {
        const std::string where = "line " + std::to_string(row.line) + ": ";
        if (row.fields.size() < 3 || row.fields.size() > 4) {
            throw DataError(where + "expected 3 or 4 columns (arm_x, arm_xx, counts[, acquisition_time_s])");
        }
        if (row.fields[0].size() != 1 || row.fields[1].size() != 1) {
            throw DataError(where + "polarization labels must be one of H V D A R L");
        }
        BasisLabel label;
        try {
            label = {pol_from_char(row.fields[0][0]), pol_from_char(row.fields[1][0])};
        } catch (const DataError& e) {
            throw DataError(where + e.what());
        }
        const long long n = io::parse_integer(row.fields[2], row.line, "counts");
        if (n < 0) {
            throw DataError(where + "counts must be >= 0");
        }
        const double t = row.fields.size() == 4 ? io::parse_double(row.fields[3], row.line, "acquisition_time_s")
                                                : 1.0;
        if (table.contains(label)) {
            throw DataError(where + "duplicate setting " + label.str());
        }
        try {
            table.set(label, static_cast<std::uint64_t>(n), t);
        } catch (const DataError& e) {
            throw DataError(where + e.what());
        }
    }
    return table;
}

nlohmann::json to_json(const TomographyResult& result, const quantum::Metadata& metadata)
{
    nlohmann::json doc = quantum::to_json(result.rho, metadata);
    doc["metrics"] = quantum::to_json(result.metrics);
    doc["metric_errors"] = {{"kind", "monte_carlo_standard_deviation"},
                            {"fef", result.metric_errors.fef},
                            {"concurrence", result.metric_errors.concurrence},
                            {"purity", result.metric_errors.purity},
                            {"fidelity_to_target", result.metric_errors.fidelity_to_target}};
    doc["mc_runs"] = result.mc_runs;
    doc["mc_failed"] = result.mc_failed;
    doc["loglik"] = result.loglik;
    doc["iterations"] = result.iterations;
    doc["converged"] = result.converged;
    doc["warnings"] = result.warnings;
    return doc;
}

}  // namespace qdent::tomography
