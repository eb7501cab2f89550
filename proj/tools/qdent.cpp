// qdent: command-line pipelines over the qdent library.  Every subcommand
// reads its physical parameters from a JSON config, writes CSV/JSON
// artifacts into the output directory and finishes with manifest.json.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "qdent/cascade.hpp"
#include "qdent/correlation.hpp"
#include "qdent/error.hpp"
#include "qdent/io.hpp"
#include "qdent/lifetime.hpp"
#include "qdent/photon_stream.hpp"
#include "qdent/positioning.hpp"
#include "qdent/quantum.hpp"
#include "qdent/random.hpp"
#include "qdent/strain.hpp"
#include "qdent/tomography.hpp"
#include "run_context.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qdent;

namespace {

enum ExitCode : int {
    exit_ok = 0,
    exit_internal = 1,
    exit_config = 2,
    exit_data = 3,
    exit_numerical = 4,
};

struct Options {
    std::string config;
    std::uint64_t seed = 1;
    std::string out;
    int runs = -1;          // -1: take from config or command default
    double duration = -1.0; // seconds; -1: take from config
    std::string grid;
    bool grid_given = false;
    unsigned workers = 0;   // 0: hardware concurrency

    // command-specific inputs
    std::string counts;
    std::string stream;
    std::string trace;
    std::string scan;
    std::string image;
    std::string truth;
    std::string action;
    bool csv = false;
};

unsigned worker_count(const Options& o)
{
    if (o.workers > 0) {
        return o.workers;
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

fs::path output_dir(const Options& o, const std::string& command)
{
    if (!o.out.empty()) {
        return o.out;
    }
    if (const char* env = std::getenv("QDENT_OUT_DIR"); env != nullptr && *env != '\0') {
        return fs::path(env) / command;
    }
    return fs::path("qdent-out") / command;
}

cli::Config config_for(const Options& o, bool required)
{
    if (o.config.empty()) {
        if (required) {
            throw ConfigError("--config is required");
        }
        return {};
    }
    return cli::load_config(o.config);
}

template <typename T>
T get_or(const json& doc, const std::string& key, T fallback)
{
    try {
        return doc.value(key, fallback);
    } catch (const json::exception& e) {
        throw ConfigError("config key '" + key + "': " + e.what());
    }
}

// Runs body(i) for i in [0, n) on `workers` threads.  Each index writes its
// own result slot, so outputs do not depend on scheduling.
void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& body)
{
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            body(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < std::min<std::size_t>(workers, n); ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    body(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    for (const auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

std::string read_input(cli::RunContext& ctx, const std::string& path)
{
    std::string text = io::read_text_file(path);
    ctx.add_input(path, text);
    return text;
}

double mean_of(const std::vector<double>& v)
{
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v)
{
    if (v.size() < 2) {
        return 0.0;
    }
    const double m = mean_of(v);
    double ss = 0.0;
    for (double x : v) {
        ss += (x - m) * (x - m);
    }
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

// ---------------------------------------------------------------- cascade

struct CascadeSetup {
    cascade::CascadeParams params;
    double g2_x = 0.0;
    double g2_xx = 0.0;
    double pairs_per_group = 1e4;
    std::string name;
};

CascadeSetup cascade_setup(const cli::Config& config)
{
    CascadeSetup setup;
    try {
        setup.params = cascade::params_from_json(config.section("cascade"));
        const json& g2 = config.section("g2");
        setup.g2_x = g2.value("x", 0.0);
        setup.g2_xx = g2.value("xx", 0.0);
        setup.pairs_per_group = config.section("tomography").value("pairs_per_group", setup.pairs_per_group);
        setup.name = config.doc.value("name", std::string());
    } catch (const json::exception& e) {
        throw ConfigError(std::string("cascade config: ") + e.what());
    }
    setup.params.validate();
    if (!(setup.pairs_per_group > 0.0)) {
        throw ConfigError("tomography.pairs_per_group must be positive");
    }
    return setup;
}

quantum::Metadata metadata_for(const std::string& source, const std::string& command)
{
    quantum::Metadata m;
    m.source = source;
    m.timestamp = cli::reproducible_timestamp();
    m.provenance = {"qdent " + command};
    return m;
}

void cmd_fef_curve(cli::RunContext& ctx, const Options& o)
{
    const CascadeSetup setup = cascade_setup(ctx.config());
    std::vector<double> grid;
    if (o.grid_given) {
        grid = cli::parse_grid(o.grid);
    } else if (ctx.config().section("fef_curve").contains("grid")) {
        grid = cli::grid_from_json(ctx.config().section("fef_curve").at("grid"));
    }
    if (grid.empty()) {
        throw ConfigError("fef-curve needs a non-empty FSS grid (--grid start:stop:step)");
    }
    for (double s : grid) {
        if (!(s >= 0.0)) {
            throw ConfigError("FSS grid values must be non-negative");
        }
    }
    const int runs = o.runs >= 0 ? o.runs : get_or(ctx.config().section("fef_curve"), "mc_runs", 0);
    ctx.set_parameter("grid", grid);
    ctx.set_parameter("mc_runs", runs);

    struct Row {
        double analytic_raw, analytic_corrected, tomo_raw, tomo_corrected, tomo_raw_err;
    };
    std::vector<Row> rows(grid.size());
    const unsigned workers = worker_count(o);
    parallel_for(grid.size(), runs > 0 ? 1 : workers, [&](std::size_t i) {
        cascade::CascadeParams p = setup.params;
        p.s_uev = grid[i];
        const quantum::DensityMatrix rho = cascade::time_averaged_density_matrix(p);
        Row row{};
        row.analytic_raw = cascade::fef_analytic(p);
        row.analytic_corrected = quantum::fully_entangled_fraction(
            cascade::g2_correct_density_matrix(rho, setup.g2_x, setup.g2_xx).rho);
        Rng rng = make_rng(ctx.seed(), 2 * i);
        const tomography::CountTable counts = tomography::sample_counts(rho, setup.pairs_per_group, rng);
        const tomography::TomographyResult mle = tomography::reconstruct_mle(counts);
        row.tomo_raw = mle.metrics.fef;
        row.tomo_corrected = quantum::fully_entangled_fraction(
            cascade::g2_correct_density_matrix(mle.rho, setup.g2_x, setup.g2_xx).rho);
        if (runs > 0) {
            tomography::MonteCarloOptions mc;
            mc.runs = runs;
            mc.seed = cli::derive_seed(ctx.seed(), 2 * i + 1);
            mc.workers = workers;
            row.tomo_raw_err = tomography::monte_carlo_errors(counts, mc).sigma.fef;
        }
        rows[i] = row;
    });

    std::ostringstream csv;
    csv << "s_ueV,fef_analytic_raw,fef_analytic_corrected,fef_tomography_raw,fef_tomography_corrected";
    csv << (runs > 0 ? ",fef_tomography_raw_err\n" : "\n");
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const Row& r = rows[i];
        csv << io::format_double(grid[i]) << ',' << io::format_double(r.analytic_raw) << ','
            << io::format_double(r.analytic_corrected) << ',' << io::format_double(r.tomo_raw) << ','
            << io::format_double(r.tomo_corrected);
        if (runs > 0) {
            csv << ',' << io::format_double(r.tomo_raw_err);
        }
        csv << '\n';
    }
    ctx.write_output("fef_curve.csv", csv.str());

    json families = json::array();
    for (const char* name : {"analytic_raw", "analytic_corrected", "tomography_raw", "tomography_corrected"}) {
        families.push_back(std::string("fef_") + name);
    }
    ctx.write_json("fef_curve.json", {{"name", setup.name},
                                      {"cascade", cascade::to_json(setup.params)},
                                      {"epsilon", setup.g2_x + setup.g2_xx},
                                      {"pairs_per_group", setup.pairs_per_group},
                                      {"families", families},
                                      {"fef_at_first_grid_point",
                                       {{"analytic_raw", rows.front().analytic_raw},
                                        {"analytic_corrected", rows.front().analytic_corrected},
                                        {"tomography_raw", rows.front().tomo_raw},
                                        {"tomography_corrected", rows.front().tomo_corrected}}},
                                      {"run", ctx.echo()}});
    std::cout << "fef-curve: " << grid.size() << " points, FEF(s=" << grid.front()
              << ") analytic raw " << rows.front().analytic_raw << "\n";
}

void cmd_tomography(cli::RunContext& ctx, const Options& o)
{
    tomography::CountTable counts;
    std::string source;
    std::optional<CascadeSetup> setup;
    if (ctx.config().loaded) {
        setup = cascade_setup(ctx.config());
    }
    if (!o.counts.empty()) {
        std::istringstream in(read_input(ctx, o.counts));
        counts = tomography::read_counts_csv(in);
        source = o.counts;
    } else {
        if (!setup) {
            throw ConfigError("tomography needs --counts or a --config with a cascade section");
        }
        cascade::CascadeParams p = setup->params;
        p.s_uev = get_or(ctx.config().section("tomography"), "fss_ueV", p.s_uev);
        p.validate();
        const quantum::DensityMatrix rho = cascade::time_averaged_density_matrix(p);
        Rng rng = make_rng(ctx.seed(), 0);
        counts = tomography::sample_counts(rho, setup->pairs_per_group, rng);
        std::ostringstream csv;
        tomography::write_counts_csv(csv, counts);
        ctx.write_output("counts.csv", csv.str());
        source = "synthetic:" + (setup->name.empty() ? std::string("cascade") : setup->name);
        ctx.set_parameter("fss_ueV", p.s_uev);
        ctx.set_parameter("pairs_per_group", setup->pairs_per_group);
    }
    const int runs =
        o.runs >= 0 ? o.runs : get_or(ctx.config().section("tomography"), "mc_runs", 1000);
    ctx.set_parameter("mc_runs", runs);

    tomography::TomographyResult result = tomography::reconstruct_mle(counts);
    if (runs > 0) {
        tomography::MonteCarloOptions mc;
        mc.runs = runs;
        mc.seed = cli::derive_seed(ctx.seed(), 1);
        mc.workers = worker_count(o);
        const tomography::MonteCarloErrors errors = tomography::monte_carlo_errors(counts, mc);
        result.metric_errors = errors.sigma;
        result.mc_runs = errors.runs;
        result.mc_failed = errors.failed;
        result.warnings.insert(result.warnings.end(), errors.warnings.begin(), errors.warnings.end());
    }
    json doc = tomography::to_json(result, metadata_for(source, "tomography"));
    if (setup && setup->g2_x + setup->g2_xx > 0.0) {
        const cascade::G2Correction corrected =
            cascade::g2_correct_density_matrix(result.rho, setup->g2_x, setup->g2_xx);
        doc["g2_corrected"] = {{"epsilon", corrected.epsilon},
                               {"projected", corrected.projected},
                               {"metrics", quantum::to_json(quantum::compute_metrics(corrected.rho))}};
    }
    doc["run"] = ctx.echo();
    ctx.write_json("tomography.json", doc);
    std::cout << "tomography: FEF " << result.metrics.fef << " +- " << result.metric_errors.fef
              << ", concurrence " << result.metrics.concurrence << "\n";
}

// ---------------------------------------------------------------- photons

struct StreamSetup {
    photon::SourceConfig source;
    std::vector<photon::DetectorConfig> detectors;
    double duration_s = 0.0;
};

StreamSetup stream_setup(const cli::Config& config, const Options& o, const char* section)
{
    StreamSetup s;
    const json& doc = config.section(section);
    try {
        s.source = photon::source_from_json(doc.contains("source") ? doc.at("source") : config.section("source"));
        const json& dets = doc.contains("detectors") ? doc.at("detectors") : config.section("detectors");
        if (dets.is_array()) {
            for (const auto& d : dets) {
                s.detectors.push_back(photon::detector_from_json(d));
            }
        }
        s.duration_s = doc.value("duration_s", 0.0);
    } catch (const json::exception& e) {
        throw ConfigError(std::string(section) + " config: " + e.what());
    }
    if (o.duration >= 0.0) {
        s.duration_s = o.duration;
    }
    if (!(s.duration_s > 0.0)) {
        throw ConfigError("stream duration must be positive (--duration or duration_s)");
    }
    return s;
}

json stats_to_json(const photon::EventStream& stream)
{
    const photon::StreamStats& st = stream.stats;
    return {{"pulses", st.pulses},
            {"bright_pulses", st.bright_pulses},
            {"emitted_cascades", st.emitted_cascades},
            {"multiphoton_cascades", st.multiphoton_cascades},
            {"extracted_photons", st.extracted_photons},
            {"detected", st.detected},
            {"registered", st.registered},
            {"events", stream.events.size()},
            {"channel_count", stream.channel_count},
            {"rep_period_ns", stream.rep_period_ns},
            {"duration_ns", stream.duration_ns}};
}

void cmd_stream(cli::RunContext& ctx, const Options& o)
{
    const StreamSetup s = stream_setup(ctx.config(), o, "stream");
    if (s.detectors.empty()) {
        throw ConfigError("stream config needs at least one detector");
    }
    ctx.set_parameter("duration_s", s.duration_s);
    const photon::EventStream stream =
        photon::simulate_stream(s.source, s.detectors, s.duration_s, ctx.seed(), worker_count(o));
    std::ostringstream bin;
    photon::write_stream_binary(bin, stream);
    ctx.write_output("stream.bin", bin.str());
    if (o.csv) {
        std::ostringstream csv;
        photon::write_stream_csv(csv, stream);
        ctx.write_output("stream.csv", csv.str());
    }
    json dets = json::array();
    for (const auto& d : s.detectors) {
        dets.push_back(photon::to_json(d));
    }
    ctx.write_json("stream_summary.json", {{"source", photon::to_json(s.source)},
                                           {"detectors", dets},
                                           {"stats", stats_to_json(stream)},
                                           {"run", ctx.echo()}});
    std::cout << "stream: " << stream.events.size() << " events over " << s.duration_s << " s\n";
}

photon::EventStream load_stream(cli::RunContext& ctx, const std::string& path)
{
    const std::string bytes = read_input(ctx, path);
    std::istringstream in(bytes);
    if (fs::path(path).extension() == ".csv") {
        return photon::read_stream_csv(in);
    }
    return photon::read_stream_binary(in);
}

void cmd_hbt(cli::RunContext& ctx, const Options& o)
{
    const json& cfg = ctx.config().section("hbt");
    const double bin_width = get_or(cfg, "bin_width_ns", 0.05);
    const double window = get_or(cfg, "window_ns", 60.0);
    const int channel_a = get_or(cfg, "channel_a", 0);
    const int channel_b = get_or(cfg, "channel_b", 1);
    if (channel_a < 0 || channel_b < 0 || channel_a > 255 || channel_b > 255) {
        throw ConfigError("hbt channels must lie in [0, 255]");
    }
    photon::EventStream stream;
    std::optional<double> expected;
    if (!o.stream.empty()) {
        stream = load_stream(ctx, o.stream);
    } else {
        if (!ctx.config().loaded) {
            throw ConfigError("hbt needs --stream or --config");
        }
        const StreamSetup s = stream_setup(ctx.config(), o, "hbt");
        if (s.detectors.size() < 2) {
            throw ConfigError("hbt config needs two detectors");
        }
        ctx.set_parameter("duration_s", s.duration_s);
        stream = photon::simulate_stream(s.source, s.detectors, s.duration_s, ctx.seed(), worker_count(o));
        expected = photon::expected_g2_zero(s.source);
    }
    const photon::CorrelationHistogram hist =
        photon::hbt_histogram(stream, bin_width, window, static_cast<std::uint8_t>(channel_a),
                              static_cast<std::uint8_t>(channel_b));
    const photon::G2Result g2 = photon::g2_zero(hist, stream.rep_period_ns);
    std::ostringstream csv;
    photon::write_histogram_csv(csv, hist);
    ctx.write_output("hbt_histogram.csv", csv.str());
    json doc = {{"g2", photon::to_json(g2)},
                {"rep_period_ns", stream.rep_period_ns},
                {"bin_width_ns", bin_width},
                {"window_ns", window},
                {"stats", stats_to_json(stream)},
                {"run", ctx.echo()}};
    if (expected) {
        doc["expected_g2"] = *expected;
        doc["deviation_sigma"] = g2.g2_err > 0.0 ? (g2.g2 - *expected) / g2.g2_err : 0.0;
    }
    ctx.write_json("hbt.json", doc);
    std::cout << "hbt: g2(0) = " << g2.g2 << " +- " << g2.g2_err << "\n";
}

void cmd_hom(cli::RunContext& ctx, const Options& o)
{
    const json& cfg = ctx.config().section("hom");
    photon::HomConfig hom;
    try {
        hom = photon::hom_from_json(cfg);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("hom config: ") + e.what());
    }
    hom.validate();
    photon::EventStream photons;
    std::optional<photon::SourceConfig> source;
    if (!o.stream.empty()) {
        photons = load_stream(ctx, o.stream);
    } else {
        if (!ctx.config().loaded) {
            throw ConfigError("hom needs --stream or --config");
        }
        StreamSetup s = stream_setup(ctx.config(), o, "hom");
        if (s.detectors.empty()) {
            // Ideal photon tags: the exit-port detectors apply the losses.
            photon::DetectorConfig ideal;
            ideal.efficiency = 1.0;
            ideal.jitter_fwhm_ns = 0.0;
            s.detectors.push_back(ideal);
        }
        ctx.set_parameter("duration_s", s.duration_s);
        photons = photon::simulate_stream(s.source, s.detectors, s.duration_s, ctx.seed(), worker_count(o));
        source = s.source;
    }
    photon::HomConfig co = hom;
    co.copolarized = true;
    photon::HomConfig cross = hom;
    cross.copolarized = false;
    const photon::CorrelationHistogram h_co = photon::hom_simulate(photons, co, cli::derive_seed(ctx.seed(), 1));
    const photon::CorrelationHistogram h_cross =
        photon::hom_simulate(photons, cross, cli::derive_seed(ctx.seed(), 2));
    const photon::VisibilityResult v = photon::hom_visibility(h_co, h_cross, hom.delay_ns);

    double g2 = 0.0;
    if (cfg.contains("g2")) {
        g2 = get_or(cfg, "g2", 0.0);
    } else if (source) {
        g2 = photon::expected_g2_zero(*source);
    }
    const double m = photon::indistinguishability_from_hom(v.v, g2, hom.bs_reflectivity, hom.interferometer_visibility);

    std::ostringstream co_csv;
    photon::write_histogram_csv(co_csv, h_co);
    ctx.write_output("hom_co.csv", co_csv.str());
    std::ostringstream cross_csv;
    photon::write_histogram_csv(cross_csv, h_cross);
    ctx.write_output("hom_cross.csv", cross_csv.str());

    json doc = {{"visibility", photon::to_json(v)},
                {"g2_used", g2},
                {"indistinguishability", m},
                {"expected_visibility_without_multiphoton",
                 photon::expected_hom_visibility(hom.indistinguishability, hom.bs_reflectivity,
                                                 hom.interferometer_visibility)},
                {"run", ctx.echo()}};
    if (source) {
        doc["upper_bound"] = photon::hom_upper_bound(source->tau_x_ns, source->tau_xx_ns);
    }
    ctx.write_json("hom.json", doc);
    std::cout << "hom: V = " << v.v << " +- " << v.v_err << ", M = " << m << "\n";
}

// ---------------------------------------------------------------- lifetime

lifetime::SynthesisOptions synthesis_from_json(const json& doc)
{
    lifetime::SynthesisOptions s;
    try {
        if (doc.contains("model")) {
            s.model = lifetime::model_from_name(doc.at("model").get<std::string>());
        }
        s.tau_ns = doc.value("tau_ns", s.tau_ns);
        s.rise_tau_ns = doc.value("rise_tau_ns", s.rise_tau_ns);
        s.irf_fwhm_ns = doc.value("irf_fwhm_ns", s.irf_fwhm_ns);
        s.total_counts = doc.value("total_counts", s.total_counts);
        s.background_per_bin = doc.value("background_per_bin", s.background_per_bin);
        s.t0_ns = doc.value("t0_ns", s.t0_ns);
        s.bin_width_ns = doc.value("bin_width_ns", s.bin_width_ns);
        s.start_ns = doc.value("start_ns", s.start_ns);
        if (doc.contains("stop_ns")) {
            s.stop_ns = doc.at("stop_ns").get<double>();
        }
        s.noiseless = doc.value("noiseless", s.noiseless);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("lifetime.synthesis: ") + e.what());
    }
    return s;
}

void cmd_lifetime(cli::RunContext& ctx, const Options& o)
{
    const json& cfg = ctx.config().section("lifetime");
    const json fit_cfg = cfg.contains("fit") ? cfg.at("fit") : json::object();
    lifetime::Model model = lifetime::Model::single_exp;
    std::optional<double> rise;
    lifetime::FitOptions fit_options;
    try {
        if (fit_cfg.contains("model")) {
            model = lifetime::model_from_name(fit_cfg.at("model").get<std::string>());
        }
        if (fit_cfg.contains("rise_tau_ns")) {
            rise = fit_cfg.at("rise_tau_ns").get<double>();
        }
        fit_options.confidence_intervals = fit_cfg.value("confidence_intervals", true);
        fit_options.ci_fraction = fit_cfg.value("ci_fraction", fit_options.ci_fraction);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("lifetime.fit: ") + e.what());
    }

    if (!o.trace.empty()) {
        std::istringstream in(read_input(ctx, o.trace));
        lifetime::DecayTrace trace = lifetime::read_trace_csv(in);
        if (trace.irf.empty()) {
            const double fwhm = get_or(cfg.contains("irf") ? cfg.at("irf") : json::object(), "fwhm_ns", -1.0);
            if (!(fwhm >= 0.0)) {
                throw ConfigError("trace has no irf column; set lifetime.irf.fwhm_ns");
            }
            trace.irf = lifetime::gaussian_irf(trace.bin_centers, fwhm);
        }
        const lifetime::DecayFitResult r = lifetime::fit_decay(trace, model, rise, fit_options);
        json doc = lifetime::to_json(r);
        doc["run"] = ctx.echo();
        ctx.write_json("lifetime_fit.json", doc);
        std::cout << "lifetime: tau = " << r.tau_ns << " ns\n";
        return;
    }

    if (!cfg.contains("synthesis")) {
        throw ConfigError("lifetime needs --trace or lifetime.synthesis in the config");
    }
    const lifetime::SynthesisOptions synth = synthesis_from_json(cfg.at("synthesis"));
    const int runs = o.runs >= 0 ? o.runs : get_or(cfg, "runs", 1);
    if (runs < 1) {
        throw ConfigError("--runs must be at least 1");
    }
    ctx.set_parameter("runs", runs);

    if (runs == 1) {
        const lifetime::DecayTrace trace = lifetime::synthesize_trace(synth, ctx.seed());
        std::ostringstream csv;
        lifetime::write_trace_csv(csv, trace);
        ctx.write_output("trace.csv", csv.str());
        const lifetime::DecayFitResult r = lifetime::fit_decay(trace, model, rise, fit_options);
        json doc = lifetime::to_json(r);
        doc["true_tau_ns"] = synth.tau_ns;
        doc["run"] = ctx.echo();
        ctx.write_json("lifetime_fit.json", doc);
        std::cout << "lifetime: tau = " << r.tau_ns << " ns (true " << synth.tau_ns << ")\n";
        return;
    }

    const double tolerance = get_or(cfg, "tolerance_ns", 0.002);
    lifetime::FitOptions batch = fit_options;
    batch.confidence_intervals = false;
    struct RunResult {
        std::uint64_t seed = 0;
        double tau = 0.0, tau_err = 0.0, chi2 = 0.0;
        bool converged = false;
        std::string error;
    };
    std::vector<RunResult> results(static_cast<std::size_t>(runs));
    parallel_for(results.size(), worker_count(o), [&](std::size_t i) {
        RunResult& r = results[i];
        r.seed = cli::derive_seed(ctx.seed(), i);
        try {
            const lifetime::DecayFitResult f =
                lifetime::fit_decay(lifetime::synthesize_trace(synth, r.seed), model, rise, batch);
            r.tau = f.tau_ns;
            r.tau_err = f.tau_err_ns;
            r.chi2 = f.chi2;
            r.converged = f.converged;
        } catch (const NumericalError& e) {
            r.error = e.what();
        }
    });
    std::ostringstream csv;
    csv << "run,seed,tau_ns,tau_err_ns,chi2,converged\n";
    std::vector<double> taus;
    int outliers = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
        const RunResult& r = results[i];
        csv << i << ',' << r.seed << ',' << io::format_double(r.tau) << ',' << io::format_double(r.tau_err) << ','
            << io::format_double(r.chi2) << ',' << (r.converged ? 1 : 0) << '\n';
        if (!r.converged || std::abs(r.tau - synth.tau_ns) > tolerance) {
            ++outliers;
        }
        if (r.converged) {
            taus.push_back(r.tau);
        }
    }
    ctx.write_output("lifetime_runs.csv", csv.str());
    const double outlier_fraction = static_cast<double>(outliers) / static_cast<double>(runs);
    ctx.write_json("lifetime_summary.json", {{"runs", runs},
                                             {"model", lifetime::model_name(model)},
                                             {"true_tau_ns", synth.tau_ns},
                                             {"tolerance_ns", tolerance},
                                             {"mean_tau_ns", mean_of(taus)},
                                             {"std_tau_ns", std_of(taus)},
                                             {"converged", taus.size()},
                                             {"outliers", outliers},
                                             {"outlier_fraction", outlier_fraction},
                                             {"run", ctx.echo()}});
    std::cout << "lifetime: " << runs << " runs, mean tau " << mean_of(taus) << " ns, outliers " << outliers
              << "\n";
}

// ---------------------------------------------------------------- strain

void cmd_strain(cli::RunContext& ctx, const Options& o)
{
    const std::string& action = o.action;
    strain::StrainModel model;
    if (action != "extract") {
        if (!ctx.config().loaded) {
            throw ConfigError("strain " + action + " needs --config");
        }
        model = strain::model_from_json(ctx.config().section("model"));
    }
    if (action == "find-null") {
        const strain::FieldSetting f = strain::find_null(model);
        const strain::Fss at = strain::fss_vector(model, f);
        ctx.write_json("null.json",
                       {{"e14_kV_cm", f.e14},
                        {"e25_kV_cm", f.e25},
                        {"v14_V", strain::field_to_voltage(f.e14, model.plate_thickness_um)},
                        {"v25_V", strain::field_to_voltage(f.e25, model.plate_thickness_um)},
                        {"within_limit", f.within(model.field_limit_kv_cm)},
                        {"residual_s_ueV", at.s},
                        {"energy_eV", strain::energy_at(model, f)},
                        {"condition_number", model.condition_number()},
                        {"run", ctx.echo()}});
        std::cout << "strain find-null: E14 = " << f.e14 << " kV/cm, E25 = " << f.e25 << " kV/cm\n";
        return;
    }
    if (action == "sweep") {
        const json& cfg = ctx.config().section("sweep");
        std::vector<double> e14, e25;
        if (o.grid_given) {
            e14 = e25 = cli::parse_grid(o.grid);
        } else {
            if (cfg.contains("e14")) {
                e14 = cli::grid_from_json(cfg.at("e14"));
            }
            if (cfg.contains("e25")) {
                e25 = cli::grid_from_json(cfg.at("e25"));
            }
        }
        const std::vector<strain::SweepPoint> sweep = strain::sweep_fss(model, e14, e25);
        std::ostringstream csv;
        strain::write_sweep_csv(csv, sweep);
        ctx.write_output("sweep.csv", csv.str());
        const auto best = std::min_element(sweep.begin(), sweep.end(),
                                           [](const auto& a, const auto& b) { return a.s < b.s; });
        ctx.write_json("sweep.json", {{"points", sweep.size()},
                                      {"grid_minimum", {{"e14_kV_cm", best->e14}, {"e25_kV_cm", best->e25},
                                                        {"s_ueV", best->s}}},
                                      {"run", ctx.echo()}});
        std::cout << "strain sweep: " << sweep.size() << " points, minimum s " << best->s << " ueV\n";
        return;
    }
    if (action == "scan") {
        const json& cfg = ctx.config().section("scan");
        double s = 0.0, phi = 0.0, noise = 0.0, mean = 0.0;
        int n = 0;
        try {
            s = cfg.at("s_ueV").get<double>();
            phi = cfg.value("phi_rad", 0.0);
            noise = cfg.value("noise_ueV", 0.0);
            n = cfg.value("n_angles", 36);
            mean = cfg.value("mean_ueV", 0.0);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("strain.scan: ") + e.what());
        }
        const int runs = o.runs >= 0 ? o.runs : get_or(cfg, "runs", 1);
        if (runs < 1) {
            throw ConfigError("--runs must be at least 1");
        }
        ctx.set_parameter("runs", runs);
        if (runs == 1) {
            const auto scan = strain::synthesize_polarization_scan(s, phi, noise, n, ctx.seed(), mean);
            std::ostringstream csv;
            strain::write_scan_csv(csv, scan);
            ctx.write_output("scan.csv", csv.str());
            const strain::FssEstimate est = strain::extract_fss(scan);
            ctx.write_json("fss_estimate.json", {{"s_ueV", est.s},
                                                 {"s_err_ueV", est.s_err},
                                                 {"phi_rad", est.phi},
                                                 {"phi_err_rad", est.phi_err},
                                                 {"mean_ueV", est.mean},
                                                 {"residual_rms_ueV", est.residual_rms},
                                                 {"null_bias_ueV", est.null_bias},
                                                 {"true_s_ueV", s},
                                                 {"run", ctx.echo()}});
            std::cout << "strain scan: s = " << est.s << " +- " << est.s_err << " ueV\n";
            return;
        }
        const double tolerance = get_or(cfg, "tolerance_ueV", 0.2);
        std::vector<double> estimates;
        std::ostringstream csv;
        csv << "run,seed,s_ueV,phi_rad\n";
        int within = 0;
        for (int r = 0; r < runs; ++r) {
            const std::uint64_t seed = cli::derive_seed(ctx.seed(), static_cast<std::uint64_t>(r));
            const strain::FssEstimate est =
                strain::extract_fss(strain::synthesize_polarization_scan(s, phi, noise, n, seed, mean));
            estimates.push_back(est.s);
            within += std::abs(est.s - s) <= tolerance ? 1 : 0;
            csv << r << ',' << seed << ',' << io::format_double(est.s) << ',' << io::format_double(est.phi) << '\n';
        }
        ctx.write_output("scan_runs.csv", csv.str());
        double max_error = 0.0;
        for (double e : estimates) {
            max_error = std::max(max_error, std::abs(e - s));
        }
        ctx.write_json("scan_summary.json", {{"runs", runs},
                                             {"true_s_ueV", s},
                                             {"noise_ueV", noise},
                                             {"mean_s_ueV", mean_of(estimates)},
                                             {"std_s_ueV", std_of(estimates)},
                                             {"max_abs_error_ueV", max_error},
                                             {"tolerance_ueV", tolerance},
                                             {"fraction_within_tolerance",
                                              static_cast<double>(within) / static_cast<double>(runs)},
                                             {"run", ctx.echo()}});
        std::cout << "strain scan: " << runs << " runs, mean s " << mean_of(estimates) << " ueV\n";
        return;
    }
    if (action == "extract") {
        if (o.scan.empty()) {
            throw ConfigError("strain extract needs --scan");
        }
        std::istringstream in(read_input(ctx, o.scan));
        const strain::FssEstimate est = strain::extract_fss(strain::read_scan_csv(in));
        ctx.write_json("fss_estimate.json", {{"s_ueV", est.s},
                                             {"s_err_ueV", est.s_err},
                                             {"phi_rad", est.phi},
                                             {"phi_err_rad", est.phi_err},
                                             {"mean_ueV", est.mean},
                                             {"residual_rms_ueV", est.residual_rms},
                                             {"null_bias_ueV", est.null_bias},
                                             {"run", ctx.echo()}});
        std::cout << "strain extract: s = " << est.s << " +- " << est.s_err << " ueV\n";
        return;
    }
    throw ConfigError("unknown strain action '" + action + "' (find-null, sweep, scan, extract)");
}

// ---------------------------------------------------------------- positioning

positioning::LocateOptions locate_options(const json& doc)
{
    positioning::LocateOptions opt;
    try {
        opt.sigma_guess_nm = doc.value("sigma_guess_nm", opt.sigma_guess_nm);
        opt.detection_threshold = doc.value("detection_threshold", opt.detection_threshold);
        opt.min_width_ratio = doc.value("min_width_ratio", opt.min_width_ratio);
        opt.max_width_ratio = doc.value("max_width_ratio", opt.max_width_ratio);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("positioning.locate: ") + e.what());
    }
    return opt;
}

void cmd_locate(cli::RunContext& ctx, const Options& o)
{
    const json& cfg = ctx.config().section("positioning");
    const positioning::LocateOptions opt = locate_options(cfg.contains("locate") ? cfg.at("locate") : json::object());

    if (!o.image.empty()) {
        std::istringstream in(read_input(ctx, o.image));
        const double pixel_nm = get_or(cfg.contains("image") ? cfg.at("image") : json::object(), "pixel_nm", 50.0);
        positioning::SyntheticImage image = positioning::read_pgm(in, pixel_nm);
        if (!o.truth.empty()) {
            const std::string text = read_input(ctx, o.truth);
            try {
                positioning::apply_truth_json(image, json::parse(text));
            } catch (const json::parse_error& e) {
                throw DataError(o.truth + ": " + e.what());
            }
        }
        const positioning::Localization loc = positioning::locate_qds(image, opt);
        std::ostringstream csv;
        positioning::write_located_csv(csv, loc);
        ctx.write_output("located.csv", csv.str());
        json doc = positioning::to_json(loc);
        doc["run"] = ctx.echo();
        ctx.write_json("located.json", doc);
        std::cout << "locate: " << loc.spots.size() << " spots\n";
        return;
    }

    if (!ctx.config().loaded) {
        throw ConfigError("locate needs --image or --config");
    }
    const positioning::ImageSpec spec =
        positioning::image_spec_from_json(cfg.contains("image") ? cfg.at("image") : json::object());
    std::vector<positioning::Spot> spots;
    try {
        spots = positioning::spots_from_json(cfg);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("positioning.spots: ") + e.what());
    }
    const int frames = o.runs >= 0 ? o.runs : get_or(cfg, "frames", 30);
    if (frames < 1) {
        throw ConfigError("--runs (frames) must be at least 1");
    }
    ctx.set_parameter("frames", frames);
    std::vector<positioning::SyntheticImage> images(static_cast<std::size_t>(frames));
    std::vector<positioning::Localization> located(images.size());
    parallel_for(images.size(), worker_count(o), [&](std::size_t i) {
        images[i] = positioning::render_image(spots, spec, cli::derive_seed(ctx.seed(), i));
        located[i] = positioning::locate_qds(images[i], opt);
    });
    std::ostringstream pgm;
    positioning::write_pgm(pgm, images.front());
    ctx.write_output("frame_000.pgm", pgm.str());
    ctx.write_json("frame_000_truth.json", positioning::truth_to_json(images.front()));
    std::ostringstream located_csv;
    positioning::write_located_csv(located_csv, located.front());
    ctx.write_output("frame_000_located.csv", located_csv.str());

    if (frames < 2) {
        json doc = positioning::to_json(located.front());
        doc["run"] = ctx.echo();
        ctx.write_json("located.json", doc);
        std::cout << "locate: " << located.front().spots.size() << " spots in one frame\n";
        return;
    }
    const positioning::RepeatabilityReport report = positioning::repeatability(located, 2.0 * opt.sigma_guess_nm);
    std::ostringstream csv;
    positioning::write_repeatability_csv(csv, report);
    ctx.write_output("repeatability.csv", csv.str());
    const double limit = get_or(cfg, "std_limit_nm", 15.0);
    json doc = positioning::to_json(report);
    doc["std_limit_nm"] = limit;
    doc["fraction_below_limit"] = report.fraction_below(limit);
    doc["run"] = ctx.echo();
    ctx.write_json("repeatability.json", doc);
    std::cout << "locate: " << report.spots.size() << " spots over " << frames << " frames, median std "
              << report.median_std_nm << " nm\n";
}

int exit_code_for(ErrorKind kind)
{
    switch (kind) {
    case ErrorKind::config:
        return exit_config;
    case ErrorKind::data:
        return exit_data;
    case ErrorKind::numerical:
        return exit_numerical;
    }
    return exit_internal;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"qdent: entangled-photon source analysis pipelines"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(QDENT_VERSION));

    Options o;
    struct Command {
        const char* name;
        const char* help;
        bool needs_config;
        void (*run)(cli::RunContext&, const Options&);
    };
    const std::vector<Command> commands = {
        {"fef-curve", "FEF versus fine structure splitting, analytic and simulated tomography", true, cmd_fef_curve},
        {"tomography", "maximum-likelihood state reconstruction with Monte Carlo errors", false, cmd_tomography},
        {"stream", "simulate a time-tagged photon stream", true, cmd_stream},
        {"hbt", "second-order correlation g2(0) from a stream", false, cmd_hbt},
        {"hom", "two-photon interference visibility and indistinguishability", false, cmd_hom},
        {"lifetime", "decay-time fit of a time-resolved trace", false, cmd_lifetime},
        {"strain", "strain tuning: find-null, sweep, scan or extract", false, cmd_strain},
        {"locate", "marker-referenced spot localization and repeatability", false, cmd_locate},
    };

    std::vector<CLI::App*> subs;
    std::vector<CLI::Option*> grid_options;
    for (const auto& c : commands) {
        CLI::App* sub = app.add_subcommand(c.name, c.help);
        sub->add_option("--config", o.config, "JSON config file");
        sub->add_option("--seed", o.seed, "master seed")->capture_default_str();
        sub->add_option("--out", o.out, "output directory (default $QDENT_OUT_DIR/<command>)");
        sub->add_option("--runs", o.runs, "Monte Carlo runs, repeated fits or frames")->check(CLI::NonNegativeNumber);
        sub->add_option("--duration", o.duration, "stream duration, s")->check(CLI::NonNegativeNumber);
        grid_options.push_back(sub->add_option("--grid", o.grid, "start:stop:step or comma-separated values"));
        sub->add_option("--workers", o.workers, "worker threads (results do not depend on it)");
        subs.push_back(sub);
    }
    subs[1]->add_option("--counts", o.counts, "36-row counts CSV");
    subs[2]->add_flag("--csv", o.csv, "also write the stream as CSV");
    subs[3]->add_option("--stream", o.stream, "stream file (.bin or .csv)");
    subs[4]->add_option("--stream", o.stream, "photon stream file (.bin or .csv)");
    subs[5]->add_option("--trace", o.trace, "trace CSV (bin_center_ns, counts[, irf])");
    subs[6]->add_option("action", o.action, "find-null | sweep | scan | extract")->required();
    subs[6]->add_option("--scan", o.scan, "polarization scan CSV for extract");
    subs[7]->add_option("--image", o.image, "PGM image to locate");
    subs[7]->add_option("--truth", o.truth, "truth sidecar JSON for --image");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_ok : exit_config;
    }

    const auto start = std::chrono::steady_clock::now();
    try {
        for (std::size_t i = 0; i < commands.size(); ++i) {
            if (!subs[i]->parsed()) {
                continue;
            }
            const Command& c = commands[i];
            o.grid_given = grid_options[i]->count() > 0;
            cli::Config config = config_for(o, c.needs_config);
            cli::RunContext ctx(c.name, output_dir(o, c.name), o.seed, std::move(config));
            if (!o.action.empty()) {
                ctx.set_parameter("action", o.action);
            }
            c.run(ctx, o);
            ctx.finish(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
            return exit_ok;
        }
    } catch (const Error& e) {
        std::cerr << "qdent: " << e.what() << "\n";
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "qdent: internal error: " << e.what() << "\n";
        return exit_internal;
    }
    return exit_config;
}
