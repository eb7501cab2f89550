#include "qdent/photon_stream.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <thread>

#include "qdent/constants.hpp"
#include "qdent/error.hpp"
#include "qdent/io.hpp"
#include "qdent/random.hpp"

namespace qdent::photon {

namespace {

constexpr std::uint64_t block_pulses = 1u << 16;

bool is_probability(double p)
{
    return p >= 0.0 && p <= 1.0;
}

// Switching times of the telegraph process over [0, duration).
struct BlinkTrace {
    bool initially_on = true;
    std::vector<double> switches_ns;

    bool on_at(double t_ns, std::size_t& cursor) const
    {
        while (cursor < switches_ns.size() && switches_ns[cursor] <= t_ns) {
            ++cursor;
        }
        return (cursor % 2 == 0) ? initially_on : !initially_on;
    }

    // Number of switches strictly before t_ns.
    std::size_t cursor_before(double t_ns) const
    {
        return static_cast<std::size_t>(
            std::lower_bound(switches_ns.begin(), switches_ns.end(), t_ns) - switches_ns.begin());
    }
};

BlinkTrace make_blink_trace(const SourceConfig& source, double duration_ns, std::uint64_t seed)
{
    BlinkTrace trace;
    if (source.blink_on_rate == 0.0 && source.blink_off_rate == 0.0) {
        return trace;
    }
    Rng rng = make_rng(seed, 0);
    trace.initially_on = sample_uniform(rng) < source.duty();
    bool on = trace.initially_on;
    double t = 0.0;
    while (true) {
        const double rate = on ? source.blink_off_rate : source.blink_on_rate;
        if (rate <= 0.0) {
            break;
        }
        t += sample_exponential(rng, 1e9 / rate);
        if (t >= duration_ns) {
            break;
        }
        trace.switches_ns.push_back(t);
        on = !on;
    }
    return trace;
}

struct Block {
    std::vector<Event> events;
    StreamStats stats;
};

class BlockSimulator {
public:
    BlockSimulator(const SourceConfig& source, std::span<const DetectorConfig> detectors,
                   const BlinkTrace& blink, double first_pulse_ns)
        : source_(source), detectors_(detectors), blink_(blink), first_pulse_ns_(first_pulse_ns)
    {
        for (std::size_t ch = 0; ch < detectors.size(); ++ch) {
            by_line_[static_cast<int>(detectors[ch].line)].push_back(static_cast<std::uint8_t>(ch));
        }
    }

    Block run(std::uint64_t begin, std::uint64_t end, std::uint64_t seed, std::uint64_t block_index) const
    {
        Block block;
        block.stats.detected.assign(detectors_.size(), 0);
        Rng rng = make_rng(seed, block_index + 1);
        const double period = source_.rep_period_ns();
        std::size_t cursor = blink_.cursor_before(first_pulse_ns_ + static_cast<double>(begin) * period);
        for (std::uint64_t n = begin; n < end; ++n) {
            const double t0 = first_pulse_ns_ + static_cast<double>(n) * period;
            ++block.stats.pulses;
            if (source_.statistics == Statistics::poissonian) {
                ++block.stats.bright_pulses;
                for (Line line : {Line::xx, Line::x}) {
                    const double tau = line == Line::x ? source_.tau_x_ns : source_.tau_xx_ns;
                    const std::uint64_t k = sample_poisson(rng, source_.mean_photons);
                    for (std::uint64_t i = 0; i < k; ++i) {
                        emit(block, rng, line, t0 + sample_exponential(rng, tau), TruthTag::signal);
                    }
                }
                continue;
            }
            if (!blink_.on_at(t0, cursor)) {
                continue;
            }
            ++block.stats.bright_pulses;
            if (sample_uniform(rng) >= source_.prep_fidelity) {
                continue;
            }
            ++block.stats.emitted_cascades;
            emit_cascade(block, rng, t0, TruthTag::signal);
            if (source_.multiphoton_prob > 0.0 && sample_uniform(rng) < source_.multiphoton_prob) {
                ++block.stats.multiphoton_cascades;
                emit_cascade(block, rng, t0, TruthTag::multiphoton);
            }
        }

        const double span_ns = static_cast<double>(end - begin) * period;
        const double start_ns = first_pulse_ns_ + static_cast<double>(begin) * period;
        for (std::size_t ch = 0; ch < detectors_.size(); ++ch) {
            const double rate = detectors_[ch].dark_rate_hz;
            if (rate <= 0.0) {
                continue;
            }
            const std::uint64_t k = sample_poisson(rng, rate * span_ns * 1e-9);
            for (std::uint64_t i = 0; i < k; ++i) {
                block.events.push_back({start_ns + sample_uniform(rng) * span_ns,
                                        static_cast<std::uint8_t>(ch), TruthTag::background});
                ++block.stats.detected[ch];
            }
        }
        return block;
    }

private:
    void emit_cascade(Block& block, Rng& rng, double t0, TruthTag tag) const
    {
        const double t_xx = t0 + sample_exponential(rng, source_.tau_xx_ns);
        const double t_x = t_xx + sample_exponential(rng, source_.tau_x_ns);
        emit(block, rng, Line::xx, t_xx, tag);
        emit(block, rng, Line::x, t_x, tag);
    }

    void emit(Block& block, Rng& rng, Line line, double t, TruthTag tag) const
    {
        if (sample_uniform(rng) >= source_.extraction_eff) {
            return;
        }
        ++block.stats.extracted_photons;
        const auto& candidates = by_line_[static_cast<int>(line)];
        if (candidates.empty()) {
            return;
        }
        std::size_t pick = 0;
        if (candidates.size() > 1) {
            pick = std::min(candidates.size() - 1,
                            static_cast<std::size_t>(sample_uniform(rng) * static_cast<double>(candidates.size())));
        }
        const std::uint8_t ch = candidates[pick];
        const DetectorConfig& det = detectors_[ch];
        if (sample_uniform(rng) >= det.efficiency) {
            return;
        }
        ++block.stats.detected[ch];
        const double jitter = sample_normal(rng, det.jitter_fwhm_ns / constants::fwhm_per_sigma);
        block.events.push_back({t + jitter, ch, tag});
    }

    const SourceConfig& source_;
    std::span<const DetectorConfig> detectors_;
    const BlinkTrace& blink_;
    double first_pulse_ns_;
    std::vector<std::uint8_t> by_line_[2];
};

bool event_less(const Event& a, const Event& b)
{
    if (a.t_ns != b.t_ns) {
        return a.t_ns < b.t_ns;
    }
    if (a.channel != b.channel) {
        return a.channel < b.channel;
    }
    return a.tag < b.tag;
}

template <typename T>
void put(std::ostream& out, T value)
{
    static_assert(std::endian::native == std::endian::little, "binary stream format assumes little-endian host");
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.write(buf, sizeof(T));
}

template <typename T>
T get(std::istream& in)
{
    char buf[sizeof(T)];
    if (!in.read(buf, sizeof(T))) {
        throw DataError("binary stream truncated");
    }
    T value;
    std::memcpy(&value, buf, sizeof(T));
    return value;
}

TruthTag tag_from_name(const std::string& name, std::size_t line)
{
    if (name == "signal") {
        return TruthTag::signal;
    }
    if (name == "multiphoton") {
        return TruthTag::multiphoton;
    }
    if (name == "background") {
        return TruthTag::background;
    }
    throw DataError("line " + std::to_string(line) + ": unknown truth_tag '" + name + "'");
}

}  // namespace

void SourceConfig::validate() const
{
    if (!(rep_rate_hz > 0.0)) {
        throw ConfigError("source: rep_rate_hz must be > 0");
    }
    if (!(tau_x_ns >= 0.0) || !(tau_xx_ns >= 0.0)) {
        throw ConfigError("source: lifetimes must be >= 0");
    }
    if (!is_probability(prep_fidelity) || !is_probability(multiphoton_prob) || !is_probability(extraction_eff)) {
        throw ConfigError("source: prep_fidelity, multiphoton_prob and extraction_eff must lie in [0, 1]");
    }
    if (!(blink_on_rate >= 0.0) || !(blink_off_rate >= 0.0)) {
        throw ConfigError("source: blinking rates must be >= 0");
    }
    if (!(mean_photons >= 0.0)) {
        throw ConfigError("source: mean_photons must be >= 0");
    }
}

double SourceConfig::duty() const
{
    if (blink_on_rate == 0.0 && blink_off_rate == 0.0) {
        return 1.0;
    }
    return blink_on_rate / (blink_on_rate + blink_off_rate);
}

void DetectorConfig::validate() const
{
    if (!(jitter_fwhm_ns >= 0.0) || !(deadtime_ns >= 0.0) || !(dark_rate_hz >= 0.0)) {
        throw ConfigError("detector: jitter, deadtime and dark rate must be >= 0");
    }
    if (!is_probability(efficiency)) {
        throw ConfigError("detector: efficiency must lie in [0, 1]");
    }
}

std::size_t EventStream::count(std::uint8_t channel) const
{
    return static_cast<std::size_t>(
        std::count_if(events.begin(), events.end(), [channel](const Event& e) { return e.channel == channel; }));
}

std::vector<Event> apply_deadtime(const std::vector<Event>& events, std::span<const double> deadtime_ns)
{
    std::vector<double> last(deadtime_ns.size(), -std::numeric_limits<double>::infinity());
    std::vector<Event> out;
    out.reserve(events.size());
    for (const Event& e : events) {
        if (e.channel >= deadtime_ns.size()) {
            throw DataError("event on unknown channel " + std::to_string(e.channel));
        }
        if (e.t_ns - last[e.channel] >= deadtime_ns[e.channel]) {
            out.push_back(e);
            last[e.channel] = e.t_ns;
        }
    }
    return out;
}

EventStream simulate_stream(const SourceConfig& source, std::span<const DetectorConfig> detectors,
                            double duration_s, std::uint64_t seed, unsigned workers)
{
    source.validate();
    if (detectors.empty()) {
        throw ConfigError("simulate_stream: detector set is empty");
    }
    if (detectors.size() > 255) {
        throw ConfigError("simulate_stream: at most 255 detectors");
    }
    for (const auto& d : detectors) {
        d.validate();
    }
    if (!(duration_s > 0.0)) {
        throw ConfigError("simulate_stream: duration must be > 0");
    }

    EventStream stream;
    stream.channel_count = static_cast<std::uint8_t>(detectors.size());
    stream.rep_period_ns = source.rep_period_ns();
    stream.first_pulse_ns = 0.25 * stream.rep_period_ns;
    stream.duration_ns = duration_s * 1e9;

    const auto pulses = static_cast<std::uint64_t>(std::floor(duration_s * source.rep_rate_hz));
    const BlinkTrace blink = make_blink_trace(source, stream.duration_ns, seed);
    const BlockSimulator sim(source, detectors, blink, stream.first_pulse_ns);

    const std::uint64_t n_blocks = (pulses + block_pulses - 1) / block_pulses;
    std::vector<Block> blocks(n_blocks);
    const auto work = [&](std::uint64_t first, std::uint64_t stride) {
        for (std::uint64_t b = first; b < n_blocks; b += stride) {
            const std::uint64_t begin = b * block_pulses;
            blocks[b] = sim.run(begin, std::min(pulses, begin + block_pulses), seed, b);
        }
    };
    const unsigned n_workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::uint64_t>(n_blocks, 1))));
    if (n_workers == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < n_workers; ++w) {
            pool.emplace_back(work, w, n_workers);
        }
        for (auto& t : pool) {
            t.join();
        }
    }

    std::vector<Event> merged;
    stream.stats.detected.assign(detectors.size(), 0);
    std::size_t total = 0;
    for (const auto& b : blocks) {
        total += b.events.size();
    }
    merged.reserve(total);
    for (auto& b : blocks) {
        merged.insert(merged.end(), b.events.begin(), b.events.end());
        stream.stats.pulses += b.stats.pulses;
        stream.stats.bright_pulses += b.stats.bright_pulses;
        stream.stats.emitted_cascades += b.stats.emitted_cascades;
        stream.stats.multiphoton_cascades += b.stats.multiphoton_cascades;
        stream.stats.extracted_photons += b.stats.extracted_photons;
        for (std::size_t ch = 0; ch < detectors.size(); ++ch) {
            stream.stats.detected[ch] += b.stats.detected[ch];
        }
    }
    std::sort(merged.begin(), merged.end(), event_less);

    std::vector<double> deadtimes;
    for (const auto& d : detectors) {
        deadtimes.push_back(d.deadtime_ns);
    }
    stream.events = apply_deadtime(merged, deadtimes);
    stream.stats.registered.assign(detectors.size(), 0);
    for (const auto& e : stream.events) {
        ++stream.stats.registered[e.channel];
    }
    return stream;
}

void write_stream_binary(std::ostream& out, const EventStream& stream)
{
    out.write("QDEV", 4);
    put<std::uint32_t>(out, 1);
    put<std::uint8_t>(out, stream.channel_count);
    put<double>(out, stream.rep_period_ns);
    put<double>(out, stream.first_pulse_ns);
    put<double>(out, stream.duration_ns);
    put<std::uint64_t>(out, stream.events.size());
    for (const auto& e : stream.events) {
        if (e.t_ns < 0.0) {
            throw DataError("binary stream format cannot store negative timestamps");
        }
        put<std::uint64_t>(out, static_cast<std::uint64_t>(std::llround(e.t_ns * 1000.0)));
        put<std::uint8_t>(out, e.channel);
        put<std::uint8_t>(out, static_cast<std::uint8_t>(e.tag));
    }
}

EventStream read_stream_binary(std::istream& in)
{
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "QDEV", 4) != 0) {
        throw DataError("not a binary event stream (bad magic)");
    }
    if (get<std::uint32_t>(in) != 1) {
        throw DataError("unsupported binary event stream version");
    }
    EventStream stream;
    stream.channel_count = get<std::uint8_t>(in);
    stream.rep_period_ns = get<double>(in);
    stream.first_pulse_ns = get<double>(in);
    stream.duration_ns = get<double>(in);
    const auto n = get<std::uint64_t>(in);
    stream.events.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(n, 1u << 26)));
    for (std::uint64_t i = 0; i < n; ++i) {
        Event e;
        e.t_ns = static_cast<double>(get<std::uint64_t>(in)) / 1000.0;
        e.channel = get<std::uint8_t>(in);
        const auto tag = get<std::uint8_t>(in);
        if (tag > 2) {
            throw DataError("binary event " + std::to_string(i) + ": bad truth tag");
        }
        if (e.channel >= stream.channel_count) {
            throw DataError("binary event " + std::to_string(i) + ": channel out of range");
        }
        e.tag = static_cast<TruthTag>(tag);
        stream.events.push_back(e);
    }
    return stream;
}

const char* tag_name(TruthTag tag)
{
    switch (tag) {
    case TruthTag::signal: return "signal";
    case TruthTag::multiphoton: return "multiphoton";
    case TruthTag::background: return "background";
    }
    return "signal";
}

void write_stream_csv(std::ostream& out, const EventStream& stream)
{
    out << "# channel_count=" << static_cast<int>(stream.channel_count)
        << " rep_period_ns=" << io::format_double(stream.rep_period_ns)
        << " first_pulse_ns=" << io::format_double(stream.first_pulse_ns)
        << " duration_ns=" << io::format_double(stream.duration_ns) << '\n';
    out << "timestamp_ns,channel,truth_tag\n";
    for (const auto& e : stream.events) {
        out << io::format_double(e.t_ns) << ',' << static_cast<int>(e.channel) << ',' << tag_name(e.tag) << '\n';
    }
}

EventStream read_stream_csv(std::istream& in)
{
    EventStream stream;
    std::string first;
    std::getline(in, first);
    if (first.rfind("# ", 0) == 0) {
        std::istringstream header(first.substr(2));
        std::string kv;
        while (header >> kv) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) {
                continue;
            }
            const std::string key = kv.substr(0, eq);
            const std::string value = kv.substr(eq + 1);
            if (key == "channel_count") {
                stream.channel_count = static_cast<std::uint8_t>(io::parse_integer(value, 1, key));
            } else if (key == "rep_period_ns") {
                stream.rep_period_ns = io::parse_double(value, 1, key);
            } else if (key == "first_pulse_ns") {
                stream.first_pulse_ns = io::parse_double(value, 1, key);
            } else if (key == "duration_ns") {
                stream.duration_ns = io::parse_double(value, 1, key);
            }
        }
    }
    // With a '#' header line the column names are still ahead; otherwise the
    // consumed line was the column names.
    const bool names_pending = first.rfind("# ", 0) == 0;
    std::uint8_t max_channel = 0;
    for (const auto& row : io::read_csv(in, names_pending)) {
        if (row.fields.size() != 3) {
            throw DataError("line " + std::to_string(row.line + 1) + ": expected timestamp_ns,channel,truth_tag");
        }
        Event e;
        e.t_ns = io::parse_double(row.fields[0], row.line + 1, "timestamp_ns");
        const long long ch = io::parse_integer(row.fields[1], row.line + 1, "channel");
        if (ch < 0 || ch > 254) {
            throw DataError("line " + std::to_string(row.line + 1) + ": channel out of range");
        }
        e.channel = static_cast<std::uint8_t>(ch);
        e.tag = tag_from_name(row.fields[2], row.line + 1);
        if (!stream.events.empty() && e.t_ns < stream.events.back().t_ns) {
            throw DataError("line " + std::to_string(row.line + 1) + ": timestamps must be nondecreasing");
        }
        max_channel = std::max(max_channel, e.channel);
        stream.events.push_back(e);
    }
    if (!stream.events.empty() && max_channel >= stream.channel_count) {
        stream.channel_count = static_cast<std::uint8_t>(max_channel + 1);
    }
    return stream;
}

SourceConfig source_from_json(const nlohmann::json& doc)
{
    SourceConfig s;
    try {
        s.rep_rate_hz = doc.value("rep_rate_hz", s.rep_rate_hz);
        s.tau_x_ns = doc.value("tau_x_ns", s.tau_x_ns);
        s.tau_xx_ns = doc.value("tau_xx_ns", s.tau_xx_ns);
        s.prep_fidelity = doc.value("prep_fidelity", s.prep_fidelity);
        s.multiphoton_prob = doc.value("multiphoton_prob", s.multiphoton_prob);
        s.blink_on_rate = doc.value("blink_on_rate_per_s", s.blink_on_rate);
        s.blink_off_rate = doc.value("blink_off_rate_per_s", s.blink_off_rate);
        s.extraction_eff = doc.value("extraction_eff", s.extraction_eff);
        s.mean_photons = doc.value("mean_photons", s.mean_photons);
        const std::string stats = doc.value("statistics", std::string("cascade"));
        if (stats == "cascade") {
            s.statistics = Statistics::cascade;
        } else if (stats == "poissonian") {
            s.statistics = Statistics::poissonian;
        } else {
            throw ConfigError("source: statistics must be 'cascade' or 'poissonian'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("source: ") + e.what());
    }
    s.validate();
    return s;
}

DetectorConfig detector_from_json(const nlohmann::json& doc)
{
    DetectorConfig d;
    try {
        const std::string line = doc.value("line", std::string("x"));
        if (line == "x") {
            d.line = Line::x;
        } else if (line == "xx") {
            d.line = Line::xx;
        } else {
            throw ConfigError("detector: line must be 'x' or 'xx'");
        }
        d.jitter_fwhm_ns = doc.value("jitter_fwhm_ns", d.jitter_fwhm_ns);
        d.efficiency = doc.value("efficiency", d.efficiency);
        d.deadtime_ns = doc.value("deadtime_ns", d.deadtime_ns);
        d.dark_rate_hz = doc.value("dark_rate_hz", d.dark_rate_hz);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("detector: ") + e.what());
    }
    d.validate();
    return d;
}

nlohmann::json to_json(const SourceConfig& s)
{
    return nlohmann::json{{"rep_rate_hz", s.rep_rate_hz},
                          {"tau_x_ns", s.tau_x_ns},
                          {"tau_xx_ns", s.tau_xx_ns},
                          {"prep_fidelity", s.prep_fidelity},
                          {"multiphoton_prob", s.multiphoton_prob},
                          {"blink_on_rate_per_s", s.blink_on_rate},
                          {"blink_off_rate_per_s", s.blink_off_rate},
                          {"extraction_eff", s.extraction_eff},
                          {"statistics", s.statistics == Statistics::cascade ? "cascade" : "poissonian"},
                          {"mean_photons", s.mean_photons}};
}

nlohmann::json to_json(const DetectorConfig& d)
{
    return nlohmann::json{{"line", d.line == Line::x ? "x" : "xx"},
                          {"jitter_fwhm_ns", d.jitter_fwhm_ns},
                          {"efficiency", d.efficiency},
                          {"deadtime_ns", d.deadtime_ns},
                          {"dark_rate_hz", d.dark_rate_hz}};
}

}  // namespace qdent::photon
