#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include <json.hpp>

namespace qdent::photon {

enum class Line : std::uint8_t { x = 0, xx = 1 };

enum class Statistics : std::uint8_t {
    cascade,     // one XX-X pair per successful pulse, plus optional re-excitation
    poissonian,  // laser-like: Poisson photon number per line and pulse
};

enum class TruthTag : std::uint8_t { signal = 0, multiphoton = 1, background = 2 };

struct SourceConfig {
    double rep_rate_hz = 80e6;
    double tau_x_ns = 0.044;
    double tau_xx_ns = 0.018;
    double prep_fidelity = 1.0;
    // Probability that a successful pulse also emits a second cascade.
    double multiphoton_prob = 0.0;
    // Telegraph blinking: off->on and on->off switching rates, 1/s.  Both
    // zero means the emitter never blinks.
    double blink_on_rate = 0.0;
    double blink_off_rate = 0.0;
    double extraction_eff = 1.0;
    Statistics statistics = Statistics::cascade;
    double mean_photons = 1.0;  // per line and pulse, poissonian statistics only

    void validate() const;
    double rep_period_ns() const { return 1e9 / rep_rate_hz; }
    // Stationary fraction of time spent in the bright state.
    double duty() const;
};

struct DetectorConfig {
    Line line = Line::x;
    double jitter_fwhm_ns = 0.35;
    double efficiency = 1.0;
    double deadtime_ns = 0.0;
    double dark_rate_hz = 0.0;

    void validate() const;
};

struct Event {
    double t_ns = 0.0;
    std::uint8_t channel = 0;
    TruthTag tag = TruthTag::signal;

    bool operator==(const Event&) const = default;
};

struct StreamStats {
    std::uint64_t pulses = 0;
    std::uint64_t bright_pulses = 0;       // pulses arriving while the emitter is on
    std::uint64_t emitted_cascades = 0;    // successful preparations
    std::uint64_t multiphoton_cascades = 0;
    std::uint64_t extracted_photons = 0;   // photons leaving the sample, both lines
    std::vector<std::uint64_t> detected;   // per channel, before deadtime
    std::vector<std::uint64_t> registered; // per channel, after deadtime

    bool operator==(const StreamStats&) const = default;
};

struct EventStream {
    std::vector<Event> events;  // nondecreasing t_ns
    std::uint8_t channel_count = 0;
    double rep_period_ns = 12.5;
    double first_pulse_ns = 0.0;  // pulse n is at first_pulse_ns + n * rep_period_ns
    double duration_ns = 0.0;
    StreamStats stats;

    std::size_t count(std::uint8_t channel) const;
};

// Pulse-by-pulse Monte Carlo of excitation, emission, extraction, routing to
// the detectors of each line (uniform split between detectors sharing a
// line), detection efficiency, Gaussian jitter and non-paralyzable deadtime.
// Pulses are processed in fixed blocks, each on its own substream of `seed`,
// so the output does not depend on `workers`.
EventStream simulate_stream(const SourceConfig& source, std::span<const DetectorConfig> detectors,
                            double duration_s, std::uint64_t seed, unsigned workers = 1);

// Applies non-paralyzable deadtime per channel to a time-ordered event list.
std::vector<Event> apply_deadtime(const std::vector<Event>& events, std::span<const double> deadtime_ns);

// Framed binary layout, little-endian:
//   "QDEV" magic, u32 version (=1), u8 channel_count, f64 rep_period_ns,
//   f64 first_pulse_ns, f64 duration_ns, u64 event_count,
//   then per event: u64 timestamp_ps, u8 channel, u8 tag.
void write_stream_binary(std::ostream& out, const EventStream& stream);
EventStream read_stream_binary(std::istream& in);

// Columns: timestamp_ns, channel, truth_tag (signal|multiphoton|background).
// Comment lines carry the stream header.
void write_stream_csv(std::ostream& out, const EventStream& stream);
EventStream read_stream_csv(std::istream& in);

SourceConfig source_from_json(const nlohmann::json& doc);
DetectorConfig detector_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const SourceConfig& source);
nlohmann::json to_json(const DetectorConfig& detector);

const char* tag_name(TruthTag tag);

}  // namespace qdent::photon
