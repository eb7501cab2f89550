#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace qdent::cli {

// Hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

struct Config {
    std::filesystem::path path;
    std::string digest;  // SHA-256 of the raw file bytes
    nlohmann::json doc = nlohmann::json::object();
    bool loaded = false;

    // Sub-object `key`, or an empty object when absent.
    const nlohmann::json& section(const std::string& key) const;
};

// Parses a JSON config file.  ConfigError on unreadable or malformed files.
Config load_config(const std::filesystem::path& path);

// Output directory bookkeeping and the RunManifest written at the end of
// every command.  Output files are recorded with their digests; the wall
// time is the only entry that changes between identical reruns.
class RunContext {
public:
    RunContext(std::string command, std::filesystem::path out_dir, std::uint64_t seed, Config config);

    const std::filesystem::path& out_dir() const { return out_dir_; }
    std::uint64_t seed() const { return seed_; }
    const Config& config() const { return config_; }

    void write_output(const std::string& name, std::string_view content);
    void write_json(const std::string& name, const nlohmann::json& doc);
    void add_input(const std::filesystem::path& path, std::string_view content);
    void set_parameter(const std::string& key, nlohmann::json value);

    nlohmann::json manifest(double wall_time_s) const;
    // Summary echoed inside result documents (no wall time).
    nlohmann::json echo() const;
    void finish(double wall_time_s);

private:
    std::string command_;
    std::filesystem::path out_dir_;
    std::uint64_t seed_;
    Config config_;
    nlohmann::json parameters_ = nlohmann::json::object();
    std::vector<nlohmann::json> inputs_;
    std::vector<nlohmann::json> outputs_;
};

// ISO 8601 UTC time from SOURCE_DATE_EPOCH, or empty when unset.
std::string reproducible_timestamp();

// Seed of substream `stream` of a master seed, for APIs taking a raw seed.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

// "start:stop:step" or a comma-separated list.  ConfigError on malformed
// text; an empty result is returned as is.
std::vector<double> parse_grid(const std::string& text);
// {"start", "stop", "step"} or an explicit array of values.
std::vector<double> grid_from_json(const nlohmann::json& doc);

}  // namespace qdent::cli
