#include "run_context.hpp"

#include <cmath>
#include <cstdlib>
#include <ctime>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include "qdent/error.hpp"
#include "qdent/io.hpp"
#include "qdent/random.hpp"

#ifndef QDENT_VERSION
#define QDENT_VERSION "0.0.0"
#endif

namespace qdent::cli {

std::string sha256_hex(std::string_view bytes)
{
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int length = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
        throw NumericalError("SHA-256 digest failed");
    }
    std::ostringstream hex;
    hex << std::hex << std::setfill('0');
    for (unsigned int i = 0; i < length; ++i) {
        hex << std::setw(2) << static_cast<int>(digest[i]);
    }
    return hex.str();
}

const nlohmann::json& Config::section(const std::string& key) const
{
    static const nlohmann::json empty = nlohmann::json::object();
    if (doc.is_object() && doc.contains(key)) {
        return doc.at(key);
    }
    return empty;
}

Config load_config(const std::filesystem::path& path)
{
    Config config;
    config.path = path;
    std::string text;
    try {
        text = io::read_text_file(path);
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    config.digest = sha256_hex(text);
    try {
        config.doc = nlohmann::json::parse(text, nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    if (!config.doc.is_object()) {
        throw ConfigError(path.string() + ": top level must be an object");
    }
    config.loaded = true;
    return config;
}

RunContext::RunContext(std::string command, std::filesystem::path out_dir, std::uint64_t seed, Config config)
    : command_(std::move(command)), out_dir_(std::move(out_dir)), seed_(seed), config_(std::move(config))
{
    std::error_code ec;
    std::filesystem::create_directories(out_dir_, ec);
    if (ec) {
        throw ConfigError("cannot create output directory " + out_dir_.string() + ": " + ec.message());
    }
}

void RunContext::write_output(const std::string& name, std::string_view content)
{
    io::write_text_file(out_dir_ / name, content);
    outputs_.push_back({{"path", name}, {"sha256", sha256_hex(content)}, {"bytes", content.size()}});
}

void RunContext::write_json(const std::string& name, const nlohmann::json& doc)
{
    write_output(name, doc.dump(2) + "\n");
}

void RunContext::add_input(const std::filesystem::path& path, std::string_view content)
{
    inputs_.push_back({{"path", path.string()}, {"sha256", sha256_hex(content)}});
}

void RunContext::set_parameter(const std::string& key, nlohmann::json value)
{
    parameters_[key] = std::move(value);
}

nlohmann::json RunContext::echo() const
{
    nlohmann::json doc = {{"command", command_},
                          {"tool_version", QDENT_VERSION},
                          {"seed", seed_},
                          {"parameters", parameters_}};
    if (config_.loaded) {
        doc["config"] = {{"path", config_.path.string()}, {"sha256", config_.digest}};
    } else {
        doc["config"] = nullptr;
    }
    return doc;
}

nlohmann::json RunContext::manifest(double wall_time_s) const
{
    nlohmann::json doc = echo();
    doc["inputs"] = inputs_;
    doc["outputs"] = outputs_;
    doc["wall_time_s"] = std::round(wall_time_s * 1e3) / 1e3;
    return doc;
}

void RunContext::finish(double wall_time_s)
{
    io::write_text_file(out_dir_ / "manifest.json", manifest(wall_time_s).dump(2) + "\n");
}

std::string reproducible_timestamp()
{
    const char* epoch = std::getenv("SOURCE_DATE_EPOCH");
    if (epoch == nullptr || *epoch == '\0') {
        return {};
    }
    char* end = nullptr;
    const long long seconds = std::strtoll(epoch, &end, 10);
    if (end == epoch || *end != '\0' || seconds < 0) {
        throw ConfigError("SOURCE_DATE_EPOCH must be a non-negative integer");
    }
    const std::time_t t = static_cast<std::time_t>(seconds);
    std::tm utc{};
    gmtime_r(&t, &utc);
    std::ostringstream out;
    out << std::put_time(&utc, "%Y-%m-%dT%H:%M:%SZ");
    return out.str();
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream)
{
    Rng rng = make_rng(master, stream);
    return rng();
}

namespace {

std::vector<double> range_values(double start, double stop, double step)
{
    if (!std::isfinite(start) || !std::isfinite(stop) || !std::isfinite(step) || step <= 0.0) {
        throw ConfigError("grid needs finite start and stop and a positive step");
    }
    std::vector<double> values;
    const double n = std::floor((stop - start) / step + 1e-9);
    if (n > 1e7) {
        throw ConfigError("grid has too many points");
    }
    for (long long i = 0; i <= static_cast<long long>(n); ++i) {
        values.push_back(start + static_cast<double>(i) * step);
    }
    return values;
}

}  // namespace

std::vector<double> parse_grid(const std::string& text)
{
    std::vector<std::string> parts;
    const char sep = text.find(':') != std::string::npos ? ':' : ',';
    std::stringstream stream(text);
    std::string item;
    while (std::getline(stream, item, sep)) {
        if (!item.empty()) {
            parts.push_back(item);
        }
    }
    auto number = [](const std::string& s) {
        try {
            return io::parse_double(s, 0, "grid");
        } catch (const Error&) {
            throw ConfigError("grid value '" + s + "' is not a number");
        }
    };
    if (sep == ':') {
        if (parts.size() != 3) {
            throw ConfigError("grid range must read start:stop:step");
        }
        return range_values(number(parts[0]), number(parts[1]), number(parts[2]));
    }
    std::vector<double> values;
    for (const auto& p : parts) {
        values.push_back(number(p));
    }
    return values;
}

std::vector<double> grid_from_json(const nlohmann::json& doc)
{
    try {
        if (doc.is_array()) {
            return doc.get<std::vector<double>>();
        }
        if (doc.is_object()) {
            return range_values(doc.at("start").get<double>(), doc.at("stop").get<double>(),
                                doc.at("step").get<double>());
        }
        if (doc.is_string()) {
            return parse_grid(doc.get<std::string>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("grid: ") + e.what());
    }
    throw ConfigError("grid must be an array, a {start, stop, step} object or a string");
}

}  // namespace qdent::cli
