#include "qdent/io.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <sstream>

#include "qdent/error.hpp"

namespace qdent::io {

namespace {

std::string trim(std::string_view s)
{
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

}  // namespace

std::vector<CsvRow> read_csv(std::istream& in, bool has_header)
{
    std::vector<CsvRow> rows;
    std::string line;
    std::size_t number = 0;
    bool header_pending = has_header;
    while (std::getline(in, line)) {
        ++number;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped.front() == '#') {
            continue;
        }
        if (header_pending) {
            header_pending = false;
            continue;
        }
        CsvRow row;
        row.line = number;
        std::size_t start = 0;
        while (true) {
            const auto comma = stripped.find(',', start);
            row.fields.push_back(trim(std::string_view(stripped).substr(
                start, comma == std::string::npos ? std::string::npos : comma - start)));
            if (comma == std::string::npos) {
                break;
            }
            start = comma + 1;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

double parse_double(const std::string& text, std::size_t line, std::string_view column)
{
    double value = 0.0;
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc() || ptr != end) {
        throw DataError("line " + std::to_string(line) + ": column '" + std::string(column) +
                        "' is not a number: '" + text + "'");
    }
    return value;
}

long long parse_integer(const std::string& text, std::size_t line, std::string_view column)
{
    long long value = 0;
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc() || ptr != end) {
        throw DataError("line " + std::to_string(line) + ": column '" + std::string(column) +
                        "' is not an integer: '" + text + "'");
    }
    return value;
}

std::string format_double(double value)
{
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    if (ec != std::errc()) {
        return "nan";
    }
    return std::string(buf, ptr);
}

std::string read_text_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view content)
{
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

}  // namespace qdent::io
