#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace qdent::io {

struct CsvRow {
    std::size_t line = 0;  // 1-based line number in the source
    std::vector<std::string> fields;
};

// Comma-separated rows; blank lines and lines starting with '#' are skipped.
// The first remaining row is treated as a header and dropped when
// `has_header` is set.
std::vector<CsvRow> read_csv(std::istream& in, bool has_header = true);

double parse_double(const std::string& text, std::size_t line, std::string_view column);
long long parse_integer(const std::string& text, std::size_t line, std::string_view column);

// Shortest round-trippable decimal form, locale independent.
std::string format_double(double value);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view content);

}  // namespace qdent::io
