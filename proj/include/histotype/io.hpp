#pragma once

// Small text/CSV/hash helpers shared by every module's file format.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace histotype::io {

namespace fs = std::filesystem;

/// Splits one CSV line on commas. Fields are never quoted.
std::vector<std::string> split_csv(std::string_view line);

/// Reads a header-checked CSV. Each row keeps its 1-based file line number so
/// parse errors can point at it.
struct CsvRow {
    std::size_t line = 0;
    std::vector<std::string> fields;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<CsvRow> rows;
};

/// Throws ValidationError if the file is missing, the header differs from
/// `expected_header` (when non-empty), or a row has the wrong field count.
/// `optional_columns` may follow the expected header, in order.
CsvTable read_csv(const fs::path& path, const std::vector<std::string>& expected_header,
                  const std::vector<std::string>& optional_columns = {});

/// 17 significant digits: round-trips any double exactly.
std::string format_real(double v);

double parse_real(std::string_view s, std::string_view context);
long long parse_int(std::string_view s, std::string_view context);

std::string trim(std::string_view s);

/// Writes via a temporary sibling file then renames, so readers never see a
/// half-written output.
void write_file(const fs::path& path, std::string_view contents);
std::string read_file(const fs::path& path);

std::string sha256_hex(std::string_view data);
std::string sha256_file(const fs::path& path);

}  // namespace histotype::io
