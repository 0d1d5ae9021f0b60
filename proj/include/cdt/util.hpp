#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cdt::util {

std::string trim(std::string_view s);
std::string to_lower(std::string_view s);
/// Trim and collapse every internal run of whitespace to a single space.
std::string normalize_whitespace(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

/// UTC epoch seconds rendered as 2023-05-01T12:00:00Z.
std::string format_utc(std::int64_t epoch_seconds);

std::string read_file(const std::filesystem::path& path);
/// Writes via a temporary sibling and rename.
void write_file(const std::filesystem::path& path, std::string_view contents);

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

// Minimal RFC 4180 CSV.
std::string csv_escape(std::string_view field);
std::string csv_row(const std::vector<std::string>& fields);
/// Parses a whole document; quoted fields may span lines.
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

/// splitmix64 finalizer, used to derive independent seeds.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view s);
/// Uniform double in [0, 1) from the top 53 bits.
inline double unit_double(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

}  // namespace cdt::util
