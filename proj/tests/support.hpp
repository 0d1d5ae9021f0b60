#pragma once

// Shared fixtures: scratch directories, schemes, and a seeded generator for
// property tests.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "cdt/design.hpp"

namespace cdt::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("cdt-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::filesystem::path data_dir() { return CDT_TEST_DATA_DIR; }

/// The five two-level monitor attributes.
inline design::AttributeScheme monitor_scheme() {
  return design::AttributeScheme::load(data_dir() / "monitor_scheme.json");
}

inline design::AttributeScheme small_scheme(std::size_t k) {
  std::vector<design::Attribute> attrs;
  for (std::size_t j = 0; j < k; ++j) {
    const std::string name = "F" + std::to_string(j + 1);
    attrs.push_back({name, {name + "-lo", name + "-hi"}});
  }
  return design::AttributeScheme(std::move(attrs));
}

inline const std::vector<double>& reference_coefficients() {
  static const std::vector<double> c{0.484, 0.033, -0.774, 0.376, -0.688};
  return c;
}
inline constexpr double kReferenceIntercept = 0.795;

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : engine_(seed) {}
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }
  double real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  bool coin() { return integer(0, 1) == 1; }
  std::string word() {
    static const char* words[] = {"screen", "panel", "bright", "oled", "refresh", "colour", "stand",
                                  "ultrawide", "gaming", "office", "glossy", "matte", "hdr", "cable"};
    return words[integer(0, 13)];
  }
  std::string sentence(int n) {
    std::string s;
    for (int i = 0; i < n; ++i) s += (i ? " " : "") + word();
    return s;
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace cdt::testing
