#pragma once

// Attribute schemes, full and two-level fractional factorial designs, and
// foldover (mirror) paired choice tasks.

#include <cstddef>
#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace cdt::design {

class DesignError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Attribute {
  std::string name;
  std::vector<std::string> levels;  // >= 2, distinct

  bool operator==(const Attribute&) const = default;
};

class AttributeScheme {
 public:
  AttributeScheme() = default;
  /// Throws DesignError on duplicate names, duplicate levels or fewer than
  /// two levels.
  explicit AttributeScheme(std::vector<Attribute> attributes);

  const std::vector<Attribute>& attributes() const { return attributes_; }
  std::size_t size() const { return attributes_.size(); }
  const Attribute& operator[](std::size_t i) const { return attributes_[i]; }
  bool all_two_level() const;
  /// Index of the named attribute; throws when absent.
  std::size_t index_of(std::string_view name) const;

  static AttributeScheme from_json(const nlohmann::json& j);
  /// Parse errors are reported with their byte offset.
  static AttributeScheme from_json_text(std::string_view text);
  static AttributeScheme load(const std::filesystem::path& path);
  nlohmann::ordered_json to_json() const;

  bool operator==(const AttributeScheme&) const = default;

 private:
  std::vector<Attribute> attributes_;
};

/// One level index (0-based) per attribute.
struct Profile {
  std::vector<int> levels;

  auto operator<=>(const Profile&) const = default;
};

void check_profile(const AttributeScheme& scheme, const Profile& profile);

/// Runs are in +/-1 coding: level index 0 -> -1, level index 1 -> +1.
struct DesignMatrix {
  std::vector<std::vector<int>> runs;
  std::vector<std::string> column_letters;  // "A", "B", ...
  std::vector<std::string> generators;      // e.g. "E=ABCD"
  std::vector<std::string> defining_words;  // e.g. "ABCDE"

  std::size_t run_count() const { return runs.size(); }
  std::size_t column_count() const { return column_letters.size(); }
};

struct ChoiceTask {
  std::string task_id;
  Profile option_a;
  Profile option_b;

  bool operator==(const ChoiceTask&) const = default;
};

/// Every profile, last attribute varying fastest.
std::vector<Profile> full_factorial(const AttributeScheme& scheme);

/// 2^(k-p) runs. The first k-p columns are a full factorial; each of the p
/// remaining columns is the product of a generator subset of base columns,
/// chosen from the highest-order interactions down.
DesignMatrix fractional_factorial(const AttributeScheme& scheme, std::size_t fraction_exponent);

Profile run_profile(const DesignMatrix& design, std::size_t run);

/// Flips every attribute of a two-level scheme.
Profile foldover(const AttributeScheme& scheme, const Profile& profile);

/// Task per run: the run's profile as option A, its mirror as option B.
std::vector<ChoiceTask> build_paired_tasks(const AttributeScheme& scheme,
                                           const DesignMatrix& design);

struct ColumnPair {
  std::size_t first = 0;
  std::size_t second = 0;
  long long inner_product = 0;
};

struct OrthogonalityReport {
  std::vector<std::pair<std::size_t, std::size_t>> balance;  // (#-1, #+1) per column
  std::vector<ColumnPair> pairs;
  std::vector<std::string> failures;
  bool passed = false;

  nlohmann::ordered_json to_json(const AttributeScheme& scheme) const;
};

OrthogonalityReport verify_orthogonality(const AttributeScheme& scheme, const DesignMatrix& design);

/// Length of the shortest word in the defining contrast subgroup; 0 for a
/// full factorial (no words).
std::size_t resolution(const DesignMatrix& design);

std::string design_csv(const AttributeScheme& scheme, const DesignMatrix& design);
nlohmann::ordered_json tasks_to_json(const AttributeScheme& scheme,
                                     const std::vector<ChoiceTask>& tasks);
/// Inverse of tasks_to_json; level labels are resolved against scheme.
std::vector<ChoiceTask> tasks_from_json(const AttributeScheme& scheme, const nlohmann::json& j);

}  // namespace cdt::design
