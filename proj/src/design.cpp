#include "cdt/design.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <map>
#include <numeric>

#include "cdt/util.hpp"

namespace cdt::design {

using nlohmann::json;

AttributeScheme::AttributeScheme(std::vector<Attribute> attributes)
    : attributes_(std::move(attributes)) {
  std::set<std::string> names;
  for (const auto& a : attributes_) {
    if (a.name.empty()) throw DesignError("attribute name must be non-empty");
    if (!names.insert(a.name).second) throw DesignError("duplicate attribute name: " + a.name);
    if (a.levels.size() < 2) throw DesignError("attribute " + a.name + " needs at least 2 levels");
    std::set<std::string> labels(a.levels.begin(), a.levels.end());
    if (labels.size() != a.levels.size()) {
      throw DesignError("attribute " + a.name + " has duplicate level labels");
    }
  }
}

bool AttributeScheme::all_two_level() const {
  return std::all_of(attributes_.begin(), attributes_.end(),
                     [](const Attribute& a) { return a.levels.size() == 2; });
}

std::size_t AttributeScheme::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < attributes_.size(); ++i) {
    if (attributes_[i].name == name) return i;
  }
  throw DesignError("unknown attribute: " + std::string(name));
}

AttributeScheme AttributeScheme::from_json(const json& j) {
  std::vector<Attribute> attributes;
  try {
    for (const auto& a : j.at("attributes")) {
      attributes.push_back({a.at("name").get<std::string>(),
                            a.at("levels").get<std::vector<std::string>>()});
    }
  } catch (const json::exception& e) {
    throw DesignError(std::string("invalid scheme: ") + e.what());
  }
  return AttributeScheme(std::move(attributes));
}

AttributeScheme AttributeScheme::from_json_text(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DesignError("scheme JSON parse error at byte " + std::to_string(e.byte) + ": " +
                      e.what());
  }
  return from_json(j);
}

AttributeScheme AttributeScheme::load(const std::filesystem::path& path) {
  std::string text;
  try {
    text = util::read_file(path);
  } catch (const std::runtime_error& e) {
    throw DesignError(e.what());
  }
  return from_json_text(text);
}

nlohmann::ordered_json AttributeScheme::to_json() const {
  nlohmann::ordered_json j;
  auto& list = j["attributes"] = nlohmann::ordered_json::array();
  for (const auto& a : attributes_) list.push_back({{"name", a.name}, {"levels", a.levels}});
  return j;
}

void check_profile(const AttributeScheme& scheme, const Profile& profile) {
  if (profile.levels.size() != scheme.size()) {
    throw DesignError("profile assigns " + std::to_string(profile.levels.size()) +
                      " attributes, scheme has " + std::to_string(scheme.size()));
  }
  for (std::size_t j = 0; j < scheme.size(); ++j) {
    const int level = profile.levels[j];
    if (level < 0 || static_cast<std::size_t>(level) >= scheme[j].levels.size()) {
      throw DesignError("invalid level index for " + scheme[j].name);
    }
  }
}

std::vector<Profile> full_factorial(const AttributeScheme& scheme) {
  std::vector<Profile> out;
  if (scheme.size() == 0) return out;
  Profile current{std::vector<int>(scheme.size(), 0)};
  while (true) {
    out.push_back(current);
    std::size_t j = scheme.size();
    while (j > 0) {
      --j;
      if (++current.levels[j] < static_cast<int>(scheme[j].levels.size())) break;
      current.levels[j] = 0;
      if (j == 0) return out;
    }
  }
}

namespace {

std::string letter(std::size_t i) {
  if (i < 26) return std::string(1, static_cast<char>('A' + i));
  return "X" + std::to_string(i);
}

// Subsets of {0..m-1} with at least two members, largest first, each size
// in lexicographic order.
std::vector<std::vector<std::size_t>> interaction_subsets(std::size_t m) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t size = m; size >= 2; --size) {
    std::vector<std::size_t> idx(size);
    std::iota(idx.begin(), idx.end(), 0);
    while (true) {
      out.push_back(idx);
      std::size_t i = size;
      while (i > 0 && idx[i - 1] == m - size + i - 1) --i;
      if (i == 0) break;
      ++idx[i - 1];
      for (std::size_t t = i; t < size; ++t) idx[t] = idx[t - 1] + 1;
    }
  }
  return out;
}

}  // namespace

DesignMatrix fractional_factorial(const AttributeScheme& scheme, std::size_t p) {
  const std::size_t k = scheme.size();
  if (k == 0) throw DesignError("scheme has no attributes");
  if (!scheme.all_two_level()) {
    throw DesignError("fractional factorial designs need every attribute to have exactly 2 levels");
  }
  if (p >= k) {
    throw DesignError("fraction exponent " + std::to_string(p) + " must be below the attribute count " +
                      std::to_string(k));
  }
  const std::size_t base = k - p;
  if (base >= 31) throw DesignError("design too large");
  const auto subsets = interaction_subsets(base);
  if (subsets.size() < p) {
    throw DesignError("not enough interaction columns to generate " + std::to_string(p) +
                      " extra factors from " + std::to_string(base) + " base factors");
  }

  DesignMatrix d;
  for (std::size_t j = 0; j < k; ++j) d.column_letters.push_back(letter(j));
  for (std::size_t g = 0; g < p; ++g) {
    std::string word;
    for (auto b : subsets[g]) word += d.column_letters[b];
    d.generators.push_back(d.column_letters[base + g] + "=" + word);
    d.defining_words.push_back(word + d.column_letters[base + g]);
  }

  const std::size_t n = std::size_t{1} << base;
  d.runs.assign(n, std::vector<int>(k, 0));
  for (std::size_t r = 0; r < n; ++r) {
    auto& row = d.runs[r];
    for (std::size_t j = 0; j < base; ++j) {
      row[j] = ((r >> (base - 1 - j)) & 1U) != 0 ? 1 : -1;
    }
    for (std::size_t g = 0; g < p; ++g) {
      int v = 1;
      for (auto b : subsets[g]) v *= row[b];
      row[base + g] = v;
    }
  }
  return d;
}

Profile run_profile(const DesignMatrix& design, std::size_t run) {
  Profile p;
  for (int v : design.runs.at(run)) p.levels.push_back(v > 0 ? 1 : 0);
  return p;
}

Profile foldover(const AttributeScheme& scheme, const Profile& profile) {
  if (!scheme.all_two_level()) throw DesignError("foldover needs a two-level scheme");
  check_profile(scheme, profile);
  Profile out = profile;
  for (auto& level : out.levels) level = 1 - level;
  return out;
}

std::vector<ChoiceTask> build_paired_tasks(const AttributeScheme& scheme,
                                           const DesignMatrix& design) {
  const std::size_t n = design.run_count();
  const int width = std::max(2, static_cast<int>(std::to_string(n).size()));
  std::vector<ChoiceTask> tasks;
  tasks.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::string id = std::to_string(r + 1);
    id = "T" + std::string(static_cast<std::size_t>(width) - id.size(), '0') + id;
    auto a = run_profile(design, r);
    auto b = foldover(scheme, a);
    tasks.push_back({id, std::move(a), std::move(b)});
  }
  return tasks;
}

nlohmann::ordered_json OrthogonalityReport::to_json(const AttributeScheme& scheme) const {
  nlohmann::ordered_json j;
  j["passed"] = passed;
  auto& bal = j["balance"] = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < balance.size(); ++c) {
    bal.push_back({{"attribute", c < scheme.size() ? scheme[c].name : std::to_string(c)},
                   {"minus", balance[c].first},
                   {"plus", balance[c].second}});
  }
  auto& ip = j["inner_products"] = nlohmann::ordered_json::array();
  for (const auto& p : pairs) {
    ip.push_back({{"first", p.first < scheme.size() ? scheme[p.first].name : std::to_string(p.first)},
                  {"second", p.second < scheme.size() ? scheme[p.second].name : std::to_string(p.second)},
                  {"inner_product", p.inner_product}});
  }
  j["failures"] = failures;
  return j;
}

OrthogonalityReport verify_orthogonality(const AttributeScheme& scheme, const DesignMatrix& design) {
  OrthogonalityReport report;
  const std::size_t k = design.column_count();
  const auto name = [&](std::size_t c) {
    return c < scheme.size() ? scheme[c].name : design.column_letters[c];
  };
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t minus = 0;
    std::size_t plus = 0;
    for (const auto& row : design.runs) (row[c] < 0 ? minus : plus)++;
    report.balance.emplace_back(minus, plus);
    if (minus != plus) {
      report.failures.push_back("column " + name(c) + " unbalanced: " + std::to_string(minus) +
                                " x -1, " + std::to_string(plus) + " x +1");
    }
  }
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = a + 1; b < k; ++b) {
      long long sum = 0;
      for (const auto& row : design.runs) sum += row[a] * row[b];
      report.pairs.push_back({a, b, sum});
      if (sum != 0) {
        report.failures.push_back("columns " + name(a) + " and " + name(b) +
                                  " not orthogonal: inner product " + std::to_string(sum));
      }
    }
  }
  report.passed = report.failures.empty();
  return report;
}

std::size_t resolution(const DesignMatrix& design) {
  const std::size_t p = design.defining_words.size();
  if (p == 0) return 0;
  const std::size_t k = design.column_count();
  std::map<std::string, std::size_t> column_of;
  for (std::size_t c = 0; c < k; ++c) column_of[design.column_letters[c]] = c;
  // Words as bitmasks over columns; multiply = symmetric difference.
  std::vector<std::vector<bool>> words;
  for (const auto& w : design.defining_words) {
    std::vector<bool> mask(k, false);
    std::size_t i = 0;
    while (i < w.size()) {
      std::size_t len = 1;
      if (w[i] == 'X') {
        while (i + len < w.size() && std::isdigit(static_cast<unsigned char>(w[i + len]))) ++len;
      }
      mask[column_of.at(w.substr(i, len))] = true;
      i += len;
    }
    words.push_back(std::move(mask));
  }
  std::size_t best = k + 1;
  for (std::size_t subset = 1; subset < (std::size_t{1} << p); ++subset) {
    std::vector<bool> acc(k, false);
    for (std::size_t g = 0; g < p; ++g) {
      if ((subset >> g) & 1U) {
        for (std::size_t c = 0; c < k; ++c) acc[c] = acc[c] != words[g][c];
      }
    }
    best = std::min<std::size_t>(best, static_cast<std::size_t>(std::count(acc.begin(), acc.end(), true)));
  }
  return best;
}

std::string design_csv(const AttributeScheme& scheme, const DesignMatrix& design) {
  std::vector<std::string> header;
  for (const auto& a : scheme.attributes()) header.push_back(a.name);
  std::string out = util::csv_row(header);
  for (std::size_t r = 0; r < design.run_count(); ++r) {
    const auto p = run_profile(design, r);
    std::vector<std::string> row;
    for (std::size_t j = 0; j < scheme.size(); ++j) row.push_back(scheme[j].levels[p.levels[j]]);
    out += util::csv_row(row);
  }
  return out;
}

namespace {

nlohmann::ordered_json profile_json(const AttributeScheme& scheme, const Profile& p) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (std::size_t a = 0; a < scheme.size(); ++a) j[scheme[a].name] = scheme[a].levels[p.levels[a]];
  return j;
}

Profile profile_from_json(const AttributeScheme& scheme, const json& j) {
  Profile p{std::vector<int>(scheme.size(), -1)};
  if (!j.is_object() || j.size() != scheme.size()) {
    throw DesignError("task option must assign every attribute exactly once");
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto a = scheme.index_of(it.key());
    const auto label = it.value().get<std::string>();
    const auto& levels = scheme[a].levels;
    const auto pos = std::find(levels.begin(), levels.end(), label);
    if (pos == levels.end()) throw DesignError("unknown level '" + label + "' for " + it.key());
    p.levels[a] = static_cast<int>(pos - levels.begin());
  }
  return p;
}

}  // namespace

nlohmann::ordered_json tasks_to_json(const AttributeScheme& scheme,
                                     const std::vector<ChoiceTask>& tasks) {
  auto j = nlohmann::ordered_json::array();
  for (const auto& t : tasks) {
    j.push_back({{"task_id", t.task_id},
                 {"option_a", profile_json(scheme, t.option_a)},
                 {"option_b", profile_json(scheme, t.option_b)}});
  }
  return j;
}

std::vector<ChoiceTask> tasks_from_json(const AttributeScheme& scheme, const json& j) {
  std::vector<ChoiceTask> tasks;
  try {
    for (const auto& t : j) {
      ChoiceTask task{t.at("task_id").get<std::string>(), profile_from_json(scheme, t.at("option_a")),
                      profile_from_json(scheme, t.at("option_b"))};
      if (task.option_a == task.option_b) throw DesignError("task " + task.task_id + " compares a profile with itself");
      tasks.push_back(std::move(task));
    }
  } catch (const json::exception& e) {
    throw DesignError(std::string("invalid tasks file: ") + e.what());
  }
  return tasks;
}

}  // namespace cdt::design
