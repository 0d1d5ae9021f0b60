#include "cdt/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <istream>
#include <sstream>

#include "cdt/util.hpp"

namespace cdt::corpus {

using nlohmann::json;

std::string_view to_string(DocKind kind) {
  return kind == DocKind::post ? "post" : "comment";
}

std::optional<DocKind> parse_kind(std::string_view s) {
  if (s == "post") return DocKind::post;
  if (s == "comment") return DocKind::comment;
  return std::nullopt;
}

bool newer_first(const ReviewDocument& a, const ReviewDocument& b) {
  if (a.timestamp != b.timestamp) return a.timestamp > b.timestamp;
  return a.doc_id < b.doc_id;
}

namespace {

std::string required_string(const json& record, const char* key) {
  const auto it = record.find(key);
  if (it == record.end() || it->is_null()) {
    throw RecordError(std::string("missing field '") + key + "'");
  }
  if (!it->is_string()) throw RecordError(std::string("field '") + key + "' is not a string");
  auto value = it->get<std::string>();
  if (util::trim(value).empty()) throw RecordError(std::string("field '") + key + "' is empty");
  return value;
}

std::int64_t parse_timestamp(const json& record) {
  const auto it = record.find("timestamp");
  if (it == record.end() || it->is_null()) throw RecordError("missing field 'timestamp'");
  std::int64_t ts = 0;
  if (it->is_number_integer()) {
    ts = it->get<std::int64_t>();
  } else if (it->is_number_float()) {
    const double d = it->get<double>();
    if (d != static_cast<double>(static_cast<std::int64_t>(d))) {
      throw RecordError("unparsable timestamp");
    }
    ts = static_cast<std::int64_t>(d);
  } else if (it->is_string()) {
    const auto s = util::trim(it->get<std::string>());
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, ts);
    if (ec != std::errc{} || ptr != end || s.empty()) throw RecordError("unparsable timestamp");
  } else {
    throw RecordError("unparsable timestamp");
  }
  if (ts <= 0) throw RecordError("timestamp must be positive");
  return ts;
}

}  // namespace

ReviewDocument parse_record(const json& record) {
  if (!record.is_object()) throw RecordError("record is not a JSON object");
  ReviewDocument doc;
  doc.doc_id = required_string(record, "doc_id");
  doc.user_id = required_string(record, "user_id");
  doc.timestamp = parse_timestamp(record);
  doc.text = util::normalize_whitespace(required_string(record, "text"));

  if (const auto it = record.find("community"); it != record.end() && !it->is_null()) {
    if (!it->is_string()) throw RecordError("field 'community' is not a string");
    doc.community = it->get<std::string>();
  }
  if (const auto it = record.find("kind"); it != record.end() && !it->is_null()) {
    const auto kind = it->is_string() ? parse_kind(it->get<std::string>()) : std::nullopt;
    if (!kind) throw RecordError("field 'kind' must be \"post\" or \"comment\"");
    doc.kind = *kind;
  }
  if (const auto it = record.find("parent_id"); it != record.end() && !it->is_null()) {
    if (!it->is_string()) throw RecordError("field 'parent_id' is not a string");
    doc.parent_id = it->get<std::string>();
  }
  return doc;
}

nlohmann::ordered_json to_json(const ReviewDocument& doc) {
  nlohmann::ordered_json j;
  j["doc_id"] = doc.doc_id;
  j["user_id"] = doc.user_id;
  j["timestamp"] = doc.timestamp;
  j["community"] = doc.community;
  j["kind"] = to_string(doc.kind);
  j["text"] = doc.text;
  if (doc.parent_id) j["parent_id"] = *doc.parent_id;
  return j;
}

nlohmann::ordered_json IngestReport::to_json() const {
  nlohmann::ordered_json j;
  j["accepted"] = accepted;
  j["rejected"] = rejected;
  j["deduped"] = deduped;
  j["capped"] = capped;
  auto& list = j["rejections"] = nlohmann::ordered_json::array();
  for (const auto& r : rejections) list.push_back({{"line", r.line}, {"reason", r.reason}});
  return j;
}

void CorpusStore::add_document(ReviewDocument doc, std::size_t cap, IngestReport& report,
                               std::set<std::string>& touched) {
  ++report.accepted;
  if (doc_owner_.contains(doc.doc_id)) {
    ++report.deduped;
    return;
  }
  auto [it, inserted] = users_.try_emplace(doc.user_id);
  if (inserted) it->second.user_id = doc.user_id;
  it->second.cap = cap;
  doc_owner_.emplace(doc.doc_id, doc.user_id);
  touched.insert(doc.user_id);
  it->second.documents.push_back(std::move(doc));
}

void CorpusStore::enforce_cap(UserCorpus& corpus, IngestReport& report) {
  auto& docs = corpus.documents;
  std::sort(docs.begin(), docs.end(), newer_first);
  if (docs.size() <= corpus.cap) return;
  for (auto it = docs.begin() + static_cast<std::ptrdiff_t>(corpus.cap); it != docs.end(); ++it) {
    doc_owner_.erase(it->doc_id);
  }
  report.capped += docs.size() - corpus.cap;
  docs.resize(corpus.cap);
}

IngestReport CorpusStore::ingest(std::istream& jsonl, std::size_t cap) {
  std::vector<std::string> lines;
  for (std::string line; std::getline(jsonl, line);) lines.push_back(std::move(line));
  return ingest(lines, cap);
}

IngestReport CorpusStore::ingest(const std::vector<std::string>& lines, std::size_t cap) {
  if (cap == 0) throw std::invalid_argument("cap must be positive");
  IngestReport report;
  std::set<std::string> touched;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (util::trim(lines[i]).empty()) continue;
    try {
      const auto record = json::parse(lines[i]);
      add_document(parse_record(record), cap, report, touched);
    } catch (const json::parse_error& e) {
      ++report.rejected;
      report.rejections.push_back({i + 1, std::string("invalid JSON: ") + e.what()});
    } catch (const RecordError& e) {
      ++report.rejected;
      report.rejections.push_back({i + 1, e.what()});
    }
  }
  for (const auto& user : touched) enforce_cap(users_.find(user)->second, report);
  return report;
}

std::optional<UserCorpus> CorpusStore::load_user(std::string_view user_id) const {
  const auto it = users_.find(user_id);
  if (it == users_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> CorpusStore::user_ids() const {
  std::vector<std::string> ids;
  ids.reserve(users_.size());
  for (const auto& [id, _] : users_) ids.push_back(id);
  return ids;
}

std::string partition_file_name(std::string_view user_id) {
  std::string safe;
  for (char c : user_id) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '-' || c == '_';
    safe.push_back(ok ? c : '_');
  }
  if (safe.size() > 64) safe.resize(64);
  char suffix[20];
  std::snprintf(suffix, sizeof suffix, "%08llx",
                static_cast<unsigned long long>(util::fnv1a64(user_id) & 0xffffffffULL));
  return safe + "-" + suffix + ".jsonl";
}

void CorpusStore::save(const std::filesystem::path& dir) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "users");
  nlohmann::ordered_json index;
  index["format_version"] = 1;
  auto& list = index["users"] = nlohmann::ordered_json::array();
  std::set<std::string> live_files;
  for (const auto& [id, corpus] : users_) {
    const auto file = partition_file_name(id);
    std::string body;
    for (const auto& doc : corpus.documents) {
      body += to_json(doc).dump();
      body.push_back('\n');
    }
    util::write_file(dir / "users" / file, body);
    live_files.insert(file);
    list.push_back({{"user_id", id},
                    {"file", "users/" + file},
                    {"documents", corpus.documents.size()},
                    {"cap", corpus.cap}});
  }
  for (const auto& entry : fs::directory_iterator(dir / "users")) {
    if (!live_files.contains(entry.path().filename().string())) fs::remove(entry.path());
  }
  util::write_file(dir / "index.json", index.dump(2) + "\n");
}

CorpusStore CorpusStore::open(const std::filesystem::path& dir) {
  const auto index_path = dir / "index.json";
  if (!std::filesystem::exists(index_path)) {
    throw StoreError("no corpus store at " + dir.string());
  }
  CorpusStore store;
  const auto index = json::parse(util::read_file(index_path));
  if (index.value("format_version", 0) != 1) throw StoreError("unsupported store format_version");
  for (const auto& entry : index.at("users")) {
    UserCorpus corpus;
    corpus.user_id = entry.at("user_id").get<std::string>();
    corpus.cap = entry.at("cap").get<std::size_t>();
    std::istringstream in(util::read_file(dir / entry.at("file").get<std::string>()));
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      auto doc = parse_record(json::parse(line));
      if (doc.user_id != corpus.user_id) {
        throw StoreError("document " + doc.doc_id + " filed under the wrong user");
      }
      if (!store.doc_owner_.emplace(doc.doc_id, doc.user_id).second) {
        throw StoreError("duplicate doc_id in store: " + doc.doc_id);
      }
      corpus.documents.push_back(std::move(doc));
    }
    if (!std::is_sorted(corpus.documents.begin(), corpus.documents.end(), newer_first)) {
      throw StoreError("partition for " + corpus.user_id + " is not in recency order");
    }
    if (corpus.documents.size() > corpus.cap) {
      throw StoreError("partition for " + corpus.user_id + " exceeds its cap");
    }
    const auto id = corpus.user_id;
    store.users_.emplace(id, std::move(corpus));
  }
  return store;
}

UserCorpus filter_before(const UserCorpus& corpus, std::int64_t cutoff) {
  UserCorpus out;
  out.user_id = corpus.user_id;
  out.cap = corpus.cap;
  for (const auto& doc : corpus.documents) {
    if (doc.timestamp < cutoff) out.documents.push_back(doc);
  }
  return out;
}

}  // namespace cdt::corpus
