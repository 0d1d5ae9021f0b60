#pragma once

// Per-user review corpora: the memory substrate each twin retrieves from.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace cdt::corpus {

inline constexpr std::size_t kDefaultCap = 1000;

enum class DocKind { post, comment };

std::string_view to_string(DocKind kind);
std::optional<DocKind> parse_kind(std::string_view s);

struct ReviewDocument {
  std::string doc_id;
  std::string user_id;
  std::int64_t timestamp = 0;  // UTC epoch seconds
  std::string community;
  DocKind kind = DocKind::post;
  std::string text;
  std::optional<std::string> parent_id;

  bool operator==(const ReviewDocument&) const = default;
};

/// Descending timestamp, ties by ascending doc_id.
bool newer_first(const ReviewDocument& a, const ReviewDocument& b);

struct UserCorpus {
  std::string user_id;
  std::vector<ReviewDocument> documents;  // newer_first order
  std::size_t cap = kDefaultCap;

  bool operator==(const UserCorpus&) const = default;
};

/// A raw record that cannot become a ReviewDocument.
class RecordError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class StoreError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Validates one raw record. Text is whitespace-normalized; a numeric string
/// timestamp is accepted.
ReviewDocument parse_record(const nlohmann::json& record);
nlohmann::ordered_json to_json(const ReviewDocument& doc);

struct Rejection {
  std::size_t line = 0;  // 1-based input line
  std::string reason;
};

struct IngestReport {
  std::size_t accepted = 0;  // records that passed validation
  std::size_t rejected = 0;
  std::size_t deduped = 0;  // accepted records whose doc_id was already stored
  std::size_t capped = 0;   // documents dropped to honor the per-user cap
  std::vector<Rejection> rejections;

  nlohmann::ordered_json to_json() const;
};

/// In-memory view of the review store; save/open persist it as one JSONL
/// file per user plus an index file.
class CorpusStore {
 public:
  /// Reads JSONL records. Malformed lines are rejected and counted, never
  /// dropped silently. Ingesting the same stream again leaves the state
  /// unchanged.
  IngestReport ingest(std::istream& jsonl, std::size_t cap = kDefaultCap);
  IngestReport ingest(const std::vector<std::string>& lines, std::size_t cap = kDefaultCap);

  std::optional<UserCorpus> load_user(std::string_view user_id) const;
  std::vector<std::string> user_ids() const;
  std::size_t user_count() const { return users_.size(); }
  std::size_t document_count() const { return doc_owner_.size(); }

  void save(const std::filesystem::path& dir) const;
  static CorpusStore open(const std::filesystem::path& dir);

  bool operator==(const CorpusStore&) const = default;

 private:
  void add_document(ReviewDocument doc, std::size_t cap, IngestReport& report,
                    std::set<std::string>& touched);
  void enforce_cap(UserCorpus& corpus, IngestReport& report);

  std::map<std::string, UserCorpus, std::less<>> users_;
  std::map<std::string, std::string, std::less<>> doc_owner_;  // doc_id -> user_id
};

/// File name used for a user's partition inside the store directory.
std::string partition_file_name(std::string_view user_id);

/// Documents with timestamp strictly before cutoff, order preserved.
UserCorpus filter_before(const UserCorpus& corpus, std::int64_t cutoff);

}  // namespace cdt::corpus
