#pragma once

// Embedding providers, sealed per-user vector indexes and cutoff-aware
// similarity search.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cdt/corpus.hpp"
#include "cdt/kernels.hpp"

namespace cdt::retrieval {

inline constexpr std::size_t kDefaultDimension = 256;
inline constexpr std::size_t kDefaultK = 8;
inline constexpr std::uint32_t kIndexFormatVersion = 1;

struct EmbeddingVector {
  std::vector<float> values;

  std::size_t dimension() const { return values.size(); }
  bool operator==(const EmbeddingVector&) const = default;
};

/// Failure reported by an embedding provider. status is the HTTP status when
/// there was one, 0 otherwise.
class EmbeddingError : public std::runtime_error {
 public:
  EmbeddingError(const std::string& what, int status, bool retryable)
      : std::runtime_error(what), status_(status), retryable_(retryable) {}
  int status() const { return status_; }
  bool retryable() const { return retryable_; }

 private:
  int status_;
  bool retryable_;
};

class RetrievalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::string id() const = 0;
  virtual std::size_t dimension() const = 0;
  /// One vector per input text, in input order.
  virtual std::vector<EmbeddingVector> embed_batch(const std::vector<std::string>& texts) = 0;

  EmbeddingVector embed(const std::string& text);
};

/// Lower-cased alphanumeric runs.
std::vector<std::string> tokenize(std::string_view text);

/// Offline provider: hashed bag of tokens, L2-normalized. The empty (or
/// token-free) text maps to the zero vector.
class HashingEmbedder final : public EmbeddingProvider {
 public:
  explicit HashingEmbedder(std::size_t dimension = kDefaultDimension);
  std::string id() const override;
  std::size_t dimension() const override { return dimension_; }
  std::vector<EmbeddingVector> embed_batch(const std::vector<std::string>& texts) override;

 private:
  std::size_t dimension_;
};

struct RemoteEmbedderConfig {
  std::string endpoint;  // full URL
  std::string model_id;
  std::string api_key;  // sent as a bearer token
  std::size_t dimension = 0;
  std::chrono::seconds timeout{60};
};

/// Client for {model_id, texts[]} -> {vectors[][]} over HTTP(S).
class RemoteEmbedder final : public EmbeddingProvider {
 public:
  explicit RemoteEmbedder(RemoteEmbedderConfig config);
  std::string id() const override;
  std::size_t dimension() const override { return config_.dimension; }
  std::vector<EmbeddingVector> embed_batch(const std::vector<std::string>& texts) override;

 private:
  RemoteEmbedderConfig config_;
};

struct RetryPolicy {
  int max_retries = 2;
  std::chrono::milliseconds backoff{0};  // doubled after each failed attempt
};

/// Retries retryable EmbeddingErrors; the last error is rethrown once retries
/// are exhausted. Also checks dimension and finiteness of what comes back.
std::vector<EmbeddingVector> embed_with_retry(EmbeddingProvider& provider,
                                              const std::vector<std::string>& texts,
                                              const RetryPolicy& policy = {});

struct IndexEntry {
  std::string doc_id;
  std::int64_t timestamp = 0;

  bool operator==(const IndexEntry&) const = default;
};

/// Immutable once constructed.
class UserVectorIndex {
 public:
  /// Validates unique doc_ids, shared dimension and finite values.
  static UserVectorIndex from_entries(std::string user_id, std::string provider_id,
                                      std::size_t dimension, std::vector<IndexEntry> entries,
                                      const std::vector<EmbeddingVector>& vectors);

  const std::string& user_id() const { return user_id_; }
  const std::string& provider_id() const { return provider_id_; }
  std::size_t dimension() const { return dimension_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<IndexEntry>& entries() const { return entries_; }
  std::span<const float> vector(std::size_t i) const {
    return {data_.data() + i * dimension_, dimension_};
  }
  std::span<const float> matrix() const { return data_; }
  float norm(std::size_t i) const { return norms_[i]; }

  /// Little-endian layout: u32 format_version, str user_id, str provider_id,
  /// u32 dimension, u64 entry_count; then per entry str doc_id, i64
  /// timestamp, dimension x f32. str = u32 byte length + UTF-8 bytes.
  std::string serialize() const;
  static UserVectorIndex deserialize(std::string_view bytes);
  void save(const std::filesystem::path& path) const;
  static UserVectorIndex load(const std::filesystem::path& path);

  bool operator==(const UserVectorIndex& other) const {
    return user_id_ == other.user_id_ && provider_id_ == other.provider_id_ &&
           dimension_ == other.dimension_ && entries_ == other.entries_ && data_ == other.data_;
  }

 private:
  UserVectorIndex() = default;

  std::string user_id_;
  std::string provider_id_;
  std::size_t dimension_ = 0;
  std::vector<IndexEntry> entries_;
  std::vector<float> data_;  // row-major, entries_.size() x dimension_
  std::vector<float> norms_;
};

/// Embeds every document; any failure after retries fails the whole build.
UserVectorIndex build_index(const corpus::UserCorpus& corpus, EmbeddingProvider& provider,
                            const RetryPolicy& policy = {}, std::size_t batch_size = 64);

struct RetrievalQuery {
  std::string text;
  std::size_t k = kDefaultK;
  std::optional<std::int64_t> cutoff;  // keep timestamp < cutoff
  std::set<std::string> exclude_doc_ids;
};

struct Hit {
  std::string doc_id;
  double score = 0.0;  // cosine similarity in [-1, 1]
  std::int64_t timestamp = 0;
};

/// Exact scan. Ranked by score descending, then newer timestamp, then doc_id.
std::vector<Hit> retrieve(const UserVectorIndex& index, const EmbeddingVector& query_vector,
                          const RetrievalQuery& query,
                          const kernels::KernelTable& kernels = kernels::active());

/// Embeds query.text with provider first; provider must match the index.
std::vector<Hit> retrieve(const UserVectorIndex& index, EmbeddingProvider& provider,
                          const RetrievalQuery& query);

/// The n newest eligible doc_ids, newest first.
std::vector<std::string> fallback_recent(const UserVectorIndex& index, std::size_t n,
                                         std::optional<std::int64_t> cutoff,
                                         const std::set<std::string>& exclude_doc_ids = {});

}  // namespace cdt::retrieval
