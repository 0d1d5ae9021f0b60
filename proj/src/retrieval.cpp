#include "cdt/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <thread>
#include <unordered_set>

#include <json.hpp>

#include "cdt/http.hpp"
#include "cdt/util.hpp"

namespace cdt::retrieval {

using nlohmann::json;

EmbeddingVector EmbeddingProvider::embed(const std::string& text) {
  auto out = embed_batch({text});
  if (out.size() != 1) throw EmbeddingError("provider returned wrong vector count", 0, false);
  return std::move(out.front());
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isalnum(u) || u >= 0x80) {
      current.push_back(static_cast<char>(std::tolower(u)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

HashingEmbedder::HashingEmbedder(std::size_t dimension) : dimension_(dimension) {
  if (dimension == 0) throw std::invalid_argument("embedding dimension must be positive");
}

std::string HashingEmbedder::id() const {
  return "local-hash-v1-d" + std::to_string(dimension_);
}

std::vector<EmbeddingVector> HashingEmbedder::embed_batch(const std::vector<std::string>& texts) {
  std::vector<EmbeddingVector> out;
  out.reserve(texts.size());
  for (const auto& text : texts) {
    EmbeddingVector v{std::vector<float>(dimension_, 0.0f)};
    for (const auto& token : tokenize(text)) {
      v.values[util::fnv1a64(token) % dimension_] += 1.0f;
    }
    const float n2 = kernels::scalar::norm_sq(v.values.data(), dimension_);
    if (n2 > 0.0f) {
      const float inv = 1.0f / std::sqrt(n2);
      for (auto& x : v.values) x *= inv;
    }
    out.push_back(std::move(v));
  }
  return out;
}

RemoteEmbedder::RemoteEmbedder(RemoteEmbedderConfig config) : config_(std::move(config)) {
  if (config_.endpoint.empty()) throw std::invalid_argument("remote embedder needs an endpoint");
  if (config_.dimension == 0) throw std::invalid_argument("remote embedder needs a dimension");
}

std::string RemoteEmbedder::id() const { return "remote:" + config_.model_id; }

std::vector<EmbeddingVector> RemoteEmbedder::embed_batch(const std::vector<std::string>& texts) {
  const json request = {{"model_id", config_.model_id}, {"texts", texts}};
  http::Response response;
  try {
    response = http::post_json(config_.endpoint, config_.api_key, request.dump(), config_.timeout);
  } catch (const http::TransportError& e) {
    throw EmbeddingError(e.what(), 0, true);
  }
  if (response.status != 200) {
    throw EmbeddingError("embedding provider returned HTTP " + std::to_string(response.status),
                         response.status, http::is_retryable_status(response.status));
  }
  std::vector<EmbeddingVector> out;
  try {
    const auto body = json::parse(response.body);
    for (const auto& row : body.at("vectors")) out.push_back({row.get<std::vector<float>>()});
  } catch (const json::exception& e) {
    throw EmbeddingError(std::string("malformed embedding response: ") + e.what(),
                         response.status, false);
  }
  return out;
}

std::vector<EmbeddingVector> embed_with_retry(EmbeddingProvider& provider,
                                              const std::vector<std::string>& texts,
                                              const RetryPolicy& policy) {
  auto delay = policy.backoff;
  for (int attempt = 0;; ++attempt) {
    try {
      auto vectors = provider.embed_batch(texts);
      if (vectors.size() != texts.size()) {
        throw EmbeddingError("provider returned " + std::to_string(vectors.size()) +
                                 " vectors for " + std::to_string(texts.size()) + " texts",
                             0, false);
      }
      for (const auto& v : vectors) {
        if (v.dimension() != provider.dimension()) {
          throw EmbeddingError("provider returned dimension " + std::to_string(v.dimension()) +
                                   ", expected " + std::to_string(provider.dimension()),
                               0, false);
        }
        if (!std::all_of(v.values.begin(), v.values.end(),
                         [](float x) { return std::isfinite(x); })) {
          throw EmbeddingError("provider returned a non-finite value", 0, false);
        }
      }
      return vectors;
    } catch (const EmbeddingError& e) {
      if (!e.retryable() || attempt >= policy.max_retries) throw;
    }
    if (delay.count() > 0) {
      std::this_thread::sleep_for(delay);
      delay *= 2;
    }
  }
}

UserVectorIndex UserVectorIndex::from_entries(std::string user_id, std::string provider_id,
                                              std::size_t dimension,
                                              std::vector<IndexEntry> entries,
                                              const std::vector<EmbeddingVector>& vectors) {
  if (dimension == 0) throw RetrievalError("index dimension must be positive");
  if (entries.size() != vectors.size()) throw RetrievalError("entry/vector count mismatch");
  UserVectorIndex index;
  index.user_id_ = std::move(user_id);
  index.provider_id_ = std::move(provider_id);
  index.dimension_ = dimension;
  index.data_.reserve(entries.size() * dimension);
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!seen.insert(entries[i].doc_id).second) {
      throw RetrievalError("duplicate doc_id in index: " + entries[i].doc_id);
    }
    const auto& v = vectors[i].values;
    if (v.size() != dimension) throw RetrievalError("vector dimension mismatch for " + entries[i].doc_id);
    for (float x : v) {
      if (!std::isfinite(x)) throw RetrievalError("non-finite embedding for " + entries[i].doc_id);
    }
    index.data_.insert(index.data_.end(), v.begin(), v.end());
    index.norms_.push_back(std::sqrt(kernels::active().norm_sq(v.data(), dimension)));
  }
  index.entries_ = std::move(entries);
  return index;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string str() {
    const auto len = static_cast<std::size_t>(uint(4));
    need(len);
    std::string s(bytes_.substr(pos_, len));
    pos_ += len;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw RetrievalError("index file truncated");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string UserVectorIndex::serialize() const {
  std::string out;
  out.reserve(64 + entries_.size() * (24 + dimension_ * 4));
  put_u32(out, kIndexFormatVersion);
  put_str(out, user_id_);
  put_str(out, provider_id_);
  put_u32(out, static_cast<std::uint32_t>(dimension_));
  put_u64(out, entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    put_str(out, entries_[i].doc_id);
    put_u64(out, static_cast<std::uint64_t>(entries_[i].timestamp));
    for (float x : vector(i)) put_u32(out, std::bit_cast<std::uint32_t>(x));
  }
  return out;
}

UserVectorIndex UserVectorIndex::deserialize(std::string_view bytes) {
  Reader in(bytes);
  const auto version = in.uint(4);
  if (version != kIndexFormatVersion) {
    throw RetrievalError("unsupported index format_version " + std::to_string(version));
  }
  auto user_id = in.str();
  auto provider_id = in.str();
  const auto dimension = static_cast<std::size_t>(in.uint(4));
  const auto count = in.uint(8);
  std::vector<IndexEntry> entries;
  std::vector<EmbeddingVector> vectors;
  for (std::uint64_t i = 0; i < count; ++i) {
    IndexEntry e;
    e.doc_id = in.str();
    e.timestamp = static_cast<std::int64_t>(in.uint(8));
    EmbeddingVector v;
    v.values.resize(dimension);
    for (auto& x : v.values) x = std::bit_cast<float>(static_cast<std::uint32_t>(in.uint(4)));
    entries.push_back(std::move(e));
    vectors.push_back(std::move(v));
  }
  if (!in.done()) throw RetrievalError("trailing bytes after index entries");
  return from_entries(std::move(user_id), std::move(provider_id), dimension, std::move(entries),
                      vectors);
}

void UserVectorIndex::save(const std::filesystem::path& path) const {
  util::write_file(path, serialize());
}

UserVectorIndex UserVectorIndex::load(const std::filesystem::path& path) {
  return deserialize(util::read_file(path));
}

UserVectorIndex build_index(const corpus::UserCorpus& corpus, EmbeddingProvider& provider,
                            const RetryPolicy& policy, std::size_t batch_size) {
  if (batch_size == 0) batch_size = 1;
  std::vector<IndexEntry> entries;
  std::vector<EmbeddingVector> vectors;
  entries.reserve(corpus.documents.size());
  vectors.reserve(corpus.documents.size());
  for (std::size_t start = 0; start < corpus.documents.size(); start += batch_size) {
    const auto end = std::min(start + batch_size, corpus.documents.size());
    std::vector<std::string> texts;
    for (auto i = start; i < end; ++i) {
      texts.push_back(corpus.documents[i].text);
      entries.push_back({corpus.documents[i].doc_id, corpus.documents[i].timestamp});
    }
    auto batch = embed_with_retry(provider, texts, policy);
    for (auto& v : batch) vectors.push_back(std::move(v));
  }
  return UserVectorIndex::from_entries(corpus.user_id, provider.id(), provider.dimension(),
                                       std::move(entries), vectors);
}

namespace {

bool eligible(const IndexEntry& e, const std::optional<std::int64_t>& cutoff,
              const std::set<std::string>& exclude) {
  if (cutoff && e.timestamp >= *cutoff) return false;
  return !exclude.contains(e.doc_id);
}

}  // namespace

std::vector<Hit> retrieve(const UserVectorIndex& index, const EmbeddingVector& query_vector,
                          const RetrievalQuery& query, const kernels::KernelTable& kernels) {
  if (query.k == 0) throw RetrievalError("k must be at least 1");
  if (query_vector.dimension() != index.dimension()) {
    throw RetrievalError("query dimension " + std::to_string(query_vector.dimension()) +
                         " does not match index dimension " + std::to_string(index.dimension()));
  }
  std::vector<float> dots(index.size());
  kernels.dot_rows(query_vector.values.data(), index.matrix().data(), index.size(),
                   index.dimension(), dots.data());
  const double query_norm =
      std::sqrt(static_cast<double>(kernels.norm_sq(query_vector.values.data(), index.dimension())));

  std::vector<Hit> hits;
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto& e = index.entries()[i];
    if (!eligible(e, query.cutoff, query.exclude_doc_ids)) continue;
    const double denom = query_norm * static_cast<double>(index.norm(i));
    double score = denom > 0.0 ? static_cast<double>(dots[i]) / denom : 0.0;
    score = std::clamp(score, -1.0, 1.0);
    hits.push_back({e.doc_id, score, e.timestamp});
  }
  const auto by_rank = [](const Hit& a, const Hit& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.timestamp != b.timestamp) return a.timestamp > b.timestamp;
    return a.doc_id < b.doc_id;
  };
  const auto keep = std::min(query.k, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(keep), hits.end(),
                    by_rank);
  hits.resize(keep);
  return hits;
}

std::vector<Hit> retrieve(const UserVectorIndex& index, EmbeddingProvider& provider,
                          const RetrievalQuery& query) {
  if (!index.empty() && provider.id() != index.provider_id()) {
    throw RetrievalError("query provider " + provider.id() + " differs from index provider " +
                         index.provider_id());
  }
  const auto vectors = embed_with_retry(provider, {query.text});
  return retrieve(index, vectors.front(), query);
}

std::vector<std::string> fallback_recent(const UserVectorIndex& index, std::size_t n,
                                         std::optional<std::int64_t> cutoff,
                                         const std::set<std::string>& exclude_doc_ids) {
  std::vector<const IndexEntry*> pool;
  for (const auto& e : index.entries()) {
    if (eligible(e, cutoff, exclude_doc_ids)) pool.push_back(&e);
  }
  std::sort(pool.begin(), pool.end(), [](const IndexEntry* a, const IndexEntry* b) {
    if (a->timestamp != b->timestamp) return a->timestamp > b->timestamp;
    return a->doc_id < b->doc_id;
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < pool.size() && i < n; ++i) out.push_back(pool[i]->doc_id);
  return out;
}

}  // namespace cdt::retrieval
