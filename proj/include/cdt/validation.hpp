#pragma once

// Revealed-preference validation of twins under strict temporal separation.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cdt/corpus.hpp"
#include "cdt/retrieval.hpp"
#include "cdt/twin.hpp"

namespace cdt::validation {

struct GroundTruthCase {
  std::string case_id;
  std::string user_id;
  std::string source_doc_id;
  std::int64_t source_timestamp = 0;
  std::string attribute;
  std::string option_a;
  std::string option_b;
  twin::Choice truth = twin::Choice::A;
};

GroundTruthCase parse_case(const nlohmann::json& j);
/// Throws std::runtime_error naming the offending line.
std::vector<GroundTruthCase> parse_cases_jsonl(std::string_view text);

enum class Outcome { correct, incorrect, failed };

std::string_view to_string(Outcome o);

struct CaseOutcome {
  std::string case_id;
  std::string user_id;
  Outcome outcome = Outcome::failed;
  twin::Choice truth = twin::Choice::A;
  std::optional<twin::Choice> chosen;
  std::vector<std::string> retrieved_doc_ids;
  std::size_t eligible_documents = 0;
  int retries_used = 0;
  bool leakage_free = true;
  std::string reason;  // why a case failed
};

struct ValidationReport {
  std::size_t total = 0;
  std::size_t correct = 0;
  std::size_t incorrect = 0;
  std::size_t failed_to_answer = 0;
  std::size_t leakage_violations = 0;
  std::optional<double> accuracy;  // correct / (total - failed); none when nothing was answered
  std::vector<CaseOutcome> cases;  // by case_id

  nlohmann::ordered_json to_json() const;
  std::string render_text() const;
};

/// correct / total_answered; throws std::invalid_argument when nothing was
/// answered.
double accuracy(std::size_t correct, std::size_t total_answered);
/// Four decimal places.
std::string format_accuracy(double value);

struct ValidationEnvironment {
  const twin::RespondentConfig& config;
  twin::RespondentBackend& backend;
  retrieval::EmbeddingProvider& embedder;
  retrieval::RetryPolicy retry{};
};

/// For each case the twin only sees the user's documents strictly older than
/// the source review, never the source review itself.
ValidationReport evaluate(const std::vector<GroundTruthCase>& cases, const corpus::CorpusStore& store,
                          const ValidationEnvironment& env);

}  // namespace cdt::validation
