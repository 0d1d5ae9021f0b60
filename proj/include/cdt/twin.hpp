#pragma once

// Customer digital twins: prompt assembly from retrieved memories, respondent
// backends, strict A/B parsing with bounded retries, and panel execution.

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "cdt/corpus.hpp"
#include "cdt/design.hpp"
#include "cdt/retrieval.hpp"
#include "cdt/util.hpp"

namespace cdt::twin {

enum class Choice { A, B };

std::string_view to_string(Choice c);
std::optional<Choice> parse_choice_letter(std::string_view s);

inline constexpr std::size_t kDefaultMemoryBudget = 8000;
inline constexpr std::string_view kNoMemories = "(no relevant memories retrieved)";
/// Appended on a retry after an unparsable reply.
inline constexpr std::string_view kFormatReminder =
    "Reminder: reply with only the raw JSON object {\"choice\": \"A\"} or {\"choice\": \"B\"}.";

struct Memory {
  std::string doc_id;
  std::int64_t timestamp = 0;
  std::string text;
};

struct PromptBundle {
  std::string user_id;
  std::string option_a_text;
  std::string option_b_text;
  std::string memories_block;
  std::string rendered;
};

/// "Screen Size: 34-inch; Aspect Ratio: 21:9; ..." in scheme order.
std::string option_text(const design::AttributeScheme& scheme, const design::Profile& profile);

/// Level labels of both options, space separated; used as the retrieval query.
std::string query_text(const design::AttributeScheme& scheme, const design::ChoiceTask& task);

/// One "[<UTC time>] text" line per memory in the given order, cut off at
/// char_budget characters; kNoMemories when nothing is given.
std::string render_memories(const std::vector<Memory>& memories,
                            std::size_t char_budget = kDefaultMemoryBudget);

PromptBundle render_prompt(const std::string& user_id, const std::string& option_a_text,
                           const std::string& option_b_text, const std::vector<Memory>& memories,
                           std::size_t char_budget = kDefaultMemoryBudget);

class ChoiceParseError : public std::runtime_error {
 public:
  ChoiceParseError(const std::string& what, std::string raw)
      : std::runtime_error(what), raw_(std::move(raw)) {}
  const std::string& raw() const { return raw_; }

 private:
  std::string raw_;
};

/// Takes the first JSON object in raw (code fences and surrounding prose are
/// ignored) and reads its "choice" field, "A" or "B" in either case.
Choice parse_choice(std::string_view raw);

// Respondent configuration ---------------------------------------------------

enum class BackendKind { remote_llm, synthetic, keyword };

std::string_view to_string(BackendKind kind);
BackendKind parse_backend_kind(std::string_view s);

struct RespondentConfig {
  BackendKind backend = BackendKind::synthetic;
  std::string model_id;
  double temperature = 0.0;  // [0, 2]
  int max_retries = 2;
  bool rag_enabled = true;
  std::size_t retrieval_k = retrieval::kDefaultK;
  std::size_t memory_char_budget = kDefaultMemoryBudget;
  std::size_t max_in_flight = 4;

  /// Throws std::invalid_argument when a field is out of range.
  void validate() const;
};

// Backends ---------------------------------------------------------------------

struct ChatMessage {
  std::string role;
  std::string content;
};

struct BackendRequest {
  std::string respondent_id;
  std::string task_id;
  std::string model_id;
  double temperature = 0.0;
  std::vector<ChatMessage> messages;
  const design::ChoiceTask* task = nullptr;  // structured task when there is one
  int attempt = 0;
};

/// Transport or protocol failure of a backend call. Counts as a failed attempt.
class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Implementations are called concurrently from panel workers.
class RespondentBackend {
 public:
  virtual ~RespondentBackend() = default;
  virtual std::string name() const = 0;
  virtual std::string respond(const BackendRequest& request) = 0;
};

enum class DecisionRule { deterministic_argmax, logistic_sample };

std::string_view to_string(DecisionRule rule);
DecisionRule parse_decision_rule(std::string_view s);

/// Oracle respondent with known part-worths.
struct SyntheticRespondent {
  std::vector<std::vector<double>> partworths;  // [attribute][level]
  double position_bias = 0.0;                   // added to option A's utility
  DecisionRule rule = DecisionRule::deterministic_argmax;
  std::uint64_t seed = 0;

  double utility(const design::Profile& profile) const;

  /// Chooses part-worths and bias so that, on mirror pairs, P(A) equals the
  /// logit intercept + sum_j coef_j * [A takes level 2 of j]; that is the
  /// level-2-dummy model with exactly these coefficients. Level 1 is 0,
  /// level 2 is coef/2, and the bias is intercept + sum(coef)/2.
  static SyntheticRespondent matching_dummy_model(double intercept,
                                                  const std::vector<double>& level2_coefficients,
                                                  DecisionRule rule, std::uint64_t seed);
};

/// mt19937_64 with a portable [0,1) mapping, so draws are identical on every
/// platform.
class ChoiceRng {
 public:
  explicit ChoiceRng(std::uint64_t seed) : engine_(seed) {}
  double uniform() { return util::unit_double(engine_()); }

 private:
  std::mt19937_64 engine_;
};

/// Generator for one (respondent, task) cell; independent of execution order.
ChoiceRng task_rng(const SyntheticRespondent& respondent, std::string_view task_id);

double logistic(double x);

/// Deterministic: A iff u(A) + bias >= u(B). Logistic: A with probability
/// logistic(u(A) + bias - u(B)).
Choice synthetic_choice(const SyntheticRespondent& respondent, const design::ChoiceTask& task,
                        ChoiceRng& rng);

/// Answers from SyntheticRespondents keyed by respondent id; needs the
/// structured task on the request.
class SyntheticBackend final : public RespondentBackend {
 public:
  explicit SyntheticBackend(std::unordered_map<std::string, SyntheticRespondent> respondents)
      : respondents_(std::move(respondents)) {}
  std::string name() const override { return "synthetic"; }
  std::string respond(const BackendRequest& request) override;

 private:
  std::unordered_map<std::string, SyntheticRespondent> respondents_;
};

struct RemoteChatConfig {
  std::string endpoint;
  std::string model_id;
  std::string api_key;
  std::chrono::seconds timeout{120};
};

/// {model_id, temperature, messages:[{role, content}]} -> {content} over HTTP(S).
class RemoteChatBackend final : public RespondentBackend {
 public:
  explicit RemoteChatBackend(RemoteChatConfig config);
  std::string name() const override { return "remote_llm:" + config_.model_id; }
  std::string respond(const BackendRequest& request) override;

 private:
  RemoteChatConfig config_;
};

/// Offline stand-in for an LLM that reads the rendered prompt: each option
/// scores one point per memory containing "prefer <level label>" for one of
/// its levels (case-insensitive). Higher score wins; a tie, including the
/// no-evidence case, returns default_choice.
class KeywordBackend final : public RespondentBackend {
 public:
  explicit KeywordBackend(Choice default_choice = Choice::A) : default_(default_choice) {}
  std::string name() const override { return "keyword"; }
  std::string respond(const BackendRequest& request) override;

 private:
  Choice default_;
};

/// Delegates to a callable; for failure injection and canned replies.
class ScriptedBackend final : public RespondentBackend {
 public:
  using Script = std::function<std::string(const BackendRequest&)>;
  ScriptedBackend(std::string name, Script script)
      : name_(std::move(name)), script_(std::move(script)) {}
  std::string name() const override { return name_; }
  std::string respond(const BackendRequest& request) override { return script_(request); }

 private:
  std::string name_;
  Script script_;
};

// Asking ----------------------------------------------------------------------

/// A user's memory: their corpus and its sealed index.
class TwinMemory {
 public:
  TwinMemory(corpus::UserCorpus corpus, retrieval::UserVectorIndex index);
  const corpus::UserCorpus& corpus() const { return corpus_; }
  const retrieval::UserVectorIndex& index() const { return index_; }
  const corpus::ReviewDocument* find(const std::string& doc_id) const;

 private:
  corpus::UserCorpus corpus_;
  retrieval::UserVectorIndex index_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

struct Respondent {
  std::string id;
  std::shared_ptr<const TwinMemory> memory;  // required when RAG is on
  std::optional<std::int64_t> cutoff;        // only memories strictly before
  std::set<std::string> exclude_doc_ids;
};

struct Question {
  std::string task_id;
  std::string option_a_text;
  std::string option_b_text;
  std::string query_text;
  const design::ChoiceTask* task = nullptr;
};

Question make_question(const design::AttributeScheme& scheme, const design::ChoiceTask& task);

struct ChoiceRecord {
  std::string respondent_id;
  std::string task_id;
  Choice chosen = Choice::A;
  std::string raw_response;
  std::vector<std::string> retrieved_doc_ids;
  int retries_used = 0;
  std::string backend;

  bool operator==(const ChoiceRecord&) const = default;
};

/// All attempts failed to produce a parsable choice.
class TaskFailure : public std::runtime_error {
 public:
  TaskFailure(const std::string& what, std::string respondent_id, std::string task_id,
              int attempts, std::string last_raw)
      : std::runtime_error(what),
        respondent_id(std::move(respondent_id)),
        task_id(std::move(task_id)),
        attempts(attempts),
        last_raw(std::move(last_raw)) {}
  std::string respondent_id;
  std::string task_id;
  int attempts;
  std::string last_raw;
};

struct AskEnvironment {
  const RespondentConfig& config;
  RespondentBackend& backend;
  retrieval::EmbeddingProvider* embedder = nullptr;  // required when RAG is on
};

/// Memories a respondent would see for a question (empty when RAG is off).
std::vector<Memory> gather_memories(const AskEnvironment& env, const Respondent& respondent,
                                    const Question& question);

/// Throws TaskFailure once max_retries re-invocations are spent.
ChoiceRecord ask(const AskEnvironment& env, const Respondent& respondent,
                 const Question& question);

struct PanelFailure {
  std::string respondent_id;
  std::string task_id;
  std::string reason;
  int attempts = 0;
  std::string last_raw;
};

struct PanelResult {
  std::vector<ChoiceRecord> records;  // respondent order, then question order
  std::vector<PanelFailure> failures;
  std::size_t attempted = 0;

  nlohmann::ordered_json report_json() const;
};

/// Runs every (respondent, question) cell with at most config.max_in_flight
/// concurrent cells. Failures are collected, never fatal.
PanelResult run_panel(const AskEnvironment& env, const std::vector<Respondent>& respondents,
                      const std::vector<Question>& questions);

/// respondent_id, task_id, chosen, retries_used, backend, retrieved_doc_ids
/// (pipe separated).
std::string records_csv(const std::vector<ChoiceRecord>& records);
/// One JSON object per record with its raw_response.
std::string responses_jsonl(const std::vector<ChoiceRecord>& records);
/// Reads records_csv output; raw_response is left empty.
std::vector<ChoiceRecord> parse_records_csv(std::string_view text);

}  // namespace cdt::twin
