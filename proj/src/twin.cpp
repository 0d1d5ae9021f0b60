#include "cdt/twin.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

#include "cdt/util.hpp"

namespace cdt::twin {

using nlohmann::json;

std::string_view to_string(Choice c) { return c == Choice::A ? "A" : "B"; }

std::optional<Choice> parse_choice_letter(std::string_view s) {
  const auto t = util::trim(s);
  if (t == "A" || t == "a") return Choice::A;
  if (t == "B" || t == "b") return Choice::B;
  return std::nullopt;
}

std::string option_text(const design::AttributeScheme& scheme, const design::Profile& profile) {
  design::check_profile(scheme, profile);
  std::vector<std::string> parts;
  for (std::size_t j = 0; j < scheme.size(); ++j) {
    parts.push_back(scheme[j].name + ": " + scheme[j].levels[profile.levels[j]]);
  }
  return util::join(parts, "; ");
}

std::string query_text(const design::AttributeScheme& scheme, const design::ChoiceTask& task) {
  std::vector<std::string> parts;
  for (const auto* p : {&task.option_a, &task.option_b}) {
    for (std::size_t j = 0; j < scheme.size(); ++j) parts.push_back(scheme[j].levels[p->levels[j]]);
  }
  return util::join(parts, " ");
}

std::string render_memories(const std::vector<Memory>& memories, std::size_t char_budget) {
  std::string block;
  for (const auto& m : memories) {
    std::string line = "[" + util::format_utc(m.timestamp) + "] " + m.text;
    const std::size_t sep = block.empty() ? 0 : 1;
    if (block.size() + sep + line.size() > char_budget) {
      const auto room = char_budget > block.size() + sep ? char_budget - block.size() - sep : 0;
      if (room > 0) {
        if (sep) block.push_back('\n');
        block += line.substr(0, room);
      }
      break;
    }
    if (sep) block.push_back('\n');
    block += line;
  }
  if (block.empty()) return std::string(kNoMemories);
  return block;
}

PromptBundle render_prompt(const std::string& user_id, const std::string& option_a_text,
                           const std::string& option_b_text, const std::vector<Memory>& memories,
                           std::size_t char_budget) {
  PromptBundle b;
  b.user_id = user_id;
  b.option_a_text = option_a_text;
  b.option_b_text = option_b_text;
  b.memories_block = render_memories(memories, char_budget);

  std::string& r = b.rendered;
  r += "ROLE & PERSONA\n";
  r += "You are the Reddit user '" + user_id + "'.\n";
  r += "The content provided below represents your OWN past memories, reviews, and opinions.\n";
  r += "You must simulate this specific user's preference logic, writing style, and "
       "decision-making criteria.\n\n";
  r += "TASK\n";
  r += "Your task is to choose between two options based **strictly** on your retrieved "
       "memories.\n";
  r += "If your memories do not explicitly mention these specific options, infer the most "
       "likely choice based on your past preferences (e.g., brand loyalty, feature priorities, "
       "price sensitivity).\n\n";
  r += "OPTIONS TO COMPARE\n";
  r += "- Option A: " + option_a_text + "\n";
  r += "- Option B: " + option_b_text + "\n\n";
  r += "YOUR MEMORIES (Context)\n";
  r += b.memories_block + "\n\n";
  r += "OUTPUT FORMAT INSTRUCTION\n";
  r += "1. Analyze the memories to determine which option aligns better with your past self.\n";
  r += "2. You **MUST** return the result in a valid JSON format.\n";
  r += "3. Do not include any markdown formatting (like ```json) or additional text. Just the "
       "raw JSON string.\n\n";
  r += "REQUIRED JSON OUTPUT\n";
  r += "{\n  \"choice\": \"A\" // or \"B\"\n}\n";
  return b;
}

namespace {

// End (exclusive) of the balanced {...} starting at open, or npos.
std::size_t match_object(std::string_view s, std::size_t open) {
  int depth = 0;
  bool in_string = false;
  for (std::size_t i = open; i < s.size(); ++i) {
    const char c = s[i];
    if (in_string) {
      if (c == '\\') {
        ++i;
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"') {
      in_string = true;
    } else if (c == '{') {
      ++depth;
    } else if (c == '}') {
      if (--depth == 0) return i + 1;
    }
  }
  return std::string_view::npos;
}

}  // namespace

Choice parse_choice(std::string_view raw) {
  for (auto open = raw.find('{'); open != std::string_view::npos; open = raw.find('{', open + 1)) {
    const auto end = match_object(raw, open);
    if (end == std::string_view::npos) continue;
    const auto candidate = raw.substr(open, end - open);
    const auto j = json::parse(candidate, nullptr, /*allow_exceptions=*/false,
                               /*ignore_comments=*/true);
    if (j.is_discarded() || !j.is_object()) continue;
    const auto it = j.find("choice");
    if (it == j.end() || !it->is_string()) {
      throw ChoiceParseError("first JSON object has no string \"choice\" field", std::string(raw));
    }
    if (const auto c = parse_choice_letter(it->get<std::string>())) return *c;
    throw ChoiceParseError("\"choice\" must be \"A\" or \"B\", got \"" + it->get<std::string>() + "\"",
                           std::string(raw));
  }
  throw ChoiceParseError("no JSON object found in reply", std::string(raw));
}

std::string_view to_string(BackendKind kind) {
  switch (kind) {
    case BackendKind::remote_llm:
      return "remote_llm";
    case BackendKind::synthetic:
      return "synthetic";
    case BackendKind::keyword:
      return "keyword";
  }
  return "unknown";
}

BackendKind parse_backend_kind(std::string_view s) {
  if (s == "remote_llm") return BackendKind::remote_llm;
  if (s == "synthetic") return BackendKind::synthetic;
  if (s == "keyword") return BackendKind::keyword;
  throw std::invalid_argument("unknown backend: " + std::string(s));
}

void RespondentConfig::validate() const {
  if (!std::isfinite(temperature) || temperature < 0.0 || temperature > 2.0) {
    throw std::invalid_argument("temperature must lie in [0, 2]");
  }
  if (max_retries < 0) throw std::invalid_argument("max_retries must be non-negative");
  if (retrieval_k == 0) throw std::invalid_argument("retrieval_k must be positive");
  if (max_in_flight == 0) throw std::invalid_argument("max_in_flight must be positive");
}

std::string_view to_string(DecisionRule rule) {
  return rule == DecisionRule::deterministic_argmax ? "deterministic_argmax" : "logistic_sample";
}

DecisionRule parse_decision_rule(std::string_view s) {
  if (s == "deterministic_argmax") return DecisionRule::deterministic_argmax;
  if (s == "logistic_sample") return DecisionRule::logistic_sample;
  throw std::invalid_argument("unknown decision rule: " + std::string(s));
}

double SyntheticRespondent::utility(const design::Profile& profile) const {
  if (profile.levels.size() != partworths.size()) {
    throw std::invalid_argument("profile does not match the respondent's attributes");
  }
  double u = 0.0;
  for (std::size_t j = 0; j < partworths.size(); ++j) {
    u += partworths[j].at(static_cast<std::size_t>(profile.levels[j]));
  }
  return u;
}

SyntheticRespondent SyntheticRespondent::matching_dummy_model(
    double intercept, const std::vector<double>& level2_coefficients, DecisionRule rule,
    std::uint64_t seed) {
  SyntheticRespondent r;
  r.rule = rule;
  r.seed = seed;
  r.position_bias = intercept;
  for (double c : level2_coefficients) {
    r.partworths.push_back({0.0, c / 2.0});
    r.position_bias += c / 2.0;
  }
  return r;
}

ChoiceRng task_rng(const SyntheticRespondent& respondent, std::string_view task_id) {
  return ChoiceRng(util::mix64(respondent.seed ^ util::mix64(util::fnv1a64(task_id))));
}

double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Choice synthetic_choice(const SyntheticRespondent& respondent, const design::ChoiceTask& task,
                        ChoiceRng& rng) {
  const double margin =
      respondent.utility(task.option_a) + respondent.position_bias - respondent.utility(task.option_b);
  if (respondent.rule == DecisionRule::deterministic_argmax) {
    return margin >= 0.0 ? Choice::A : Choice::B;
  }
  return rng.uniform() < logistic(margin) ? Choice::A : Choice::B;
}

TwinMemory::TwinMemory(corpus::UserCorpus corpus, retrieval::UserVectorIndex index)
    : corpus_(std::move(corpus)), index_(std::move(index)) {
  for (std::size_t i = 0; i < corpus_.documents.size(); ++i) by_id_.emplace(corpus_.documents[i].doc_id, i);
}

const corpus::ReviewDocument* TwinMemory::find(const std::string& doc_id) const {
  const auto it = by_id_.find(doc_id);
  return it == by_id_.end() ? nullptr : &corpus_.documents[it->second];
}

Question make_question(const design::AttributeScheme& scheme, const design::ChoiceTask& task) {
  return {task.task_id, option_text(scheme, task.option_a), option_text(scheme, task.option_b),
          query_text(scheme, task), &task};
}

std::vector<Memory> gather_memories(const AskEnvironment& env, const Respondent& respondent,
                                    const Question& question) {
  if (!env.config.rag_enabled) return {};
  if (!respondent.memory) {
    throw std::invalid_argument("respondent " + respondent.id + " has no memory index but RAG is on");
  }
  if (env.embedder == nullptr) throw std::invalid_argument("RAG needs an embedding provider");
  const auto& index = respondent.memory->index();

  std::vector<std::string> ids;
  retrieval::RetrievalQuery q{question.query_text, env.config.retrieval_k, respondent.cutoff,
                              respondent.exclude_doc_ids};
  for (const auto& hit : retrieval::retrieve(index, *env.embedder, q)) ids.push_back(hit.doc_id);
  if (ids.empty()) {
    ids = retrieval::fallback_recent(index, env.config.retrieval_k, respondent.cutoff,
                                     respondent.exclude_doc_ids);
  }

  std::vector<Memory> memories;
  for (const auto& id : ids) {
    const auto* doc = respondent.memory->find(id);
    if (doc == nullptr) throw std::logic_error("index entry " + id + " missing from corpus");
    if ((respondent.cutoff && doc->timestamp >= *respondent.cutoff) ||
        respondent.exclude_doc_ids.contains(id)) {
      throw std::logic_error("retrieval returned an ineligible document " + id);
    }
    memories.push_back({doc->doc_id, doc->timestamp, doc->text});
  }
  return memories;
}

ChoiceRecord ask(const AskEnvironment& env, const Respondent& respondent, const Question& question) {
  const auto memories = gather_memories(env, respondent, question);
  const auto prompt = render_prompt(respondent.id, question.option_a_text, question.option_b_text,
                                    memories, env.config.memory_char_budget);

  ChoiceRecord record;
  record.respondent_id = respondent.id;
  record.task_id = question.task_id;
  record.backend = env.backend.name();
  for (const auto& m : memories) record.retrieved_doc_ids.push_back(m.doc_id);

  BackendRequest request;
  request.respondent_id = respondent.id;
  request.task_id = question.task_id;
  request.model_id = env.config.model_id;
  request.temperature = env.config.temperature;
  request.task = question.task;
  request.messages = {{"user", prompt.rendered}};

  std::string last_raw;
  std::string last_error;
  for (int attempt = 0; attempt <= env.config.max_retries; ++attempt) {
    request.attempt = attempt;
    if (attempt == 1) {
      request.messages = {{"user", prompt.rendered + "\n" + std::string(kFormatReminder)}};
    }
    try {
      last_raw = env.backend.respond(request);
      record.chosen = parse_choice(last_raw);
      record.raw_response = last_raw;
      record.retries_used = attempt;
      return record;
    } catch (const ChoiceParseError& e) {
      last_error = e.what();
    } catch (const BackendError& e) {
      last_raw.clear();
      last_error = e.what();
    }
  }
  throw TaskFailure("no parsable choice after " + std::to_string(env.config.max_retries + 1) +
                        " attempts: " + last_error,
                    respondent.id, question.task_id, env.config.max_retries + 1, last_raw);
}

nlohmann::ordered_json PanelResult::report_json() const {
  nlohmann::ordered_json j;
  j["attempted"] = attempted;
  j["succeeded"] = records.size();
  j["failed"] = failures.size();
  auto& list = j["failures"] = nlohmann::ordered_json::array();
  for (const auto& f : failures) {
    list.push_back({{"respondent_id", f.respondent_id},
                    {"task_id", f.task_id},
                    {"reason", f.reason},
                    {"attempts", f.attempts},
                    {"last_raw", f.last_raw}});
  }
  return j;
}

PanelResult run_panel(const AskEnvironment& env, const std::vector<Respondent>& respondents,
                      const std::vector<Question>& questions) {
  if (questions.empty()) throw std::invalid_argument("run_panel needs at least one task");
  env.config.validate();
  const std::size_t cells = respondents.size() * questions.size();
  std::vector<std::optional<ChoiceRecord>> records(cells);
  std::vector<std::optional<PanelFailure>> failures(cells);

  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t cell = next++; cell < cells; cell = next++) {
      const auto& r = respondents[cell / questions.size()];
      const auto& q = questions[cell % questions.size()];
      try {
        records[cell] = ask(env, r, q);
      } catch (const TaskFailure& f) {
        failures[cell] = PanelFailure{r.id, q.task_id, f.what(), f.attempts, f.last_raw};
      } catch (const std::exception& e) {
        failures[cell] = PanelFailure{r.id, q.task_id, e.what(), 0, {}};
      }
    }
  };
  const auto threads = std::min(env.config.max_in_flight, std::max<std::size_t>(cells, 1));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }

  PanelResult result;
  result.attempted = cells;
  for (std::size_t c = 0; c < cells; ++c) {
    if (records[c]) result.records.push_back(std::move(*records[c]));
    if (failures[c]) result.failures.push_back(std::move(*failures[c]));
  }
  return result;
}

std::string records_csv(const std::vector<ChoiceRecord>& records) {
  std::string out = util::csv_row(
      {"respondent_id", "task_id", "chosen", "retries_used", "backend", "retrieved_doc_ids"});
  for (const auto& r : records) {
    out += util::csv_row({r.respondent_id, r.task_id, std::string(to_string(r.chosen)),
                          std::to_string(r.retries_used), r.backend,
                          util::join(r.retrieved_doc_ids, "|")});
  }
  return out;
}

std::string responses_jsonl(const std::vector<ChoiceRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["respondent_id"] = r.respondent_id;
    j["task_id"] = r.task_id;
    j["raw_response"] = r.raw_response;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<ChoiceRecord> parse_records_csv(std::string_view text) {
  const auto rows = util::parse_csv(text);
  if (rows.empty()) throw std::runtime_error("records file is empty (no header)");
  const std::vector<std::string> header{"respondent_id", "task_id",  "chosen",
                                        "retries_used",  "backend", "retrieved_doc_ids"};
  if (rows.front() != header) throw std::runtime_error("records file has an unexpected header");
  std::vector<ChoiceRecord> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& row = rows[i];
    if (row.size() != header.size()) {
      throw std::runtime_error("records row " + std::to_string(i + 1) + " has " +
                               std::to_string(row.size()) + " fields");
    }
    ChoiceRecord r;
    r.respondent_id = row[0];
    r.task_id = row[1];
    const auto c = parse_choice_letter(row[2]);
    if (!c) throw std::runtime_error("records row " + std::to_string(i + 1) + ": invalid choice");
    r.chosen = *c;
    r.retries_used = std::stoi(row[3]);
    r.backend = row[4];
    if (!row[5].empty()) r.retrieved_doc_ids = util::split(row[5], '|');
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace cdt::twin
