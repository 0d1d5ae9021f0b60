#include "cdt/validation.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <memory>
#include <thread>

#include "cdt/util.hpp"

namespace cdt::validation {

using nlohmann::json;

GroundTruthCase parse_case(const json& j) {
  GroundTruthCase c;
  c.case_id = j.at("case_id").get<std::string>();
  c.user_id = j.at("user_id").get<std::string>();
  c.source_doc_id = j.at("source_doc_id").get<std::string>();
  c.source_timestamp = j.at("source_timestamp").get<std::int64_t>();
  c.attribute = j.at("attribute").get<std::string>();
  c.option_a = j.at("option_a").get<std::string>();
  c.option_b = j.at("option_b").get<std::string>();
  const auto truth = twin::parse_choice_letter(j.at("truth").get<std::string>());
  if (!truth) throw std::runtime_error("truth must be \"A\" or \"B\"");
  c.truth = *truth;
  if (c.option_a == c.option_b) throw std::runtime_error("option_a and option_b must differ");
  return c;
}

std::vector<GroundTruthCase> parse_cases_jsonl(std::string_view text) {
  std::vector<GroundTruthCase> cases;
  const auto lines = util::split(text, '\n');
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (util::trim(lines[i]).empty()) continue;
    try {
      cases.push_back(parse_case(json::parse(lines[i])));
    } catch (const std::exception& e) {
      throw std::runtime_error("cases line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return cases;
}

std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::correct:
      return "correct";
    case Outcome::incorrect:
      return "incorrect";
    case Outcome::failed:
      return "failed";
  }
  return "unknown";
}

double accuracy(std::size_t correct, std::size_t total_answered) {
  if (total_answered == 0) throw std::invalid_argument("accuracy is undefined with no answered cases");
  if (correct > total_answered) throw std::invalid_argument("correct exceeds answered");
  return static_cast<double>(correct) / static_cast<double>(total_answered);
}

std::string format_accuracy(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", value);
  return buf;
}

nlohmann::ordered_json ValidationReport::to_json() const {
  nlohmann::ordered_json j;
  j["total"] = total;
  j["correct"] = correct;
  j["incorrect"] = incorrect;
  j["failed_to_answer"] = failed_to_answer;
  j["leakage_violations"] = leakage_violations;
  if (accuracy) {
    j["accuracy"] = format_accuracy(*accuracy);
  } else {
    j["accuracy"] = "not-applicable";
  }
  auto& list = j["cases"] = nlohmann::ordered_json::array();
  for (const auto& c : cases) {
    nlohmann::ordered_json e;
    e["case_id"] = c.case_id;
    e["user_id"] = c.user_id;
    e["outcome"] = to_string(c.outcome);
    e["truth"] = twin::to_string(c.truth);
    e["chosen"] = c.chosen ? json(std::string(twin::to_string(*c.chosen))) : json(nullptr);
    e["eligible_documents"] = c.eligible_documents;
    e["retrieved_doc_ids"] = c.retrieved_doc_ids;
    e["retries_used"] = c.retries_used;
    e["leakage_free"] = c.leakage_free;
    if (!c.reason.empty()) e["reason"] = c.reason;
    list.push_back(std::move(e));
  }
  return j;
}

std::string ValidationReport::render_text() const {
  std::string out;
  out += "Validation: " + std::to_string(total) + " cases, " + std::to_string(correct) + " correct, " +
         std::to_string(incorrect) + " incorrect, " + std::to_string(failed_to_answer) +
         " failed to answer\n";
  out += "Accuracy: " + (accuracy ? format_accuracy(*accuracy) : std::string("not-applicable")) + "\n";
  out += "Leakage violations: " + std::to_string(leakage_violations) + "\n\n";
  char buf[512];
  std::snprintf(buf, sizeof buf, "%-16s %-16s %-10s %-5s %-6s %s\n", "case_id", "user_id", "outcome",
                "truth", "chosen", "retrieved");
  out += buf;
  for (const auto& c : cases) {
    std::snprintf(buf, sizeof buf, "%-16s %-16s %-10s %-5s %-6s %zu%s%s\n", c.case_id.c_str(),
                  c.user_id.c_str(), std::string(to_string(c.outcome)).c_str(),
                  std::string(twin::to_string(c.truth)).c_str(),
                  c.chosen ? std::string(twin::to_string(*c.chosen)).c_str() : "-",
                  c.retrieved_doc_ids.size(), c.reason.empty() ? "" : "  ", c.reason.c_str());
    out += buf;
  }
  return out;
}

namespace {

CaseOutcome evaluate_case(const GroundTruthCase& gt, const corpus::CorpusStore& store,
                          const ValidationEnvironment& env) {
  CaseOutcome out;
  out.case_id = gt.case_id;
  out.user_id = gt.user_id;
  out.truth = gt.truth;

  const auto corpus = store.load_user(gt.user_id);
  if (!corpus) {
    out.reason = "no corpus for user " + gt.user_id;
    return out;
  }
  corpus::UserCorpus eligible = corpus::filter_before(*corpus, gt.source_timestamp);
  std::erase_if(eligible.documents,
                [&](const corpus::ReviewDocument& d) { return d.doc_id == gt.source_doc_id; });
  out.eligible_documents = eligible.documents.size();

  twin::Respondent respondent;
  respondent.id = gt.user_id;
  respondent.cutoff = gt.source_timestamp;
  respondent.exclude_doc_ids = {gt.source_doc_id};
  if (env.config.rag_enabled) {
    auto index = retrieval::build_index(eligible, env.embedder, env.retry);
    respondent.memory = std::make_shared<twin::TwinMemory>(std::move(eligible), std::move(index));
  }

  twin::Question question{gt.case_id, gt.attribute + ": " + gt.option_a, gt.attribute + ": " + gt.option_b,
                          gt.option_a + " " + gt.option_b, nullptr};
  const twin::AskEnvironment ask_env{env.config, env.backend, &env.embedder};
  try {
    const auto record = twin::ask(ask_env, respondent, question);
    out.chosen = record.chosen;
    out.retrieved_doc_ids = record.retrieved_doc_ids;
    out.retries_used = record.retries_used;
    out.outcome = record.chosen == gt.truth ? Outcome::correct : Outcome::incorrect;
  } catch (const twin::TaskFailure& f) {
    out.reason = f.what();
    out.retries_used = f.attempts > 0 ? f.attempts - 1 : 0;
    return out;
  }

  for (const auto& id : out.retrieved_doc_ids) {
    const auto& docs = corpus->documents;
    const auto it = std::find_if(docs.begin(), docs.end(),
                                 [&](const corpus::ReviewDocument& d) { return d.doc_id == id; });
    if (id == gt.source_doc_id || it == docs.end() || it->timestamp >= gt.source_timestamp) {
      out.leakage_free = false;
    }
  }
  return out;
}

}  // namespace

ValidationReport evaluate(const std::vector<GroundTruthCase>& cases, const corpus::CorpusStore& store,
                          const ValidationEnvironment& env) {
  env.config.validate();
  std::vector<CaseOutcome> outcomes(cases.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < cases.size(); i = next++) {
      try {
        outcomes[i] = evaluate_case(cases[i], store, env);
      } catch (const std::exception& e) {
        outcomes[i].case_id = cases[i].case_id;
        outcomes[i].user_id = cases[i].user_id;
        outcomes[i].truth = cases[i].truth;
        outcomes[i].outcome = Outcome::failed;
        outcomes[i].reason = e.what();
      }
    }
  };
  const auto threads = std::min(env.config.max_in_flight, std::max<std::size_t>(cases.size(), 1));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }

  std::stable_sort(outcomes.begin(), outcomes.end(),
                   [](const CaseOutcome& a, const CaseOutcome& b) { return a.case_id < b.case_id; });
  ValidationReport report;
  report.total = outcomes.size();
  for (const auto& o : outcomes) {
    switch (o.outcome) {
      case Outcome::correct:
        ++report.correct;
        break;
      case Outcome::incorrect:
        ++report.incorrect;
        break;
      case Outcome::failed:
        ++report.failed_to_answer;
        break;
    }
    if (!o.leakage_free) ++report.leakage_violations;
  }
  const auto answered = report.correct + report.incorrect;
  if (answered > 0) report.accuracy = accuracy(report.correct, answered);
  report.cases = std::move(outcomes);
  return report;
}

}  // namespace cdt::validation
