#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <mutex>

#include "cdt/validation.hpp"
#include "support.hpp"

using namespace cdt;
using namespace cdt::validation;
using twin::Choice;

namespace {

std::string doc(const std::string& id, const std::string& user, std::int64_t ts, const std::string& text) {
  return nlohmann::json{{"doc_id", id}, {"user_id", user}, {"timestamp", ts}, {"community", "monitors"},
                        {"kind", "post"}, {"text", text}}
      .dump();
}

GroundTruthCase gt(std::string id, std::string user, std::string src, std::int64_t ts, Choice truth) {
  return {std::move(id), std::move(user), std::move(src), ts, "Panel Type", "OLED Pro", "IPS Black", truth};
}

twin::RespondentConfig keyword_config() {
  twin::RespondentConfig c;
  c.backend = twin::BackendKind::keyword;
  c.max_in_flight = 3;
  return c;
}

}  // namespace

TEST_CASE("accuracy and its formatting") {
  CHECK(accuracy(143, 163) == doctest::Approx(0.877300613));
  CHECK(format_accuracy(accuracy(143, 163)) == "0.8773");
  CHECK(format_accuracy(accuracy(149, 163)) == "0.9141");
  CHECK(format_accuracy(1.0) == "1.0000");
  CHECK(format_accuracy(0.0) == "0.0000");
  CHECK_THROWS_AS(accuracy(0, 0), std::invalid_argument);
  testing::Gen g(8);
  for (int i = 0; i < 200; ++i) {
    const auto total = static_cast<std::size_t>(g.integer(1, 500));
    const auto correct = static_cast<std::size_t>(g.integer(0, static_cast<int>(total)));
    const double a = accuracy(correct, total);
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
  }
}

TEST_CASE("case parsing") {
  const auto cases = parse_cases_jsonl(
      R"({"case_id":"c1","user_id":"u","source_doc_id":"d","source_timestamp":10,"attribute":"Panel Type","option_a":"OLED Pro","option_b":"IPS Black","truth":"B"})"
      "\n\n");
  REQUIRE(cases.size() == 1);
  CHECK(cases[0].truth == Choice::B);
  CHECK(cases[0].source_timestamp == 10);
  const std::string same =
      R"({"case_id":"c1","user_id":"u","source_doc_id":"d","source_timestamp":10,"attribute":"x","option_a":"p","option_b":"p","truth":"A"})";
  CHECK_THROWS(parse_case(nlohmann::json::parse(same)));
  const std::string bad_truth =
      R"({"case_id":"c1","user_id":"u","source_doc_id":"d","source_timestamp":10,"attribute":"x","option_a":"p","option_b":"q","truth":"C"})";
  CHECK_THROWS(parse_case(nlohmann::json::parse(bad_truth)));
  try {
    parse_cases_jsonl(same + "\n{broken");
    FAIL("expected failure");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).rfind("cases line 1", 0) == 0);
  }
}

TEST_CASE("an empty case list has no accuracy") {
  corpus::CorpusStore store;
  auto config = keyword_config();
  twin::KeywordBackend backend;
  retrieval::HashingEmbedder embedder;
  const auto report = evaluate({}, store, {config, backend, embedder});
  CHECK(report.total == 0);
  CHECK_FALSE(report.accuracy.has_value());
  CHECK(report.to_json()["accuracy"] == "not-applicable");
}

TEST_CASE("history-grounded twin answers under temporal separation") {
  corpus::CorpusStore store;
  store.ingest(std::vector<std::string>{
      doc("a-early", "alice", 100, "Honestly I prefer IPS Black for static work."),
      doc("a-src", "alice", 200, "Bought the IPS Black one."),
      doc("a-late", "alice", 300, "Changed my mind, now I prefer OLED Pro."),
      doc("b-early", "bob", 50, "I prefer OLED Pro, the contrast is lovely."),
      doc("b-edge", "bob", 120, "At the boundary: I prefer IPS Black."),
      doc("b-src", "bob", 120, "My review."),
  });
  auto config = keyword_config();
  twin::KeywordBackend backend(Choice::A);
  retrieval::HashingEmbedder embedder;
  const std::vector<GroundTruthCase> cases{gt("c1", "alice", "a-src", 200, Choice::B),
                                           gt("c2", "bob", "b-src", 120, Choice::A),
                                           gt("c3", "nobody", "x", 10, Choice::A)};
  const auto report = evaluate(cases, store, {config, backend, embedder});
  REQUIRE(report.cases.size() == 3);
  CHECK(report.total == 3);
  CHECK(report.correct == 2);
  CHECK(report.failed_to_answer == 1);
  CHECK(report.leakage_violations == 0);
  REQUIRE(report.accuracy.has_value());
  CHECK(*report.accuracy == 1.0);

  const auto& alice = report.cases[0];
  CHECK(alice.case_id == "c1");
  CHECK(alice.eligible_documents == 1);
  CHECK(alice.retrieved_doc_ids == std::vector<std::string>{"a-early"});
  // a document at exactly the source timestamp is not eligible
  const auto& bob = report.cases[1];
  CHECK(bob.eligible_documents == 1);
  CHECK(bob.retrieved_doc_ids == std::vector<std::string>{"b-early"});
  CHECK(bob.leakage_free);
  const auto& nobody = report.cases[2];
  CHECK(nobody.outcome == Outcome::failed);
  CHECK(nobody.reason == "no corpus for user nobody");

  const auto j = report.to_json();
  CHECK(j["accuracy"] == "1.0000");
  CHECK(report.render_text().find("c3") != std::string::npos);
}

TEST_CASE("without retrieval the keyword twin falls back to its default") {
  corpus::CorpusStore store;
  store.ingest(std::vector<std::string>{doc("e", "u", 1, "I prefer IPS Black."), doc("s", "u", 5, "review")});
  auto config = keyword_config();
  config.rag_enabled = false;
  twin::KeywordBackend backend(Choice::A);
  retrieval::HashingEmbedder embedder;
  const auto report = evaluate({gt("c", "u", "s", 5, Choice::B)}, store, {config, backend, embedder});
  CHECK(report.incorrect == 1);
  CHECK(report.cases[0].retrieved_doc_ids.empty());
  CHECK(*report.accuracy == 0.0);
}

TEST_CASE("prompts never contain post-cutoff text and failures are counted") {
  testing::Gen g(31);
  for (int trial = 0; trial < 20; ++trial) {
    corpus::CorpusStore store;
    std::vector<std::string> lines;
    const std::int64_t cutoff = g.integer(10, 90);
    for (int i = 0; i < 30; ++i) {
      const std::int64_t ts = g.integer(0, 100);
      const std::string marker = ts >= cutoff ? "FUTUREMARK" : "pastmark";
      lines.push_back(doc("d" + std::to_string(i), "u", ts, marker + " " + g.sentence(6)));
    }
    lines.push_back(doc("src", "u", cutoff, "SOURCEMARK review"));
    store.ingest(lines);
    std::mutex mu;
    std::vector<std::string> prompts;
    twin::ScriptedBackend backend("probe", [&](const twin::BackendRequest& r) {
      std::lock_guard lock(mu);
      prompts.push_back(r.messages.back().content);
      return std::string(R"({"choice": "A"})");
    });
    auto config = keyword_config();
    retrieval::HashingEmbedder embedder;
    const auto report = evaluate({gt("c", "u", "src", cutoff, Choice::A)}, store, {config, backend, embedder});
    CHECK(report.leakage_violations == 0);
    for (const auto& p : prompts) {
      CHECK(p.find("FUTUREMARK") == std::string::npos);
      CHECK(p.find("SOURCEMARK") == std::string::npos);
    }
  }

  corpus::CorpusStore store;
  store.ingest(std::vector<std::string>{doc("e", "u", 1, "text"), doc("s", "u", 5, "review")});
  twin::ScriptedBackend broken("broken", [](const twin::BackendRequest&) { return std::string("no idea"); });
  auto config = keyword_config();
  retrieval::HashingEmbedder embedder;
  const auto report = evaluate({gt("c", "u", "s", 5, Choice::A)}, store, {config, broken, embedder});
  CHECK(report.failed_to_answer == 1);
  CHECK(report.cases[0].retries_used == config.max_retries);
  CHECK_FALSE(report.accuracy.has_value());
}
