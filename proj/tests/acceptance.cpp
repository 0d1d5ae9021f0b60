// One PASS/FAIL line per acceptance criterion; nonzero exit if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "cdt/estimation.hpp"
#include "cdt/pipeline.hpp"
#include "cdt/util.hpp"
#include "cdt/validation.hpp"
#include "support.hpp"

using namespace cdt;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

struct Criterion {
  int number;
  std::string name;
  double limit_ms;  // 0: no runtime limit
  std::function<void(Outcome&)> body;
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

const design::AttributeScheme& scheme() {
  static const auto s = testing::monitor_scheme();
  return s;
}

std::vector<design::ChoiceTask> tasks() {
  return design::build_paired_tasks(scheme(), design::fractional_factorial(scheme(), 1));
}

pipeline::CommandResult must(const std::function<pipeline::CommandResult()>& f, Outcome& o, const char* stage) {
  auto r = pipeline::guarded(f);
  o.require(r.exit_code == 0, std::string(stage) + " exit " + std::to_string(r.exit_code) + ": " + r.output);
  return r;
}

void report_arithmetic(Outcome& o) {
  std::vector<double> coefs{testing::kReferenceIntercept};
  for (double c : testing::reference_coefficients()) coefs.push_back(c);
  const auto m = estimation::FittedConjointModel::from_estimates(
      estimation::Encoding::paper_dummy, estimation::column_names(scheme(), estimation::Encoding::paper_dummy), coefs,
      std::vector<double>(6, 0.04), -1697.5, -2075.06, 3200);
  const std::vector<std::pair<std::string, double>> expected_shares{
      {"Panel Type", 32.9}, {"Resolution Class", 29.2}, {"Screen Size", 20.6}, {"Refresh Rate", 16.0}, {"Aspect Ratio", 1.4}};
  const auto ranked = estimation::importance(m, scheme()).ranked();
  for (std::size_t i = 0; i < expected_shares.size(); ++i) {
    o.require(ranked[i].attribute == expected_shares[i].first, "rank " + std::to_string(i));
    o.require(std::abs(100 * ranked[i].share - expected_shares[i].second) <= 0.1, expected_shares[i].first + " share");
    o.detail << " " << ranked[i].attribute << "=" << fmt(100 * ranked[i].share, 3) << "%";
  }
  const auto r = estimation::rank_profiles(m, scheme());
  const double best = r.best().utility, worst = r.worst().utility;
  o.require(std::abs(best - 1.688) <= 0.001, "best utility");
  o.require(std::abs(worst + 0.667) <= 0.001, "worst utility");
  o.require(std::abs(best - worst - 2.355) <= 0.002, "best-worst");
  o.detail << "; best=" << fmt(best, 3) << " worst=" << fmt(worst, 3) << " range=" << fmt(best - worst, 3);
}

void design_properties(Outcome& o) {
  const auto d = design::fractional_factorial(scheme(), 1);
  o.require(d.run_count() == 16, "16 runs");
  const auto rep = design::verify_orthogonality(scheme(), d);
  for (const auto& [lo, hi] : rep.balance) o.require(lo == 8 && hi == 8, "8/8 balance");
  o.require(rep.pairs.size() == 10, "10 column pairs");
  for (const auto& p : rep.pairs) o.require(p.inner_product == 0, "zero inner product");
  o.require(d.defining_words == std::vector<std::string>{"ABCDE"}, "defining word ABCDE");
  for (const auto& p : design::full_factorial(scheme())) {
    o.require(design::foldover(scheme(), design::foldover(scheme(), p)) == p, "foldover involution");
  }
  std::set<design::Profile> covered;
  for (const auto& t : design::build_paired_tasks(scheme(), d)) {
    covered.insert(t.option_a);
    covered.insert(t.option_b);
  }
  o.require(covered.size() == 32, "pairs cover 32 profiles");
  o.detail << " runs=" << d.run_count() << " pairs=" << rep.pairs.size() << " I=" << util::join(d.defining_words, "=")
           << " resolution=" << design::resolution(d) << " covered=" << covered.size();
}

void estimator_recovery(Outcome& o) {
  testing::ScratchDir dir("accept-recovery");
  const json run = {{"workspace", (dir.path() / "ws").string()},
                    {"scheme_file", (testing::data_dir() / "monitor_scheme.json").string()},
                    {"seed", 2025},
                    {"respondent", {{"backend", "synthetic"}}},
                    {"synthetic",
                     {{"respondents", 200},
                      {"dummy_model",
                       {{"intercept", testing::kReferenceIntercept}, {"coefficients", testing::reference_coefficients()}}}}}};
  const auto c = pipeline::RunConfig::from_json(run, dir.path());
  must([&] { return pipeline::cmd_design(c); }, o, "design");
  must([&] { return pipeline::cmd_run(c); }, o, "run");
  must([&] { return pipeline::cmd_fit(c); }, o, "fit");
  if (!o.pass) return;
  const pipeline::Workspace ws{c.workspace};
  const auto [m, s] = estimation::model_from_json(json::parse(util::read_file(ws.model())));
  o.require(m.converged, "converged");
  o.require(m.iterations <= 25, "at most 25 iterations");
  o.require(m.n == 3200, "3200 records");
  std::vector<double> truth{testing::kReferenceIntercept};
  for (double v : testing::reference_coefficients()) truth.push_back(v);
  double worst_se = 0;
  for (Eigen::Index i = 0; i < m.coefficients.size(); ++i) {
    const double dev = std::abs(m.coefficients[i] - truth[static_cast<std::size_t>(i)]) / m.standard_errors[i];
    worst_se = std::max(worst_se, dev);
    o.require(dev < 3, m.column_names[static_cast<std::size_t>(i)] + " within 3 SE");
  }
  const auto ranked = estimation::importance(m, s).ranked();
  const std::vector<std::string> order{"Panel Type", "Resolution Class", "Screen Size", "Refresh Rate", "Aspect Ratio"};
  for (std::size_t i = 0; i < order.size(); ++i) o.require(ranked[i].attribute == order[i], "importance rank " + std::to_string(i + 1));
  // |Panel| - |Resolution| (both negative) and its standard error
  const auto panel = static_cast<Eigen::Index>(1 + s.index_of("Panel Type"));
  const auto res = static_cast<Eigen::Index>(1 + s.index_of("Resolution Class"));
  const double gap = m.coefficients[res] - m.coefficients[panel];
  const double gap_se = std::sqrt(m.covariance(panel, panel) + m.covariance(res, res) - 2 * m.covariance(panel, res));
  o.detail << " panel-resolution gap=" << fmt(gap, 3) << " (SE " << fmt(gap_se, 3) << ")";
  o.detail << " seed=2025 iterations=" << m.iterations << " max|dev|/SE=" << fmt(worst_se, 3) << " order=";
  for (std::size_t i = 0; i < ranked.size(); ++i) o.detail << (i ? ">" : "") << ranked[i].attribute;
}

double naive_ll(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& b) {
  double s = 0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    double eta = 0;
    for (Eigen::Index j = 0; j < X.cols(); ++j) eta += X(i, j) * b[j];
    const double mu = 1 / (1 + std::exp(-eta));
    s += y[i] * std::log(mu) + (1 - y[i]) * std::log(1 - mu);
  }
  return s;
}

void numerical_checks(Outcome& o) {
  testing::Gen g(404);
  double grad_err = 0;
  for (int inst = 0; inst < 3; ++inst) {
    const Eigen::Index n = 25 + 5 * inst, p = 3 + inst;
    Eigen::MatrixXd X(n, p);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < p; ++j) X(i, j) = g.real(-1, 1);
      y[i] = g.coin();
    }
    for (int pt = 0; pt < 5; ++pt) {
      Eigen::VectorXd b(p);
      for (Eigen::Index j = 0; j < p; ++j) b[j] = g.real(-1, 1);
      const auto grad = estimation::score(X, y, b);
      for (Eigen::Index j = 0; j < p; ++j) {
        Eigen::VectorXd up = b, dn = b;
        up[j] += 1e-5;
        dn[j] -= 1e-5;
        const double fd = (naive_ll(X, y, up) - naive_ll(X, y, dn)) / 2e-5;
        grad_err = std::max(grad_err, std::abs(grad[j] - fd) / std::max(1.0, std::abs(fd)));
      }
    }
  }
  o.require(grad_err < 1e-6, "gradient relative error");

  double phi_err = 0;
  for (double x = -12; x <= 12; x += 0.005) {
    phi_err = std::max(phi_err, std::abs(estimation::normal_cdf(x) + estimation::normal_cdf(-x) - 1));
  }
  o.require(phi_err < 1e-12, "Phi symmetry");

  // Foldover data from a dummy-model respondent with nonzero position bias.
  const auto resp = twin::SyntheticRespondent::matching_dummy_model(
      testing::kReferenceIntercept, testing::reference_coefficients(), twin::DecisionRule::logistic_sample, 0);
  std::vector<twin::ChoiceRecord> recs;
  const auto ts = tasks();
  for (std::size_t r = 0; r < 200; ++r) {
    auto rr = resp;
    rr.seed = util::mix64(99 ^ util::mix64(r + 1));
    for (const auto& t : ts) {
      auto rng = twin::task_rng(rr, t.task_id);
      recs.push_back({"S" + std::to_string(r), t.task_id, twin::synthetic_choice(rr, t, rng), "", {}, 0, "synthetic"});
    }
  }
  const auto dummy_enc = estimation::encode(recs, ts, scheme(), estimation::Encoding::paper_dummy);
  const auto dummy = estimation::fit_logit(dummy_enc);
  auto diff_enc = estimation::encode(recs, ts, scheme(), estimation::Encoding::signed_difference);
  Eigen::MatrixXd with_const(diff_enc.X.rows(), diff_enc.X.cols() + 1);
  with_const.col(0).setOnes();
  with_const.rightCols(diff_enc.X.cols()) = diff_enc.X;
  diff_enc.X = with_const;
  diff_enc.column_names.insert(diff_enc.column_names.begin(), "constant");
  const auto diff = estimation::fit_logit(diff_enc);
  const double gap = std::abs(dummy.log_likelihood - diff.log_likelihood);
  o.require(gap < 1e-6, "encoding-equivalence LL gap");
  const bool pd = Eigen::LLT<Eigen::MatrixXd>(dummy.covariance).info() == Eigen::Success &&
                  Eigen::LLT<Eigen::MatrixXd>(diff.covariance).info() == Eigen::Success;
  o.require(pd, "covariance positive definite");
  o.detail << " grad_rel_err=" << grad_err << " phi_sym_err=" << phi_err << " ll_gap=" << gap
           << " cov_pd=" << (pd ? "yes" : "no");
}

void pseudo_r2(Outcome& o) {
  const double r2 = estimation::mcfadden_r2(-1697.5, -2075.06);
  o.require(std::abs(r2 - 0.182) <= 0.0005, "0.182 +/- 0.0005");
  o.detail << " R2=" << fmt(r2, 5);
}

std::string doc_line(const std::string& id, const std::string& user, std::int64_t ts, const std::string& text) {
  return json{{"doc_id", id}, {"user_id", user}, {"timestamp", ts}, {"community", "monitors"}, {"kind", "post"},
              {"text", text}}
      .dump();
}

void leakage_suite(Outcome& o) {
  testing::Gen g(6006);
  twin::RespondentConfig config;
  config.backend = twin::BackendKind::keyword;
  config.max_in_flight = 1;
  twin::KeywordBackend backend;
  retrieval::HashingEmbedder embedder;
  std::size_t retrieved = 0, boundary_docs = 0, violations = 0;
  for (int fixture = 0; fixture < 1000; ++fixture) {
    const std::int64_t cutoff = g.integer(100, 900);
    const int n = static_cast<int>(g.integer(3, 25));
    std::vector<std::string> lines;
    std::map<std::string, std::int64_t> ts_of;
    for (int i = 0; i < n; ++i) {
      const std::int64_t ts = g.coin() ? cutoff : g.integer(0, 1000);
      const std::string id = "d" + std::to_string(i);
      ts_of[id] = ts;
      boundary_docs += ts == cutoff;
      lines.push_back(doc_line(id, "u", ts, "prefer OLED Pro " + g.sentence(static_cast<int>(g.integer(1, 8)))));
    }
    lines.push_back(doc_line("src", "u", cutoff, "prefer OLED Pro, source review"));
    ts_of["src"] = cutoff;
    corpus::CorpusStore store;
    store.ingest(lines);
    const validation::GroundTruthCase gt{"c", "u", "src", cutoff, "Panel Type", "OLED Pro", "IPS Black",
                                         g.coin() ? twin::Choice::A : twin::Choice::B};
    const auto rep = validation::evaluate({gt}, store, {config, backend, embedder});
    violations += rep.leakage_violations;
    for (const auto& c : rep.cases) {
      for (const auto& id : c.retrieved_doc_ids) {
        ++retrieved;
        if (id == "src" || ts_of.at(id) >= cutoff) ++violations;
      }
    }
  }
  o.require(violations == 0, "no leaked document");
  o.require(boundary_docs > 0, "boundary documents present");
  o.detail << " fixtures=1000 retrieved=" << retrieved << " boundary_docs=" << boundary_docs
           << " violations=" << violations;
}

struct Pref {
  std::string attribute, a, b;
};

void write_e2e_fixture(const std::filesystem::path& dir) {
  const std::vector<Pref> prefs{{"Screen Size", "27-inch", "34-inch"},
                                {"Aspect Ratio", "16:9 (Standard)", "21:9 (Ultrawide)"},
                                {"Panel Type", "OLED Pro", "IPS Black"},
                                {"Refresh Rate", "120Hz", "240Hz"},
                                {"Resolution Class", "4K-class", "8K-class"}};
  const std::vector<std::string> noise{"The stand is sturdy enough for a heavy arm.",
                                       "Returned the first unit because of a dead pixel.",
                                       "Brightness uniformity is fine in a dark room.",
                                       "The menu joystick is fiddly but works."};
  std::string docs, cases;
  for (int u = 0; u < 20; ++u) {
    char id[8];
    std::snprintf(id, sizeof id, "e%02d", u + 1);
    const auto& p = prefs[static_cast<std::size_t>(u) % prefs.size()];
    const bool truth_a = u % 2 == 0;
    const std::string& pick = truth_a ? p.a : p.b;
    const std::string& other = truth_a ? p.b : p.a;
    const std::int64_t base = 1600000000 + u * 10000;
    docs += doc_line(std::string(id) + "-pref", id, base, "Tried both side by side and I prefer " + pick + " over " + other + ".") + "\n";
    for (std::size_t k = 0; k < noise.size(); ++k) {
      docs += doc_line(std::string(id) + "-n" + std::to_string(k), id, base + 10 + static_cast<std::int64_t>(k), noise[k]) + "\n";
    }
    docs += doc_line(std::string(id) + "-src", id, base + 500, "Comparison: I prefer " + pick + " over " + other + ", no contest.") + "\n";
    docs += doc_line(std::string(id) + "-later", id, base + 900, "A year on, I prefer " + other + " after all.") + "\n";
    cases += json{{"case_id", std::string("case-") + id}, {"user_id", id}, {"source_doc_id", std::string(id) + "-src"},
                  {"source_timestamp", base + 500}, {"attribute", p.attribute}, {"option_a", p.a},
                  {"option_b", p.b}, {"truth", truth_a ? "A" : "B"}}
                 .dump() +
             "\n";
  }
  util::write_file(dir / "e2e_reviews.jsonl", docs);
  util::write_file(dir / "e2e_cases.jsonl", cases);
}

void end_to_end(Outcome& o) {
  testing::ScratchDir dir("accept-e2e");
  write_e2e_fixture(dir.path());
  json run = {{"corpus_input", "e2e_reviews.jsonl"},
              {"workspace", "ws"},
              {"scheme_file", (testing::data_dir() / "monitor_scheme.json").string()},
              {"seed", 7},
              {"respondent", {{"backend", "keyword"}, {"keyword_default", "A"}, {"rag_enabled", true}}},
              {"embedding", {{"provider", "local"}}},
              {"validation", {{"cases_file", "e2e_cases.jsonl"}}}};
  const auto with_rag = pipeline::RunConfig::from_json(run, dir.path());
  must([&] { return pipeline::cmd_ingest(with_rag); }, o, "ingest");
  must([&] { return pipeline::cmd_index(with_rag); }, o, "index");
  const auto r1 = must([&] { return pipeline::cmd_validate(with_rag); }, o, "validate");
  const pipeline::Workspace ws{with_rag.workspace};
  const auto rag = json::parse(util::read_file(ws.validation_report()));
  run["respondent"]["rag_enabled"] = false;
  const auto without = pipeline::RunConfig::from_json(run, dir.path());
  must([&] { return pipeline::cmd_validate(without); }, o, "validate without RAG");
  const auto blind = json::parse(util::read_file(ws.validation_report()));
  if (!o.pass) return;
  o.require(rag["total"] == 20, "20 cases");
  o.require(rag["accuracy"] == "1.0000", "accuracy 1.0000 with RAG");
  o.require(rag["leakage_violations"] == 0, "no leakage");
  const double blind_acc = std::stod(blind["accuracy"].get<std::string>());
  o.require(blind_acc < 0.6, "accuracy below 0.6 without RAG");
  o.detail << " users=20 rag=" << rag["accuracy"].get<std::string>() << " no_rag=" << blind["accuracy"].get<std::string>();
}

void parser_robustness(Outcome& o) {
  const std::vector<std::pair<std::string, twin::Choice>> accepted{
      {"```json\n{\"choice\": \"B\"}\n```", twin::Choice::B},
      {"{\"choice\": \"a\"}", twin::Choice::A},
      {"Having weighed it up, here is my answer: {\"choice\": \"B\"} - thanks!", twin::Choice::B}};
  for (const auto& [raw, want] : accepted) {
    try {
      o.require(twin::parse_choice(raw) == want, "parsed letter");
    } catch (const std::exception& e) {
      o.require(false, std::string("rejected a valid reply: ") + e.what());
    }
  }
  twin::RespondentConfig config;
  config.backend = twin::BackendKind::keyword;
  config.rag_enabled = false;
  config.max_retries = 2;
  int calls = 0;
  twin::ScriptedBackend invalid("invalid", [&](const twin::BackendRequest&) {
    ++calls;
    return std::string("{\"choice\": \"maybe\"");
  });
  const twin::AskEnvironment env{config, invalid, nullptr};
  bool failed = false;
  int attempts = 0;
  try {
    twin::ask(env, twin::Respondent{"u", nullptr, std::nullopt, {}}, twin::Question{"T01", "A text", "B text", "q", nullptr});
  } catch (const twin::TaskFailure& f) {
    failed = true;
    attempts = f.attempts;
  }
  o.require(failed, "invalid reply fails");
  o.require(attempts == config.max_retries + 1 && calls == attempts, "fails after retries");
  o.detail << " fenced/case-varied/prose accepted; invalid failed after " << attempts << " attempts";
}

void determinism(Outcome& o) {
  const auto full = [&](const std::filesystem::path& root) {
    const json run = {{"corpus_input", (testing::data_dir() / "reviews_small.jsonl").string()},
                      {"workspace", (root / "ws").string()},
                      {"scheme_file", (testing::data_dir() / "monitor_scheme.json").string()},
                      {"seed", 31337},
                      {"respondent", {{"backend", "synthetic"}}},
                      {"synthetic",
                       {{"respondents", 200},
                        {"dummy_model",
                         {{"intercept", testing::kReferenceIntercept}, {"coefficients", testing::reference_coefficients()}}}}}};
    const auto c = pipeline::RunConfig::from_json(run, root);
    must([&] { return pipeline::cmd_ingest(c); }, o, "ingest");
    must([&] { return pipeline::cmd_index(c); }, o, "index");
    must([&] { return pipeline::cmd_design(c); }, o, "design");
    must([&] { return pipeline::cmd_run(c); }, o, "run");
    must([&] { return pipeline::cmd_fit(c); }, o, "fit");
    must([&] { return pipeline::cmd_report(c); }, o, "report");
    return json::parse(util::read_file(pipeline::Workspace{c.workspace}.manifest()))["artifacts"];
  };
  testing::ScratchDir a("accept-det-a"), b("accept-det-b");
  const auto m1 = full(a.path());
  const auto m2 = full(b.path());
  o.require(!m1.empty(), "manifest lists artifacts");
  o.require(m1 == m2, "identical checksums");
  o.detail << " artifacts=" << m1.size() << " identical=" << (m1 == m2 ? "yes" : "no");
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "report arithmetic", 1000, report_arithmetic},
      {2, "design properties", 1000, design_properties},
      {3, "estimator recovery", 10000, estimator_recovery},
      {4, "numerical checks", 0, numerical_checks},
      {5, "pseudo R2 consistency", 0, pseudo_r2},
      {6, "leakage suite", 0, leakage_suite},
      {7, "end-to-end synthetic validation", 30000, end_to_end},
      {8, "parser robustness", 0, parser_robustness},
      {9, "full-pipeline determinism", 0, determinism},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    Outcome o;
    const auto start = std::chrono::steady_clock::now();
    try {
      c.body(o);
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    if (c.limit_ms > 0 && ms >= c.limit_ms) o.require(false, "runtime limit " + fmt(c.limit_ms, 0) + " ms");
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << c.number << " " << c.name << ":" << o.detail.str() << " ("
              << fmt(ms, 1) << " ms)" << std::endl;
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failures)) << "/" << criteria.size() << " criteria passed"
            << std::endl;
  return failures == 0 ? 0 : 1;
}
