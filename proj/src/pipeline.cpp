#include "cdt/pipeline.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "cdt/corpus.hpp"
#include "cdt/design.hpp"
#include "cdt/util.hpp"
#include "cdt/validation.hpp"

namespace cdt::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("run file: bad value for \"") + key + "\": " + e.what());
  }
}

json section(const json& j, const char* key) {
  if (!j.contains(key)) return json::object();
  if (!j.at(key).is_object()) throw UsageError(std::string("run file: \"") + key + "\" must be an object");
  return j.at(key);
}

std::string require_env(const std::string& var, const char* what) {
  if (var.empty()) throw UsageError(std::string(what) + ": api_key_env is not set in the run file");
  const char* value = std::getenv(var.c_str());
  if (value == nullptr || *value == '\0') {
    throw UsageError(std::string(what) + ": environment variable " + var + " is not set");
  }
  return value;
}

void require_file(const fs::path& path, const char* what) {
  if (path.empty()) throw UsageError(std::string(what) + " is not configured");
  if (!fs::is_regular_file(path)) throw UsageError(std::string(what) + " not found: " + path.string());
}

class Stopwatch {
 public:
  double elapsed_ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

CommandResult finish(const RunConfig& config, const char* stage, const Stopwatch& clock,
                     CommandResult result) {
  update_manifest(config, stage, clock.elapsed_ms());
  return result;
}

design::AttributeScheme load_scheme(const RunConfig& config) {
  require_file(config.scheme_file, "scheme file");
  try {
    return design::AttributeScheme::load(config.scheme_file);
  } catch (const design::DesignError& e) {
    throw UsageError(e.what());
  }
}

corpus::CorpusStore open_store(const Workspace& ws) {
  if (!fs::exists(ws.store() / "index.json")) {
    throw UsageError("no corpus store in " + ws.store().string() + "; run ingest first");
  }
  return corpus::CorpusStore::open(ws.store());
}

std::vector<design::ChoiceTask> load_tasks(const Workspace& ws, const design::AttributeScheme& scheme) {
  if (!fs::is_regular_file(ws.tasks())) {
    throw UsageError("no tasks file " + ws.tasks().string() + "; run design first");
  }
  try {
    return design::tasks_from_json(scheme, json::parse(util::read_file(ws.tasks())));
  } catch (const std::exception& e) {
    throw UsageError(std::string("tasks file: ") + e.what());
  }
}

std::shared_ptr<retrieval::EmbeddingProvider> make_embedder(const RunConfig& config,
                                                            const Overrides& overrides) {
  if (overrides.embedder) return overrides.embedder;
  const auto& e = config.embedding;
  if (e.provider == "local") return std::make_shared<retrieval::HashingEmbedder>(e.dimension);
  if (e.provider == "remote") {
    if (e.endpoint.empty() || e.model_id.empty()) {
      throw UsageError("remote embedding provider needs endpoint and model_id");
    }
    retrieval::RemoteEmbedderConfig rc{e.endpoint, e.model_id, require_env(e.api_key_env, "embedding"),
                                       e.dimension};
    return std::make_shared<retrieval::RemoteEmbedder>(std::move(rc));
  }
  throw UsageError("unknown embedding provider: " + e.provider);
}

retrieval::RetryPolicy embed_retry(const RunConfig& config) {
  return retrieval::RetryPolicy{config.embedding.max_retries, std::chrono::milliseconds(200)};
}

std::vector<std::string> selected_users(const RunConfig& config, const corpus::CorpusStore& store) {
  if (config.users.empty()) return store.user_ids();
  for (const auto& u : config.users) {
    if (!store.load_user(u)) throw UsageError("configured user not in store: " + u);
  }
  return config.users;
}

/// Loads the saved index when it matches the corpus and provider, otherwise
/// builds and saves a fresh one.
retrieval::UserVectorIndex index_for(const Workspace& ws, const corpus::UserCorpus& corpus,
                                     retrieval::EmbeddingProvider& embedder,
                                     const retrieval::RetryPolicy& retry) {
  const auto path = ws.index_file(corpus.user_id);
  if (fs::exists(path)) {
    auto index = retrieval::UserVectorIndex::load(path);
    bool current = index.provider_id() == embedder.id() && index.size() == corpus.documents.size();
    for (std::size_t i = 0; current && i < index.size(); ++i) {
      current = index.entries()[i].doc_id == corpus.documents[i].doc_id;
    }
    if (current) return index;
  }
  auto index = retrieval::build_index(corpus, embedder, retry);
  index.save(path);
  return index;
}

std::string write_json(const fs::path& path, const ordered_json& j) {
  std::string text = j.dump(2) + "\n";
  util::write_file(path, text);
  return text;
}

}  // namespace

// RunConfig ---------------------------------------------------------------------

RunConfig RunConfig::from_json(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw UsageError("run file must hold a JSON object");
  RunConfig c;
  c.snapshot = j;
  c.corpus_input = resolve(base_dir, get_or<std::string>(j, "corpus_input", ""));
  c.workspace = resolve(base_dir, get_or<std::string>(j, "workspace", "workspace"));
  c.scheme_file = resolve(base_dir, get_or<std::string>(j, "scheme_file", ""));
  c.cap = get_or<std::size_t>(j, "cap", corpus::kDefaultCap);
  if (c.cap == 0) throw UsageError("cap must be positive");
  c.seed = get_or<std::uint64_t>(j, "seed", 0);

  const json d = section(j, "design");
  c.fraction_exponent = get_or<std::size_t>(d, "fraction_exponent", 1);

  const json r = section(j, "respondent");
  try {
    c.respondent.backend = twin::parse_backend_kind(get_or<std::string>(r, "backend", "synthetic"));
    c.synthetic.rule =
        twin::parse_decision_rule(get_or<std::string>(section(j, "synthetic"), "decision_rule", "logistic_sample"));
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("run file: ") + e.what());
  }
  c.respondent.model_id = get_or<std::string>(r, "model_id", "");
  c.respondent.temperature = get_or<double>(r, "temperature", 0.0);
  c.respondent.max_retries = get_or<int>(r, "max_retries", 2);
  c.respondent.rag_enabled = get_or<bool>(r, "rag_enabled", true);
  c.respondent.retrieval_k = get_or<std::size_t>(r, "retrieval_k", retrieval::kDefaultK);
  c.respondent.memory_char_budget = get_or<std::size_t>(r, "memory_char_budget", twin::kDefaultMemoryBudget);
  c.respondent.max_in_flight = get_or<std::size_t>(r, "max_in_flight", 4);
  try {
    c.respondent.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("run file: ") + e.what());
  }
  c.chat.endpoint = get_or<std::string>(r, "endpoint", "");
  c.chat.api_key_env = get_or<std::string>(r, "api_key_env", "");
  c.chat.timeout_seconds = get_or<int>(r, "timeout_seconds", 120);
  const auto keyword_default = twin::parse_choice_letter(get_or<std::string>(r, "keyword_default", "A"));
  if (!keyword_default) throw UsageError("run file: keyword_default must be A or B");
  c.keyword_default = *keyword_default;
  c.users = get_or<std::vector<std::string>>(r, "users", {});

  const json s = section(j, "synthetic");
  c.synthetic.respondents = get_or<std::size_t>(s, "respondents", 200);
  c.synthetic.position_bias = get_or<double>(s, "position_bias", 0.0);
  if (s.contains("partworths")) {
    c.synthetic.partworths = get_or<std::vector<std::vector<double>>>(s, "partworths", {});
  }
  if (s.contains("dummy_model")) {
    const json& m = s.at("dummy_model");
    c.synthetic.intercept = get_or<double>(m, "intercept", 0.0);
    c.synthetic.coefficients = get_or<std::vector<double>>(m, "coefficients", {});
  }
  if (c.synthetic.partworths && c.synthetic.coefficients) {
    throw UsageError("run file: give either synthetic.partworths or synthetic.dummy_model, not both");
  }

  const json e = section(j, "embedding");
  c.embedding.provider = get_or<std::string>(e, "provider", "local");
  c.embedding.dimension = get_or<std::size_t>(e, "dimension", retrieval::kDefaultDimension);
  c.embedding.endpoint = get_or<std::string>(e, "endpoint", "");
  c.embedding.model_id = get_or<std::string>(e, "model_id", "");
  c.embedding.api_key_env = get_or<std::string>(e, "api_key_env", "");
  c.embedding.max_retries = get_or<int>(e, "max_retries", 2);
  if (c.embedding.dimension == 0) throw UsageError("embedding dimension must be positive");

  const json est = section(j, "estimation");
  try {
    c.encoding = estimation::parse_encoding(get_or<std::string>(est, "encoding", "paper_dummy"));
  } catch (const std::exception& ex) {
    throw UsageError(std::string("run file: ") + ex.what());
  }

  const json v = section(j, "validation");
  c.cases_file = resolve(base_dir, get_or<std::string>(v, "cases_file", ""));
  c.validation_enabled = get_or<bool>(v, "enabled", true);
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::string text;
  try {
    text = util::read_file(path);
  } catch (const std::exception& e) {
    throw UsageError(std::string("cannot read run file: ") + e.what());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw UsageError("run file parse error at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  return from_json(j, fs::absolute(path).parent_path());
}

fs::path Workspace::index_file(const std::string& user_id) const {
  return indexes() / (fs::path(corpus::partition_file_name(user_id)).stem().string() + ".cdtidx");
}

// Manifest ------------------------------------------------------------------------

std::map<std::string, std::string> artifact_checksums(const Workspace& ws) {
  std::map<std::string, std::string> sums;
  if (!fs::exists(ws.root)) return sums;
  for (const auto& entry : fs::recursive_directory_iterator(ws.root)) {
    if (!entry.is_regular_file()) continue;
    if (entry.path() == ws.manifest()) continue;
    if (entry.path().extension() == ".tmp") continue;
    sums[fs::relative(entry.path(), ws.root).generic_string()] = util::sha256_file(entry.path());
  }
  return sums;
}

void update_manifest(const RunConfig& config, const std::string& stage, double elapsed_ms) {
  const Workspace ws{config.workspace};
  ordered_json timings = ordered_json::object();
  if (fs::exists(ws.manifest())) {
    try {
      const auto old = ordered_json::parse(util::read_file(ws.manifest()));
      if (old.contains("stage_timings_ms")) timings = old.at("stage_timings_ms");
    } catch (const std::exception&) {
      // an unreadable manifest is rebuilt from scratch
    }
  }
  timings[stage] = elapsed_ms;
  ordered_json m;
  m["tool_version"] = kToolVersion;
  m["seed"] = config.seed;
  m["config"] = config.snapshot;
  ordered_json artifacts = ordered_json::object();
  for (const auto& [path, sum] : artifact_checksums(ws)) artifacts[path] = sum;
  m["artifacts"] = std::move(artifacts);
  m["stage_timings_ms"] = std::move(timings);
  write_json(ws.manifest(), m);
}

// Commands ----------------------------------------------------------------------

CommandResult cmd_ingest(const RunConfig& config) {
  Stopwatch clock;
  const Workspace ws{config.workspace};
  if (config.corpus_input.empty()) throw UsageError("corpus_input is not configured");
  std::ifstream in(config.corpus_input, std::ios::binary);
  if (!in) throw UsageError("cannot read corpus input: " + config.corpus_input.string());

  corpus::CorpusStore store;
  if (fs::exists(ws.store() / "index.json")) store = corpus::CorpusStore::open(ws.store());
  const auto report = store.ingest(in, config.cap);
  store.save(ws.store());
  write_json(ws.ingest_report(), report.to_json());
  std::ostringstream out;
  out << "ingested " << report.accepted << " records (" << report.rejected << " rejected, "
      << report.deduped << " duplicates, " << report.capped << " over cap) into "
      << store.user_count() << " users\n";
  return finish(config, "ingest", clock, {0, out.str()});
}

CommandResult cmd_index(const RunConfig& config, const Overrides& overrides) {
  Stopwatch clock;
  const Workspace ws{config.workspace};
  const auto store = open_store(ws);
  auto embedder = make_embedder(config, overrides);
  const auto retry = embed_retry(config);
  std::size_t documents = 0;
  const auto users = selected_users(config, store);
  for (const auto& user : users) {
    const auto corpus = store.load_user(user);
    const auto index = retrieval::build_index(*corpus, *embedder, retry);
    index.save(ws.index_file(user));
    documents += index.size();
  }
  std::ostringstream out;
  out << "indexed " << documents << " documents for " << users.size() << " users with " << embedder->id()
      << "\n";
  return finish(config, "index", clock, {0, out.str()});
}

CommandResult cmd_design(const RunConfig& config) {
  Stopwatch clock;
  const Workspace ws{config.workspace};
  const auto scheme = load_scheme(config);
  if (!scheme.all_two_level()) {
    throw UsageError("paired mirror tasks need every attribute to have exactly 2 levels");
  }
  design::DesignMatrix matrix;
  try {
    matrix = design::fractional_factorial(scheme, config.fraction_exponent);
  } catch (const design::DesignError& e) {
    throw UsageError(e.what());
  }
  const auto tasks = design::build_paired_tasks(scheme, matrix);
  const auto report = design::verify_orthogonality(scheme, matrix);
  util::write_file(ws.design_csv(), design::design_csv(scheme, matrix));
  write_json(ws.tasks(), design::tasks_to_json(scheme, tasks));
  write_json(ws.orthogonality(), report.to_json(scheme));

  std::ostringstream out;
  out << matrix.run_count() << " runs, " << tasks.size() << " tasks";
  if (!matrix.defining_words.empty()) {
    out << ", defining relation I = " << util::join(matrix.defining_words, " = ") << ", resolution "
        << design::resolution(matrix);
  }
  out << "\northogonality: " << (report.passed ? "passed" : "FAILED") << "\n";
  for (const auto& f : report.failures) out << "  " << f << "\n";
  return finish(config, "design", clock, {report.passed ? 0 : 1, out.str()});
}

std::unordered_map<std::string, twin::SyntheticRespondent> synthetic_panel(
    const RunConfig& config, const design::AttributeScheme& scheme, std::vector<std::string>* ids) {
  const auto& s = config.synthetic;
  if (s.respondents == 0) throw UsageError("synthetic.respondents must be positive");
  std::unordered_map<std::string, twin::SyntheticRespondent> panel;
  const std::size_t width = std::max<std::size_t>(3, std::to_string(s.respondents).size());
  for (std::size_t i = 0; i < s.respondents; ++i) {
    const std::string n = std::to_string(i + 1);
    const std::string id = "S" + std::string(width - n.size(), '0') + n;
    const std::uint64_t seed = util::mix64(config.seed ^ util::mix64(i + 1));
    twin::SyntheticRespondent r;
    if (s.coefficients) {
      if (s.coefficients->size() != scheme.size()) {
        throw UsageError("synthetic.dummy_model needs one coefficient per attribute");
      }
      r = twin::SyntheticRespondent::matching_dummy_model(s.intercept.value_or(0.0), *s.coefficients, s.rule,
                                                          seed);
    } else {
      if (!s.partworths) throw UsageError("synthetic backend needs synthetic.partworths or synthetic.dummy_model");
      if (s.partworths->size() != scheme.size()) {
        throw UsageError("synthetic.partworths needs one row per attribute");
      }
      for (std::size_t j = 0; j < scheme.size(); ++j) {
        if ((*s.partworths)[j].size() != scheme[j].levels.size()) {
          throw UsageError("synthetic.partworths row for " + scheme[j].name + " has the wrong length");
        }
      }
      r.partworths = *s.partworths;
      r.position_bias = s.position_bias;
      r.rule = s.rule;
      r.seed = seed;
    }
    if (ids) ids->push_back(id);
    panel.emplace(id, std::move(r));
  }
  return panel;
}

CommandResult cmd_run(const RunConfig& config, const Overrides& overrides) {
  Stopwatch clock;
  const Workspace ws{config.workspace};
  const auto scheme = load_scheme(config);
  const auto tasks = load_tasks(ws, scheme);

  twin::RespondentConfig rc = config.respondent;
  std::shared_ptr<twin::RespondentBackend> backend = overrides.backend;
  std::vector<twin::Respondent> respondents;
  std::shared_ptr<retrieval::EmbeddingProvider> embedder;

  if (config.respondent.backend == twin::BackendKind::synthetic) {
    // Synthetic respondents answer from part-worths; there is nothing to retrieve.
    rc.rag_enabled = false;
    std::vector<std::string> ids;
    auto panel = synthetic_panel(config, scheme, &ids);
    if (!backend) backend = std::make_shared<twin::SyntheticBackend>(std::move(panel));
    for (const auto& id : ids) respondents.push_back({id, nullptr, std::nullopt, {}});
  } else {
    if (!backend) {
      if (config.respondent.backend == twin::BackendKind::remote_llm) {
        if (config.chat.endpoint.empty()) throw UsageError("remote_llm backend needs respondent.endpoint");
        if (config.respondent.model_id.empty()) throw UsageError("remote_llm backend needs respondent.model_id");
        twin::RemoteChatConfig chat{config.chat.endpoint, config.respondent.model_id,
                                    require_env(config.chat.api_key_env, "respondent"),
                                    std::chrono::seconds(config.chat.timeout_seconds)};
        backend = std::make_shared<twin::RemoteChatBackend>(std::move(chat));
      } else {
        backend = std::make_shared<twin::KeywordBackend>(config.keyword_default);
      }
    }
    const auto store = open_store(ws);
    if (rc.rag_enabled) embedder = make_embedder(config, overrides);
    for (const auto& user : selected_users(config, store)) {
      twin::Respondent r{user, nullptr, std::nullopt, {}};
      if (rc.rag_enabled) {
        auto corpus = *store.load_user(user);
        auto index = index_for(ws, corpus, *embedder, embed_retry(config));
        r.memory = std::make_shared<twin::TwinMemory>(std::move(corpus), std::move(index));
      }
      respondents.push_back(std::move(r));
    }
  }

  std::vector<twin::Question> questions;
  for (const auto& t : tasks) questions.push_back(twin::make_question(scheme, t));
  const twin::AskEnvironment env{rc, *backend, embedder.get()};
  const auto result = twin::run_panel(env, respondents, questions);

  util::write_file(ws.records(), twin::records_csv(result.records));
  util::write_file(ws.responses(), twin::responses_jsonl(result.records));
  write_json(ws.failures(), result.report_json());

  std::ostringstream out;
  out << result.records.size() << " choice records from " << respondents.size() << " respondents x "
      << questions.size() << " tasks; " << result.failures.size() << " failed\n";
  for (const auto& f : result.failures) {
    out << "  " << f.respondent_id << " " << f.task_id << ": " << f.reason << "\n";
  }
  return finish(config, "run", clock, {result.failures.empty() ? 0 : 1, out.str()});
}

CommandResult cmd_fit(const RunConfig& config) {
  Stopwatch clock;
  const Workspace ws{config.workspace};
  const auto scheme = load_scheme(config);
  const auto tasks = load_tasks(ws, scheme);
  require_file(ws.records(), "records file");
  std::vector<twin::ChoiceRecord> records;
  try {
    records = twin::parse_records_csv(util::read_file(ws.records()));
  } catch (const std::exception& e) {
    throw UsageError(std::string("records file: ") + e.what());
  }
  if (records.empty()) throw UsageError("records file holds no choices");

  estimation::FittedConjointModel model;
  try {
    const auto encoded = estimation::encode(records, tasks, scheme, config.encoding);
    util::write_file(ws.encoded(), estimation::encoded_csv(encoded));
    model = estimation::fit_logit(encoded);
  } catch (const estimation::RankDeficiencyError& e) {
    throw UsageError(std::string(e.what()) + " (dependent columns: " + util::join(e.dependent_columns, ", ") +
                     ")");
  } catch (const estimation::SeparationError& e) {
    throw UsageError(std::string("separation: ") + e.what());
  }
  write_json(ws.model(), estimation::model_to_json(model, scheme));
  const auto text = estimation::render_report(model, scheme);
  util::write_file(ws.model_report(), text);
  write_json(ws.model_report_json(), estimation::report_json(model, scheme));
  std::string out = text;
  if (!model.converged) out += "\nwarning: IRLS did not converge\n";
  return finish(config, "fit", clock, {model.converged ? 0 : 1, out});
}

CommandResult cmd_report(const RunConfig& config, const Overrides& overrides) {
  Stopwatch clock;
  const Workspace ws{config.workspace};
  const fs::path model_path = overrides.model_file.value_or(ws.model());
  require_file(model_path, "model file");
  estimation::FittedConjointModel model;
  std::optional<design::AttributeScheme> scheme;
  try {
    auto [m, s] = estimation::model_from_json(json::parse(util::read_file(model_path)));
    model = std::move(m);
    scheme = std::move(s);
  } catch (const std::exception& e) {
    throw UsageError("model file " + model_path.string() + ": " + e.what());
  }
  const auto text = estimation::render_report(model, *scheme);
  util::write_file(ws.report_dir() / "report.txt", text);
  write_json(ws.report_dir() / "report.json", estimation::report_json(model, *scheme));
  return finish(config, "report", clock, {0, text});
}

CommandResult cmd_validate(const RunConfig& config, const Overrides& overrides) {
  Stopwatch clock;
  const Workspace ws{config.workspace};
  if (!config.validation_enabled) return {0, "validation disabled in run file\n"};
  require_file(config.cases_file, "cases file");
  std::vector<validation::GroundTruthCase> cases;
  try {
    cases = validation::parse_cases_jsonl(util::read_file(config.cases_file));
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  const auto store = open_store(ws);

  std::shared_ptr<twin::RespondentBackend> backend = overrides.backend;
  if (!backend) {
    switch (config.respondent.backend) {
      case twin::BackendKind::synthetic:
        throw UsageError("validation needs a backend that reads prompts (keyword or remote_llm)");
      case twin::BackendKind::keyword:
        backend = std::make_shared<twin::KeywordBackend>(config.keyword_default);
        break;
      case twin::BackendKind::remote_llm: {
        if (config.chat.endpoint.empty()) throw UsageError("remote_llm backend needs respondent.endpoint");
        twin::RemoteChatConfig chat{config.chat.endpoint, config.respondent.model_id,
                                    require_env(config.chat.api_key_env, "respondent"),
                                    std::chrono::seconds(config.chat.timeout_seconds)};
        backend = std::make_shared<twin::RemoteChatBackend>(std::move(chat));
        break;
      }
    }
  }
  auto embedder = make_embedder(config, overrides);
  const validation::ValidationEnvironment env{config.respondent, *backend, *embedder, embed_retry(config)};
  const auto report = validation::evaluate(cases, store, env);
  write_json(ws.validation_report(), report.to_json());
  const auto text = report.render_text();
  util::write_file(ws.validation_text(), text);
  const int code = report.failed_to_answer == 0 && report.leakage_violations == 0 ? 0 : 1;
  return finish(config, "validate", clock, {code, text});
}

CommandResult guarded(const std::function<CommandResult()>& command) {
  try {
    return command();
  } catch (const UsageError& e) {
    return {2, std::string("error: ") + e.what() + "\n"};
  } catch (const design::DesignError& e) {
    return {2, std::string("error: ") + e.what() + "\n"};
  } catch (const corpus::StoreError& e) {
    return {2, std::string("error: ") + e.what() + "\n"};
  } catch (const std::exception& e) {
    return {1, std::string("error: ") + e.what() + "\n"};
  }
}

}  // namespace cdt::pipeline
