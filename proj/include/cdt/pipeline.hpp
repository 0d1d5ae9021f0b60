#pragma once

// Declarative run files and the pipeline commands behind the cdt tool.
// Stages talk to each other only through files in the workspace.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <unordered_map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdt/estimation.hpp"
#include "cdt/retrieval.hpp"
#include "cdt/twin.hpp"

namespace cdt::pipeline {

inline constexpr std::string_view kToolVersion = "0.1.0";

/// Bad invocation or configuration; maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EmbeddingSettings {
  std::string provider = "local";  // "local" or "remote"
  std::size_t dimension = retrieval::kDefaultDimension;
  std::string endpoint;
  std::string model_id;
  std::string api_key_env;
  int max_retries = 2;
};

struct ChatSettings {
  std::string endpoint;
  std::string api_key_env;
  int timeout_seconds = 120;
};

struct SyntheticSettings {
  std::size_t respondents = 200;
  twin::DecisionRule rule = twin::DecisionRule::logistic_sample;
  /// Either part-worths per attribute and level plus position_bias, or a
  /// level-2 dummy model (intercept + coefficients) to reproduce exactly.
  std::optional<std::vector<std::vector<double>>> partworths;
  double position_bias = 0.0;
  std::optional<double> intercept;
  std::optional<std::vector<double>> coefficients;
};

struct RunConfig {
  std::filesystem::path corpus_input;
  std::filesystem::path workspace;
  std::filesystem::path scheme_file;
  std::size_t cap = corpus::kDefaultCap;
  std::size_t fraction_exponent = 1;
  twin::RespondentConfig respondent;
  ChatSettings chat;
  twin::Choice keyword_default = twin::Choice::A;
  std::vector<std::string> users;  // empty: every user in the store
  SyntheticSettings synthetic;
  EmbeddingSettings embedding;
  estimation::Encoding encoding = estimation::Encoding::paper_dummy;
  std::filesystem::path cases_file;
  bool validation_enabled = true;
  std::uint64_t seed = 0;
  nlohmann::json snapshot;  // the run file as given

  /// Relative paths resolve against base_dir. Throws UsageError.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  static RunConfig load(const std::filesystem::path& path);
};

/// Artifact locations under the workspace.
struct Workspace {
  std::filesystem::path root;

  std::filesystem::path store() const { return root / "store"; }
  std::filesystem::path ingest_report() const { return root / "store" / "ingest_report.json"; }
  std::filesystem::path indexes() const { return root / "indexes"; }
  std::filesystem::path index_file(const std::string& user_id) const;
  std::filesystem::path design_csv() const { return root / "design" / "design.csv"; }
  std::filesystem::path tasks() const { return root / "design" / "tasks.json"; }
  std::filesystem::path orthogonality() const { return root / "design" / "orthogonality.json"; }
  std::filesystem::path records() const { return root / "run" / "records.csv"; }
  std::filesystem::path responses() const { return root / "run" / "responses.jsonl"; }
  std::filesystem::path failures() const { return root / "run" / "failures.json"; }
  std::filesystem::path model() const { return root / "model" / "model.json"; }
  std::filesystem::path encoded() const { return root / "model" / "encoded.csv"; }
  std::filesystem::path model_report() const { return root / "model" / "report.txt"; }
  std::filesystem::path model_report_json() const { return root / "model" / "report.json"; }
  std::filesystem::path report_dir() const { return root / "report"; }
  std::filesystem::path validation_report() const { return root / "validation" / "report.json"; }
  std::filesystem::path validation_text() const { return root / "validation" / "report.txt"; }
  std::filesystem::path manifest() const { return root / "manifest.json"; }
};

struct CommandResult {
  int exit_code = 0;
  std::string output;  // human-readable summary for stdout
};

/// Test seams; null members fall back to what the run file asks for.
struct Overrides {
  std::shared_ptr<twin::RespondentBackend> backend;
  std::shared_ptr<retrieval::EmbeddingProvider> embedder;
  std::optional<std::filesystem::path> model_file;  // cmd_report input
};

CommandResult cmd_ingest(const RunConfig& config);
CommandResult cmd_index(const RunConfig& config, const Overrides& overrides = {});
CommandResult cmd_design(const RunConfig& config);
CommandResult cmd_run(const RunConfig& config, const Overrides& overrides = {});
CommandResult cmd_fit(const RunConfig& config);
CommandResult cmd_report(const RunConfig& config, const Overrides& overrides = {});
CommandResult cmd_validate(const RunConfig& config, const Overrides& overrides = {});

/// Runs a command and maps exceptions onto exit codes: UsageError and
/// configuration-type failures to 2, anything else to 1. The message goes into
/// output.
CommandResult guarded(const std::function<CommandResult()>& command);

/// Synthetic panel ids "S001".. and their respondents, seeded from seed.
std::unordered_map<std::string, twin::SyntheticRespondent> synthetic_panel(
    const RunConfig& config, const design::AttributeScheme& scheme, std::vector<std::string>* ids);

/// Checksums of every artifact under the workspace except the manifest, keyed
/// by path relative to the workspace.
std::map<std::string, std::string> artifact_checksums(const Workspace& workspace);

/// Rewrites the manifest with fresh checksums and one more stage timing.
void update_manifest(const RunConfig& config, const std::string& stage, double elapsed_ms);

}  // namespace cdt::pipeline
