// cdt: conjoint study with customer digital twins, stage by stage.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cdt/pipeline.hpp"

namespace pl = cdt::pipeline;

int main(int argc, char** argv) {
  CLI::App app{"Conjoint analysis with retrieval-grounded customer digital twins"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(pl::kToolVersion));

  std::string config_path = "run.json";
  std::optional<std::string> workspace;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "Run file (JSON)")->capture_default_str();
  app.add_option("--workspace", workspace, "Workspace directory; overrides the run file");
  app.add_option("--seed", seed, "Seed; overrides the run file");

  std::optional<std::string> model_file;
  auto* ingest = app.add_subcommand("ingest", "Load review JSONL into the corpus store");
  auto* index = app.add_subcommand("index", "Embed every user's corpus into a vector index");
  auto* design = app.add_subcommand("design", "Build the fractional factorial and mirror-pair tasks");
  auto* run = app.add_subcommand("run", "Ask every respondent every task");
  auto* fit = app.add_subcommand("fit", "Fit the logit model to the choice records");
  auto* report = app.add_subcommand("report", "Render tables from a stored model without refitting");
  report->add_option("--model", model_file, "Model JSON; defaults to the workspace model");
  auto* validate = app.add_subcommand("validate", "Score twins against revealed preferences");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const auto result = pl::guarded([&]() -> pl::CommandResult {
    auto config = pl::RunConfig::load(config_path);
    if (workspace) config.workspace = *workspace;
    if (seed) {
      config.seed = *seed;
      config.snapshot["seed"] = *seed;
    }
    pl::Overrides overrides;
    if (model_file) overrides.model_file = *model_file;
    if (*ingest) return pl::cmd_ingest(config);
    if (*index) return pl::cmd_index(config);
    if (*design) return pl::cmd_design(config);
    if (*run) return pl::cmd_run(config);
    if (*fit) return pl::cmd_fit(config);
    if (*report) return pl::cmd_report(config, overrides);
    if (*validate) return pl::cmd_validate(config);
    throw pl::UsageError("no subcommand given");
  });
  (result.exit_code == 2 ? std::cerr : std::cout) << result.output;
  return result.exit_code;
}
