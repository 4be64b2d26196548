#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "vocadt/common.hpp"
#include "vocadt/pipeline.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> doc_unit;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("config", flags.config, "Pipeline config (JSON)")->required();
  cmd->add_option("--seed", flags.seed, "Override the global seed");
  cmd->add_option("--out", flags.out, "Override the output directory");
  cmd->add_option("--doc-unit", flags.doc_unit, "Document unit: line or para");
  cmd->add_flag("--force", flags.force, "Rerun even when inputs are unchanged");
}

vocadt::pipeline::Pipeline make_pipeline(const CommonFlags& flags) {
  vocadt::pipeline::Overrides o;
  o.seed = flags.seed;
  if (flags.out) o.out_dir = *flags.out;
  if (flags.doc_unit) {
    try {
      o.doc_unit = vocadt::textcorpus::parse_doc_unit(*flags.doc_unit);
    } catch (const vocadt::Error& e) {
      throw vocadt::ConfigError(e.what());
    }
  }
  return vocadt::pipeline::Pipeline(vocadt::pipeline::load_config(flags.config, o));
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("vocadt"));

  CLI::App app{"Vocabulary adaptation pipeline for a tiny decoder-only language model"};
  app.require_subcommand(1);
  CommonFlags flags;
  std::string stage;

  std::vector<std::pair<CLI::App*, std::string>> commands;
  for (const auto& name : vocadt::pipeline::stage_names()) {
    auto* cmd = app.add_subcommand(name, "Run the '" + name + "' stage");
    add_common(cmd, flags);
    commands.emplace_back(cmd, name);
  }
  auto* all = app.add_subcommand("pipeline", "Run every stage in order, skipping completed ones");
  add_common(all, flags);
  all->add_option("--stage", stage, "Stop after this stage");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    auto pipeline = make_pipeline(flags);
    if (all->parsed()) {
      pipeline.run(stage, flags.force);
    } else {
      for (const auto& [cmd, name] : commands) {
        if (cmd->parsed()) pipeline.run_stage(name, flags.force);
      }
    }
  } catch (const vocadt::ConfigError& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const vocadt::NumericalError& e) {
    spdlog::error("{}", e.what());
    return 3;
  } catch (const vocadt::ValidationError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 0;
}
