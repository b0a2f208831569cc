// SPDX-License-Identifier: Apache-2.0
//
// mgi-lab: dataset generation, evaluation, trace analysis and sweeps driven by
// one JSON config.
#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mgilab/commands.hpp"
#include "mgilab/config.hpp"

namespace {

struct Options {
  std::string config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Options& opts) {
  cmd->add_option("-c,--config", opts.config, "JSON config file");
  cmd->add_option("-s,--set", opts.overrides, "override a config key (key=value), repeatable");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal in-context learning attention lab"};
  app.require_subcommand(1);
  app.footer(mgilab::config_help());

  Options opts;
  struct Command {
    const char* name;
    const char* help;
    void (*run)(const mgilab::RunConfig&);
  };
  const Command commands[] = {
      {"gen", "generate the outlier dataset", mgilab::cmd_gen},
      {"eval", "run the condition matrix and write reports", mgilab::cmd_eval},
      {"analyze", "compute layer-wise attention metrics from traces", mgilab::cmd_analyze},
      {"sweep", "evaluate one RunReport per sweep value", mgilab::cmd_sweep},
  };
  std::vector<CLI::App*> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->footer(mgilab::config_help());
    add_common(sub, opts);
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (!subs[i]->parsed()) continue;
    try {
      const mgilab::RunConfig config = mgilab::load_config(opts.config, opts.overrides);
      commands[i].run(config);
      return 0;
    } catch (const std::exception& e) {
      std::fprintf(stderr, "mgi-lab %s: %s\n", commands[i].name, e.what());
      return mgilab::exit_code_for(e);
    }
  }
  return 2;
}
