// ulab <command> --config <path> [--out <dir>] [--seed <n>]
// Exit status: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <iostream>

#include "CLI11.hpp"
#include "ulab/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Memorize, trace and unlearn synthetic facts in a small transformer"};
  std::string command, config_path, out;
  std::optional<std::uint64_t> seed;
  app.add_option("command", command, "gen-data | train | trace | unlearn | evaluate | pipeline")->required();
  app.add_option("--config", config_path, "key = value configuration file")->required();
  app.add_option("--out", out, "output directory (overrides output_dir)");
  app.add_option("--seed", seed, "base seed (overrides seed)");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  const auto cmd = ulab::parse_command(command);
  if (!cmd) {
    std::cerr << "unknown command '" << command << "'\n" << app.help();
    return 1;
  }
  ulab::RunConfig config;
  try {
    config = ulab::parse_config(config_path);
  } catch (const ulab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  }
  if (!out.empty()) config.output_dir = out;
  if (seed) config.seed = *seed;

  try {
    ulab::run_command(*cmd, config, std::cerr);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
