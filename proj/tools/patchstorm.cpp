// patchstorm <command> [--config FILE] [--key value ...]
#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "patchstorm/cli.hpp"

int main(int argc, char** argv) {
  using namespace patchstorm;
  CLI::App app{"Multi-crop transfer attacks against a zoo of tiny ViT encoders"};
  std::string command, config_path;
  app.add_option("command", command, "gen-data | train-zoo | attack | profile-transfer | diagnose | eval")
      ->required()
      ->check(CLI::IsMember(cli::command_names()));
  app.add_option("--config", config_path, "flat key = value file");

  std::map<std::string, std::string> flag_values;
  std::map<std::string, CLI::Option*> flag_options;
  for (const auto& key : key_registry()) {
    std::string help = key.help + " [" + std::string(to_string(key.type)) + ", default '" + key.default_value + "']";
    flag_options[key.name] = app.add_option("--" + key.name, flag_values[key.name], help);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    std::vector<std::pair<std::string, std::string>> overrides;
    for (const auto& [name, opt] : flag_options) {
      if (opt->count() > 0) overrides.emplace_back(name, flag_values[name]);
    }
    const RunConfig rc = load_config(config_path.empty() ? std::nullopt : std::optional<std::filesystem::path>(config_path),
                                     overrides);
    cli::run_command(command, rc, std::cout);
    return 0;
  } catch (const Error& e) {
    std::cerr << "patchstorm " << command << ": " << e.what() << "\n";
    return cli::exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "patchstorm " << command << ": internal error: " << e.what() << "\n";
    return 2;
  }
}
