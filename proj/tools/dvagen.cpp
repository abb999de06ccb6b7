#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dva/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"dvagen: dynamic-vocabulary text generation"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  bool benchmark = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "json configuration file")->required();
    sub->add_option("--set", overrides, "override a config value, e.g. train.steps=50")->take_all();
  };
  auto* train = app.add_subcommand("train", "train a model on the configured corpus");
  auto* eval = app.add_subcommand("eval", "score generations on the test file");
  auto* chat = app.add_subcommand("chat", "interactive generation (/phrases a; b, /quit)");
  auto* serve = app.add_subcommand("serve", "run the HTTP API");
  for (auto* sub : {train, eval, chat, serve}) add_common(sub);
  eval->add_flag("--benchmark", benchmark, "also measure throughput and stage latency");

  CLI11_PARSE(app, argc, argv);

  dva::AppConfig config;
  try {
    config = dva::AppConfig::load(config_path);
    for (const auto& o : overrides) config.apply_override(o);
    config.validate();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  if (*train) return dva::cmd_train(config, std::cout, std::cerr);
  if (*eval) return dva::cmd_eval(config, benchmark, std::cout, std::cerr);
  if (*chat) return dva::cmd_chat(config, std::cin, std::cout, std::cerr);
  return dva::cmd_serve(config, std::cout, std::cerr);
}
