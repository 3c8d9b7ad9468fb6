#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dualprec/cli.hpp"

namespace {

using dualprec::cli::kUsageError;

int parse_failure(const CLI::App& app, const CLI::ParseError& e) {
  if (e.get_exit_code() == static_cast<int>(CLI::ExitCodes::Success)) {
    std::cout << app.help();
    return 0;
  }
  std::cerr << "error: " << e.what() << '\n';
  return kUsageError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-precision quantized network training and precision switching"};
  app.require_subcommand(1);

  dualprec::cli::TrainArgs train;
  std::string seed, data_dir, epochs, phase1_epochs, bits;
  std::vector<std::string> sets;
  auto* train_cmd = app.add_subcommand("train", "Train a dual-precision model");
  train_cmd->add_option("--config", train.config_path, "key = value config file");
  train_cmd->add_option("--out", train.out, "Run directory (default runs/<name>)");
  train_cmd->add_option("--seed", seed, "Random seed");
  train_cmd->add_option("--data-dir", data_dir, "Dataset directory (default $DUALPREC_DATA)");
  train_cmd->add_option("--epochs", epochs, "Total epochs");
  train_cmd->add_option("--phase1-epochs", phase1_epochs, "Epochs in the shared-bit phase");
  train_cmd->add_option("--bits", bits, "Shared bit-width b (the model also serves b+1)");
  train_cmd->add_option("--set", sets, "Override any config key, key=value");

  dualprec::cli::EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Top-1 accuracy of a packed model");
  eval_cmd->add_option("model", eval.model_path, "Model file (.dpw)")->required();
  eval_cmd->add_option("--precision", eval.precision, "low or high")->capture_default_str();
  eval_cmd->add_option("--data-dir", eval.data_dir, "Dataset directory (default $DUALPREC_DATA)");
  eval_cmd->add_option("--dataset", eval.dataset, "mnist or cifar10 (default: from the model)");
  eval_cmd->add_option("--limit", eval.limit, "Evaluate only the first N test samples");

  dualprec::cli::SwitchArgs sw;
  auto* switch_cmd = app.add_subcommand("switch", "Strip or attach the up-scaling bit-plane");
  switch_cmd->add_option("model", sw.model_path, "Model file (.dpw)")->required();
  switch_cmd->add_option("--direction", sw.direction, "down or up")->required();
  switch_cmd->add_option("--bitplane", sw.bitplane, "Detached bit-plane (.dpb)");
  switch_cmd->add_option("--out", sw.out, "Output model path");

  std::string inspect_path;
  auto* inspect_cmd = app.add_subcommand("inspect", "Per-layer scales and level histograms");
  inspect_cmd->add_option("model", inspect_path, "Model file (.dpw)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return parse_failure(app, e);
  }

  try {
    if (train_cmd->parsed()) {
      if (!data_dir.empty()) train.overrides.emplace_back("data_dir", data_dir);
      if (!seed.empty()) train.overrides.emplace_back("seed", seed);
      if (!epochs.empty()) train.overrides.emplace_back("epochs", epochs);
      if (!phase1_epochs.empty()) train.overrides.emplace_back("phase1_epochs", phase1_epochs);
      if (!bits.empty()) train.overrides.emplace_back("bits", bits);
      for (const std::string& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) {
          std::cerr << "error: --set expects key=value, got '" << s << "'\n";
          return kUsageError;
        }
        train.overrides.emplace_back(s.substr(0, eq), s.substr(eq + 1));
      }
      return dualprec::cli::cmd_train(train, std::cout, std::cerr);
    }
    if (eval_cmd->parsed()) return dualprec::cli::cmd_eval(eval, std::cout, std::cerr);
    if (switch_cmd->parsed()) return dualprec::cli::cmd_switch(sw, std::cout, std::cerr);
    if (inspect_cmd->parsed()) return dualprec::cli::cmd_inspect(inspect_path, std::cout, std::cerr);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return dualprec::cli::kRuntimeFailure;
  }
  return kUsageError;
}
