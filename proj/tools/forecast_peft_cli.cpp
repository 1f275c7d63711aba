// forecast-peft command-line driver.

#include <iostream>

#include <CLI11.hpp>

#include "fpeft/commands.hpp"

using namespace fpeft;

int main(int argc, char** argv) {
  CLI::App app{"Masked-autoencoder trajectory forecasting with parameter-efficient finetuning"};
  app.require_subcommand(1);
  CommandArgs a;
  a.log = [](const std::string& s) { std::cerr << s << "\n"; };

  auto common = [&](CLI::App* s) {
    s->add_option("--config", a.config, "run configuration (JSON)")->check(CLI::ExistingFile);
    s->add_option("--seed", a.seed, "overrides train.seed and data.seed");
    s->add_option("--mode", a.mode, "pretrain, full_ft, peft, peft_a, head_only or lora")
        ->check(CLI::IsMember({"pretrain", "full_ft", "peft", "peft_a", "head_only", "lora"}));
    s->add_option("--out", a.out, "output directory");
  };

  auto* gen = app.add_subcommand("gen-data", "write synthetic train/val scene files");
  common(gen);
  gen->add_option("--profile", a.profile, "generator preset, overrides data.profile");
  auto* pre = app.add_subcommand("pretrain", "masked-autoencoder pretraining");
  common(pre);
  pre->add_option("--resume", a.resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  auto* ft = app.add_subcommand("finetune", "finetune a pretrained backbone");
  common(ft);
  ft->add_option("--resume", a.resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  auto* ev = app.add_subcommand("eval", "forecast val_data and score it");
  common(ev);
  ev->add_option("--plugin", a.plugin, "attach a plugin to the pretrained backbone")->check(CLI::ExistingFile);
  ev->add_option("--checkpoint", a.checkpoint, "evaluate this checkpoint instead of config.pretrained")
      ->check(CLI::ExistingFile);
  ev->add_option("--horizon", a.horizon, "score only the first N future steps");
  auto* pa = app.add_subcommand("params", "parameter counts for a mode");
  common(pa);
  auto* ab = app.add_subcommand("ablate", "sweep one PEFT axis");
  common(ab);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    nlohmann::json (*run)(const CommandArgs&) = nullptr;
    if (*gen) run = cmd_gen_data;
    if (*pre) run = cmd_pretrain;
    if (*ft) run = cmd_finetune;
    if (*ev) run = cmd_eval;
    if (*pa) run = cmd_params;
    if (*ab) run = cmd_ablate;
    std::cout << run(a).dump(2) << std::endl;
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
