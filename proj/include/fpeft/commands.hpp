#pragma once

// The forecast-peft commands as library calls. Each writes its artifacts and
// metrics.json into `out` and returns the same JSON.

#include <functional>
#include <optional>
#include <string>

#include "fpeft/harness.hpp"

namespace fpeft::inline FPEFT_PRECISION_NS {

struct CommandArgs {
  std::string config;  // empty: built-in desk defaults
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::string plugin;
  std::string out = ".";
  std::string resume;      // pretrain/finetune: continue this checkpoint
  std::string checkpoint;  // eval: use instead of config.pretrained
  std::string profile;     // gen-data: generator preset
  int horizon = -1;        // eval: overrides eval_horizon when >= 0
  std::function<void(const std::string&)> log;
};

// Config file plus command-line overrides, validated.
RunConfig resolve_config(const CommandArgs& a);

nlohmann::json cmd_gen_data(const CommandArgs& a);
nlohmann::json cmd_pretrain(const CommandArgs& a);
nlohmann::json cmd_finetune(const CommandArgs& a);
nlohmann::json cmd_eval(const CommandArgs& a);
nlohmann::json cmd_params(const CommandArgs& a);
nlohmann::json cmd_ablate(const CommandArgs& a);

}  // namespace fpeft
