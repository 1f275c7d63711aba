#pragma once

#include <map>
#include <string>

#include "fpeft/model.hpp"

namespace fpeft::inline FPEFT_PRECISION_NS {

// Group of a parameter by name: cep, mcp, adapters, lora, md_head,
// conf_head, head (future head), aux_head (history/lane heads), layer_norm,
// bias, backbone_weights.
std::string parameter_group(const std::string& name);
bool is_additive_group(const std::string& group);  // cep, mcp, adapters
// Parameters created for finetuning rather than loaded from pretraining.
bool is_finetune_group(const std::string& group);

struct TrainabilityPlan {
  Mode mode = Mode::pretrain;
  std::map<std::string, bool> trainable;

  std::int64_t trainable_count(const ParameterStore& store) const;
};

TrainabilityPlan make_plan(const ParameterStore& store, Mode mode, const PeftConfig& peft);
void apply_plan(ParameterStore& store, const TrainabilityPlan& plan);

struct GroupCount {
  std::int64_t total = 0;
  std::int64_t trainable = 0;
};

struct ParamCount {
  std::int64_t total = 0;
  std::int64_t trainable = 0;
  std::int64_t additive = 0;
  std::map<std::string, GroupCount> groups;
};

// Counts by the current trainable flags of `store`.
ParamCount count_parameters(const ParameterStore& store);
void to_json(nlohmann::json& j, const ParamCount& c);

// Copy without any finetuning additions (prompts, adapters, LoRA, MLP
// decoder, confidence head).
ParameterStore backbone_only(const ParameterStore& store);

struct Plugin {
  Hash256 backbone_hash{};
  nlohmann::json meta;  // {"mode", "model", "peft"}
  ParameterStore params;
};

// "FPPL": magic, u8 version, 32-byte backbone hash, metadata JSON, u32 count,
// then (name, tensor) per trainable parameter of `finetuned`.
void save_plugin(const std::string& path, const ParameterStore& finetuned, const Hash256& backbone_hash,
                 const nlohmann::json& meta);
Plugin read_plugin(const std::string& path);
Plugin make_plugin(const ParameterStore& finetuned, const Hash256& backbone_hash, const nlohmann::json& meta);

// Rebuilds the finetuned model over a pristine backbone. Throws DataError
// when the backbone hash differs or a plugin entry does not fit.
ParameterStore attach_plugin(const ParameterStore& backbone, const Plugin& plugin);

}  // namespace fpeft
