#pragma once

#include <string>

#include <json.hpp>

#include "fpeft/params.hpp"

namespace fpeft::inline FPEFT_PRECISION_NS {

struct ModelConfig {
  int C = 32;
  int enc_layers = 2;
  int dec_layers = 2;
  int heads = 2;
  int ffn_mult = 4;
  int K = 3;
  int H = 10;
  int T = 12;
  int P = 20;
  int traj_hidden = 32;  // width of the pyramid conv stages
  int lane_hidden = 32;  // width of the point-wise lane MLP
  double coord_scale = 0.1;

  void validate() const;
};

struct PeftConfig {
  int n_prompt = 8;
  int cep_depth = -1;  // -1: every encoder layer
  bool mcp = true;
  int adapter_rank = 8;
  bool adapter_msa = true;
  bool adapter_ffn = true;
  bool unfreeze_bias = true;
  bool unfreeze_layer_norm = true;
  bool unfreeze_head = true;
  int lora_rank = 4;
  bool lora_decoder = false;  // encoder q,v only unless set

  int depth(const ModelConfig& m) const { return cep_depth < 0 ? m.enc_layers : cep_depth; }
  void validate(const ModelConfig& m) const;
};

enum class Mode { pretrain, full_ft, peft, peft_a, head_only, lora };

Mode parse_mode(const std::string& s);
std::string to_string(Mode m);
// Modes that run prompts + K decoder passes rather than the MLP head.
inline bool uses_prompt_path(Mode m) { return m == Mode::full_ft || m == Mode::peft || m == Mode::peft_a; }

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const PeftConfig& c);
void from_json(const nlohmann::json& j, PeftConfig& c);

// Reference configuration used for parameter accounting.
ModelConfig paper_model_config();
PeftConfig paper_peft_config();

// Embedders, mask tokens, encoder, decoder and reconstruction heads.
ParameterStore init_pretrained(const ModelConfig& cfg, std::uint64_t seed);

// Parameters added on top of a pretrained store for a finetuning mode:
// prompts/adapters/confidence head, MLP decoder, or LoRA factors.
void add_finetune_params(ParameterStore& store, const ModelConfig& m, const PeftConfig& p, Mode mode,
                         std::uint64_t seed);

// Infers the layer count of "enc"/"dec" from the names present.
int count_layers(const ParameterStore& store, const std::string& prefix);

}  // namespace fpeft
