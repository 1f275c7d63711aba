#include "fpeft/model.hpp"

#include <set>

namespace fpeft::inline FPEFT_PRECISION_NS {

namespace {

void need(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

void add_linear(ParameterStore& s, std::uint64_t seed, const std::string& prefix, int in, int out) {
  auto rng = param_rng(seed, prefix + ".w");
  s.add(prefix + ".w", xavier_uniform({in, out}, rng));
  s.add(prefix + ".b", Tensor({out}));
}

void add_zero_linear(ParameterStore& s, const std::string& prefix, int in, int out) {
  s.add(prefix + ".w", Tensor({in, out}));
  s.add(prefix + ".b", Tensor({out}));
}

void add_norm(ParameterStore& s, const std::string& prefix, int C) {
  s.add(prefix + ".gamma", Tensor({C}, Real(1)));
  s.add(prefix + ".beta", Tensor({C}));
}

void add_layer(ParameterStore& s, std::uint64_t seed, const std::string& p, const ModelConfig& c) {
  add_norm(s, p + ".ln1", c.C);
  add_linear(s, seed, p + ".attn.qkv", c.C, 3 * c.C);
  add_linear(s, seed, p + ".attn.out", c.C, c.C);
  add_norm(s, p + ".ln2", c.C);
  add_linear(s, seed, p + ".ffn.fc1", c.C, c.ffn_mult * c.C);
  add_linear(s, seed, p + ".ffn.fc2", c.ffn_mult * c.C, c.C);
}

void add_traj_embedder(ParameterStore& s, std::uint64_t seed, const std::string& p, const ModelConfig& c) {
  int in = 3;
  for (int i = 0; i < 3; ++i) {
    add_linear(s, seed, p + ".conv" + std::to_string(i), 3 * in, c.traj_hidden);
    add_linear(s, seed, p + ".lat" + std::to_string(i), c.traj_hidden, c.C);
    in = c.traj_hidden;
  }
  add_linear(s, seed, p + ".out", c.C, c.C);
}

}  // namespace

void ModelConfig::validate() const {
  need(C > 0 && enc_layers > 0 && dec_layers > 0 && heads > 0 && ffn_mult > 0 && K > 0 && H > 0 && T > 0 && P > 0,
       "model dimensions must be positive");
  need(C % heads == 0, "C=" + std::to_string(C) + " is not divisible by heads=" + std::to_string(heads));
  need(traj_hidden > 0 && lane_hidden > 0 && coord_scale > 0, "embedder widths must be positive");
}

void PeftConfig::validate(const ModelConfig& m) const {
  need(n_prompt >= 0, "n_prompt must be >= 0");
  need(cep_depth >= -1 && cep_depth <= m.enc_layers,
       "cep_depth must lie in [0, " + std::to_string(m.enc_layers) + "], got " + std::to_string(cep_depth));
  need(!(adapter_msa || adapter_ffn) || adapter_rank >= 1, "adapter_rank must be >= 1 when adapters are enabled");
  need(lora_rank >= 1, "lora_rank must be >= 1");
}

Mode parse_mode(const std::string& s) {
  if (s == "pretrain") return Mode::pretrain;
  if (s == "full_ft") return Mode::full_ft;
  if (s == "peft") return Mode::peft;
  if (s == "peft_a") return Mode::peft_a;
  if (s == "head_only") return Mode::head_only;
  if (s == "lora") return Mode::lora;
  throw ConfigError("unknown mode '" + s + "'");
}

std::string to_string(Mode m) {
  switch (m) {
    case Mode::pretrain: return "pretrain";
    case Mode::full_ft: return "full_ft";
    case Mode::peft: return "peft";
    case Mode::peft_a: return "peft_a";
    case Mode::head_only: return "head_only";
    case Mode::lora: return "lora";
  }
  return "?";
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"C", c.C},         {"enc_layers", c.enc_layers},   {"dec_layers", c.dec_layers}, {"heads", c.heads},
       {"ffn_mult", c.ffn_mult}, {"K", c.K},               {"H", c.H},                   {"T", c.T},
       {"P", c.P},         {"traj_hidden", c.traj_hidden}, {"lane_hidden", c.lane_hidden},
       {"coord_scale", c.coord_scale}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const std::set<std::string> known = {"C", "enc_layers", "dec_layers", "heads", "ffn_mult", "K",
                                              "H", "T", "P", "traj_hidden", "lane_hidden", "coord_scale"};
  for (const auto& [k, _] : j.items()) need(known.count(k) != 0, "unknown model key '" + k + "'");
  ModelConfig d = c;
  d.C = j.value("C", d.C);
  d.enc_layers = j.value("enc_layers", d.enc_layers);
  d.dec_layers = j.value("dec_layers", d.dec_layers);
  d.heads = j.value("heads", d.heads);
  d.ffn_mult = j.value("ffn_mult", d.ffn_mult);
  d.K = j.value("K", d.K);
  d.H = j.value("H", d.H);
  d.T = j.value("T", d.T);
  d.P = j.value("P", d.P);
  d.traj_hidden = j.value("traj_hidden", d.traj_hidden);
  d.lane_hidden = j.value("lane_hidden", d.lane_hidden);
  d.coord_scale = j.value("coord_scale", d.coord_scale);
  c = d;
}

void to_json(nlohmann::json& j, const PeftConfig& c) {
  j = {{"n_prompt", c.n_prompt},
       {"cep_depth", c.cep_depth},
       {"mcp", c.mcp},
       {"adapter_rank", c.adapter_rank},
       {"adapter_msa", c.adapter_msa},
       {"adapter_ffn", c.adapter_ffn},
       {"unfreeze_bias", c.unfreeze_bias},
       {"unfreeze_layer_norm", c.unfreeze_layer_norm},
       {"unfreeze_head", c.unfreeze_head},
       {"lora_rank", c.lora_rank},
       {"lora_decoder", c.lora_decoder}};
}

void from_json(const nlohmann::json& j, PeftConfig& c) {
  static const std::set<std::string> known = {"n_prompt",      "cep_depth",           "mcp",           "adapter_rank",
                                              "adapter_msa",   "adapter_ffn",         "unfreeze_bias", "unfreeze_layer_norm",
                                              "unfreeze_head", "lora_rank",           "lora_decoder"};
  for (const auto& [k, _] : j.items()) need(known.count(k) != 0, "unknown peft key '" + k + "'");
  PeftConfig d = c;
  d.n_prompt = j.value("n_prompt", d.n_prompt);
  d.cep_depth = j.value("cep_depth", d.cep_depth);
  d.mcp = j.value("mcp", d.mcp);
  d.adapter_rank = j.value("adapter_rank", d.adapter_rank);
  d.adapter_msa = j.value("adapter_msa", d.adapter_msa);
  d.adapter_ffn = j.value("adapter_ffn", d.adapter_ffn);
  d.unfreeze_bias = j.value("unfreeze_bias", d.unfreeze_bias);
  d.unfreeze_layer_norm = j.value("unfreeze_layer_norm", d.unfreeze_layer_norm);
  d.unfreeze_head = j.value("unfreeze_head", d.unfreeze_head);
  d.lora_rank = j.value("lora_rank", d.lora_rank);
  d.lora_decoder = j.value("lora_decoder", d.lora_decoder);
  c = d;
}

ModelConfig paper_model_config() {
  ModelConfig c;
  c.C = 128;
  c.enc_layers = c.dec_layers = 4;
  c.heads = 8;
  c.K = 6;
  c.H = 50;
  c.T = 60;
  c.P = 20;
  c.traj_hidden = c.lane_hidden = 128;
  return c;
}

PeftConfig paper_peft_config() {
  PeftConfig p;
  p.n_prompt = 50;
  p.cep_depth = 4;
  p.adapter_rank = 64;
  p.lora_rank = 16;
  return p;
}

ParameterStore init_pretrained(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  ParameterStore s;
  add_traj_embedder(s, seed, "embed.hist", c);
  add_traj_embedder(s, seed, "embed.fut", c);
  add_linear(s, seed, "embed.lane.pt1", 3, c.lane_hidden);
  add_linear(s, seed, "embed.lane.pt2", c.lane_hidden, c.lane_hidden);
  add_linear(s, seed, "embed.lane.out1", c.lane_hidden, c.C);
  add_linear(s, seed, "embed.lane.out2", c.C, c.C);
  add_linear(s, seed, "embed.pe.l1", 2, c.C);
  add_linear(s, seed, "embed.pe.l2", c.C, c.C);
  {
    auto rng = param_rng(seed, "embed.semantic");
    s.add("embed.semantic", normal_init({3, c.C}, 0.02, rng));
  }
  for (const char* k : {"mask.history", "mask.future", "mask.lane"}) {
    auto rng = param_rng(seed, k);
    s.add(k, normal_init({c.C}, 0.02, rng));
  }
  for (int i = 0; i < c.enc_layers; ++i) add_layer(s, seed, "enc." + std::to_string(i), c);
  for (int i = 0; i < c.dec_layers; ++i) add_layer(s, seed, "dec." + std::to_string(i), c);
  add_linear(s, seed, "head.history", c.C, 2 * c.H);
  add_linear(s, seed, "head.future", c.C, 2 * c.T);
  add_linear(s, seed, "head.lane", c.C, 2 * c.P);
  return s;
}

void add_finetune_params(ParameterStore& s, const ModelConfig& m, const PeftConfig& p, Mode mode,
                         std::uint64_t seed) {
  m.validate();
  p.validate(m);
  const int L_E = count_layers(s, "enc"), L_D = count_layers(s, "dec");
  need(L_E == m.enc_layers && L_D == m.dec_layers, "pretrained layer counts do not match the model config");
  if (uses_prompt_path(mode)) {
    const int depth = p.depth(m);
    if (p.n_prompt > 0 && depth > 0) {
      auto rng = param_rng(seed, "peft.cep");
      s.add("peft.cep", xavier_uniform({depth, p.n_prompt, m.C}, rng));
    }
    if (p.n_prompt > 0 && p.mcp) {
      auto rng = param_rng(seed, "peft.mcp");
      s.add("peft.mcp", xavier_uniform({m.K, p.n_prompt, m.C}, rng));
    }
    add_zero_linear(s, "head.conf", m.C, 1);
    if (mode != Mode::full_ft) {
      for (const auto& [prefix, n] : {std::pair<std::string, int>{"enc", L_E}, {"dec", L_D}}) {
        for (int i = 0; i < n; ++i) {
          const std::string base = prefix + "." + std::to_string(i) + ".adapter.";
          if (p.adapter_msa) {
            add_zero_linear(s, base + "msa.down", m.C, p.adapter_rank);
            add_zero_linear(s, base + "msa.up", p.adapter_rank, m.C);
          }
          if (p.adapter_ffn) {
            add_zero_linear(s, base + "ffn.down", m.C, p.adapter_rank);
            add_zero_linear(s, base + "ffn.up", p.adapter_rank, m.C);
          }
        }
      }
    }
    return;
  }
  if (mode == Mode::head_only || mode == Mode::lora) {
    add_linear(s, seed, "md.fc1", m.C, 2 * m.C);
    add_linear(s, seed, "md.traj", 2 * m.C, m.K * m.T * 2);
    add_linear(s, seed, "md.conf", 2 * m.C, m.K);
  }
  if (mode == Mode::lora) {
    auto add_lora = [&](const std::string& layer) {
      for (const char* proj : {"q", "v"}) {
        const std::string base = layer + ".lora." + proj;
        auto rng = param_rng(seed, base + ".A");
        s.add(base + ".A", normal_init({m.C, p.lora_rank}, 0.02, rng));
        s.add(base + ".B", Tensor({p.lora_rank, m.C}));
      }
    };
    for (int i = 0; i < L_E; ++i) add_lora("enc." + std::to_string(i));
    if (p.lora_decoder)
      for (int i = 0; i < L_D; ++i) add_lora("dec." + std::to_string(i));
  }
}

int count_layers(const ParameterStore& store, const std::string& prefix) {
  int n = 0;
  while (store.contains(prefix + "." + std::to_string(n) + ".ln1.gamma")) ++n;
  return n;
}

}  // namespace fpeft
