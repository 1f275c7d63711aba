#include "fpeft/peft.hpp"

#include "fpeft/binio.hpp"

namespace fpeft::inline FPEFT_PRECISION_NS {

namespace {

bool starts_with(const std::string& s, const char* p) { return s.rfind(p, 0) == 0; }
bool ends_with(const std::string& s, const std::string& p) {
  return s.size() >= p.size() && s.compare(s.size() - p.size(), p.size(), p) == 0;
}

}  // namespace

std::string parameter_group(const std::string& name) {
  if (name == "peft.cep") return "cep";
  if (name == "peft.mcp") return "mcp";
  if (name.find(".adapter.") != std::string::npos) return "adapters";
  if (name.find(".lora.") != std::string::npos) return "lora";
  if (starts_with(name, "md.")) return "md_head";
  if (starts_with(name, "head.conf.")) return "conf_head";
  if (starts_with(name, "head.future.")) return "head";
  if (starts_with(name, "head.")) return "aux_head";
  if (ends_with(name, ".gamma") || ends_with(name, ".beta")) return "layer_norm";
  if (ends_with(name, ".b")) return "bias";
  return "backbone_weights";
}

bool is_additive_group(const std::string& g) { return g == "cep" || g == "mcp" || g == "adapters"; }

bool is_finetune_group(const std::string& g) {
  return is_additive_group(g) || g == "lora" || g == "md_head" || g == "conf_head";
}

std::int64_t TrainabilityPlan::trainable_count(const ParameterStore& store) const {
  std::int64_t n = 0;
  for (const auto& [name, on] : trainable)
    if (on) n += store.value(name).size();
  return n;
}

TrainabilityPlan make_plan(const ParameterStore& store, Mode mode, const PeftConfig& peft) {
  TrainabilityPlan plan;
  plan.mode = mode;
  for (const auto& [name, _] : store) {
    const std::string g = parameter_group(name);
    bool on = false;
    switch (mode) {
      case Mode::pretrain: on = true; break;
      case Mode::peft_a: on = is_additive_group(g); break;
      case Mode::peft:
        on = is_additive_group(g) || (peft.unfreeze_bias && g == "bias") ||
             (peft.unfreeze_layer_norm && g == "layer_norm") ||
             (peft.unfreeze_head && (g == "head" || g == "conf_head"));
        break;
      case Mode::full_ft: on = g != "aux_head"; break;
      case Mode::head_only: on = g == "md_head"; break;
      case Mode::lora: on = g == "md_head" || g == "lora"; break;
    }
    plan.trainable[name] = on;
  }
  return plan;
}

void apply_plan(ParameterStore& store, const TrainabilityPlan& plan) {
  for (auto& [name, p] : store) {
    auto it = plan.trainable.find(name);
    if (it == plan.trainable.end()) throw ConfigError("trainability plan does not cover " + name);
    p.trainable = it->second;
  }
}

ParamCount count_parameters(const ParameterStore& store) {
  ParamCount c;
  for (const auto& [name, p] : store) {
    const std::string g = parameter_group(name);
    const std::int64_t n = p.value.size();
    GroupCount& gc = c.groups[g];
    gc.total += n;
    c.total += n;
    if (p.trainable) {
      gc.trainable += n;
      c.trainable += n;
    }
    if (is_additive_group(g)) c.additive += n;
  }
  return c;
}

void to_json(nlohmann::json& j, const ParamCount& c) {
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& [g, gc] : c.groups) groups[g] = {{"total", gc.total}, {"trainable", gc.trainable}};
  j = {{"total", c.total}, {"trainable", c.trainable}, {"additive", c.additive}, {"groups", groups}};
}

ParameterStore backbone_only(const ParameterStore& store) {
  ParameterStore out;
  for (const auto& [name, p] : store)
    if (!is_finetune_group(parameter_group(name))) out.add(name, p.value, p.trainable);
  return out;
}

Plugin make_plugin(const ParameterStore& finetuned, const Hash256& backbone_hash, const nlohmann::json& meta) {
  Plugin pl;
  pl.backbone_hash = backbone_hash;
  pl.meta = meta;
  for (const auto& [name, p] : finetuned)
    if (p.trainable) pl.params.add(name, p.value, true);
  return pl;
}

void save_plugin(const std::string& path, const ParameterStore& finetuned, const Hash256& backbone_hash,
                 const nlohmann::json& meta) {
  const Plugin pl = make_plugin(finetuned, backbone_hash, meta);
  ByteWriter w;
  w.magic("FPPL");
  w.u8(1);
  w.bytes(pl.backbone_hash.data(), pl.backbone_hash.size());
  w.str(pl.meta.dump());
  w.u32(static_cast<std::uint32_t>(pl.params.size()));
  for (const auto& [name, p] : pl.params) {
    w.str(name);
    write_tensor(w, p.value);
  }
  write_file(path, w.data());
}

Plugin read_plugin(const std::string& path) {
  const auto bytes = read_file(path);
  ByteReader r(bytes, path);
  r.expect_magic("FPPL");
  if (const auto v = r.u8(); v != 1) throw DataError(path + ": unsupported plugin version " + std::to_string(v));
  Plugin pl;
  r.bytes(pl.backbone_hash.data(), pl.backbone_hash.size());
  try {
    pl.meta = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": bad plugin metadata: " + e.what());
  }
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    pl.params.add(name, read_tensor(r), true);
  }
  if (!r.done()) throw DataError(path + ": trailing bytes after plugin payload");
  return pl;
}

ParameterStore attach_plugin(const ParameterStore& backbone, const Plugin& plugin) {
  const Hash256 h = content_hash(backbone);
  if (h != plugin.backbone_hash)
    throw DataError("plugin was trained on backbone " + to_hex(plugin.backbone_hash) + " but this backbone is " +
                    to_hex(h));
  ModelConfig m;
  PeftConfig p;
  Mode mode;
  try {
    m = plugin.meta.at("model").get<ModelConfig>();
    p = plugin.meta.at("peft").get<PeftConfig>();
    mode = parse_mode(plugin.meta.at("mode").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("plugin metadata incomplete: ") + e.what());
  }
  ParameterStore out = backbone;
  add_finetune_params(out, m, p, mode, 0);
  for (const auto& [name, q] : plugin.params) {
    if (!out.contains(name)) throw DataError("plugin parameter " + name + " has no slot in the model");
    Parameter& slot = out.at(name);
    if (slot.value.shape() != q.value.shape())
      throw DataError("plugin parameter " + name + " has shape " + shape_str(q.value.shape()) + ", model expects " +
                      shape_str(slot.value.shape()));
    slot.value = q.value;
  }
  // Randomly initialised slots must come from the plugin; zero-initialised
  // ones (adapters, confidence head) are reproducible without it.
  for (const auto& [name, slot] : out) {
    const std::string g = parameter_group(name);
    if ((g == "cep" || g == "mcp" || g == "md_head" || g == "lora") && !plugin.params.contains(name))
      throw DataError("plugin is missing randomly initialised parameter " + name);
  }
  apply_plan(out, make_plan(out, mode, p));
  return out;
}

}  // namespace fpeft
