#include "fpeft/commands.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace fpeft::inline FPEFT_PRECISION_NS {

RunConfig resolve_config(const CommandArgs& a) {
  RunConfig c = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (a.seed) {
    c.train.seed = *a.seed;
    c.data.seed = *a.seed;
  }
  if (!a.mode.empty()) c.train.mode = parse_mode(a.mode);
  if (a.horizon >= 0) c.eval_horizon = a.horizon;
  if (!a.profile.empty()) c.data.profile = a.profile;
  c.validate();
  return c;
}

namespace {

std::string out_file(const CommandArgs& a, const std::string& name) {
  fs::create_directories(a.out);
  return (fs::path(a.out) / name).string();
}

nlohmann::json emit(const CommandArgs& a, const nlohmann::json& j) {
  const std::string path = out_file(a, "metrics.json");
  std::ofstream f(path);
  f << j.dump(2) << "\n";
  if (!f) throw DataError("cannot write " + path);
  return j;
}

std::vector<Scene> load_scenes(const std::string& path, const ModelConfig& m, const char* what) {
  if (path.empty()) throw ConfigError(std::string("config has no ") + what + " path");
  auto s = read_scenes(path);
  for (const auto& sc : s) validate_scene(sc, m.H, m.T, m.P);
  return s;
}

ParameterStore load_store(const std::string& path) {
  if (path.empty()) throw ConfigError("config has no pretrained checkpoint path");
  return load_checkpoint(path).state.params;
}

TrainHooks progress(const CommandArgs& a, const RunConfig& cfg) {
  TrainHooks h;
  const std::string ck = out_file(a, "checkpoint.fpck");
  h.on_epoch = [ck, cfg, log = a.log](const TrainState& s, int epoch) {
    if (log) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "epoch %d/%d loss %.6f", epoch + 1, cfg.train.epochs, s.epoch_loss.back());
      log(buf);
    }
    save_checkpoint(ck, cfg, s);
  };
  return h;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

nlohmann::json cmd_gen_data(const CommandArgs& a) {
  const RunConfig cfg = resolve_config(a);
  const GeneratorProfile prof = data_profile(cfg);
  const auto train = generate_synthetic(cfg.data.seed, cfg.data.n_train, prof);
  // Validation scenes come from a separate stream so they never overlap training.
  const auto val = generate_synthetic(cfg.data.seed ^ 0x5eedf00dULL, cfg.data.n_val, prof);
  const std::string tp = out_file(a, "train.fpsc"), vp = out_file(a, "val.fpsc");
  write_scenes(tp, train);
  write_scenes(vp, val);
  return emit(a, {{"command", "gen-data"},
           {"profile", prof},
           {"train", {{"path", tp}, {"scenes", train.size()}}},
           {"val", {{"path", vp}, {"scenes", val.size()}}}});
}

nlohmann::json cmd_pretrain(const CommandArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg;
  TrainState s;
  if (!a.resume.empty()) {
    Checkpoint ck = load_checkpoint(a.resume);
    cfg = ck.config;
    s = std::move(ck.state);
  } else {
    cfg = resolve_config(a);
    if (cfg.train.mode != Mode::pretrain) throw ConfigError("pretrain needs --mode pretrain");
    s = start_pretrain(cfg);
  }
  const auto scenes = load_scenes(cfg.train_data, cfg.model, "train_data");
  train(cfg, s, scenes, progress(a, cfg));
  nlohmann::json j = {{"command", "pretrain"},
                      {"checkpoint", out_file(a, "checkpoint.fpck")},
                      {"params", count_parameters(s.params)},
                      {"epoch_loss", s.epoch_loss},
                      {"backbone_hash", to_hex(content_hash(s.params))}};
  save_checkpoint(out_file(a, "checkpoint.fpck"), cfg, s);
  if (!cfg.val_data.empty()) {
    const auto val = load_scenes(cfg.val_data, cfg.model, "val_data");
    j["val_recon_loss"] = eval_recon_loss(s.params, cfg, val, cfg.train.seed);
  }
  j["seconds"] = seconds_since(t0);
  return emit(a, j);
}

nlohmann::json cmd_finetune(const CommandArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg;
  TrainState s;
  if (!a.resume.empty()) {
    Checkpoint ck = load_checkpoint(a.resume);
    cfg = ck.config;
    s = std::move(ck.state);
  } else {
    cfg = resolve_config(a);
    if (cfg.train.mode == Mode::pretrain) throw ConfigError("finetune needs a finetuning --mode");
    s = start_finetune(cfg, load_store(cfg.pretrained));
  }
  const ParameterStore backbone = load_store(cfg.pretrained);
  const auto scenes = load_scenes(cfg.train_data, cfg.model, "train_data");
  train(cfg, s, scenes, progress(a, cfg));
  save_checkpoint(out_file(a, "checkpoint.fpck"), cfg, s);
  const ParamCount counts = count_parameters(s.params);
  nlohmann::json j = {{"command", "finetune"},
                      {"mode", to_string(cfg.train.mode)},
                      {"checkpoint", out_file(a, "checkpoint.fpck")},
                      {"params", counts},
                      {"epoch_loss", s.epoch_loss}};
  if (cfg.train.mode != Mode::full_ft) {
    const std::string pp = out_file(a, "plugin.fppl");
    save_plugin(pp, s.params, content_hash(backbone), plugin_meta(cfg));
    j["plugin"] = {{"path", pp}, {"params", read_plugin(pp).params.size()}, {"trainable", counts.trainable}};
  }
  if (!cfg.val_data.empty()) {
    const auto val = load_scenes(cfg.val_data, cfg.model, "val_data");
    j["val"] = run_eval(s.params, cfg, val, cfg.eval_horizon).report;
    j["val_finetune_loss"] = eval_finetune_loss(s.params, cfg, val);
  }
  j["seconds"] = seconds_since(t0);
  return emit(a, j);
}

nlohmann::json cmd_eval(const CommandArgs& a) {
  const RunConfig cfg = resolve_config(a);
  ParameterStore store = load_store(a.checkpoint.empty() ? cfg.pretrained : a.checkpoint);
  nlohmann::json j = {{"command", "eval"}};
  if (!a.plugin.empty()) {
    const Plugin p = read_plugin(a.plugin);
    store = attach_plugin(store, p);
    j["plugin"] = a.plugin;
  }
  const auto val = load_scenes(cfg.val_data, cfg.model, "val_data");
  const EvalResult r = run_eval(store, cfg, val, cfg.eval_horizon);
  const std::string pp = out_file(a, "predictions.fppr");
  write_predictions(pp, r.outputs);
  j["metrics"] = r.report;
  j["recon_loss"] = eval_recon_loss(store, cfg, val, cfg.train.seed);
  j["predictions"] = pp;
  return emit(a, j);
}

nlohmann::json cmd_params(const CommandArgs& a) {
  const RunConfig cfg = resolve_config(a);
  ParameterStore st = init_pretrained(cfg.model, cfg.train.seed);
  if (cfg.train.mode != Mode::pretrain) add_finetune_params(st, cfg.model, cfg.peft, cfg.train.mode, cfg.train.seed);
  apply_plan(st, make_plan(st, cfg.train.mode, cfg.peft));
  const ParamCount c = count_parameters(st);
  return emit(a, {{"command", "params"},
           {"mode", to_string(cfg.train.mode)},
           {"model", cfg.model},
           {"peft", cfg.peft},
           {"counts", c},
           {"additive_total", c.additive}});
}

nlohmann::json cmd_ablate(const CommandArgs& a) {
  RunConfig cfg = resolve_config(a);
  if (cfg.train.mode == Mode::pretrain) cfg.train.mode = Mode::peft;
  const ParameterStore pre = load_store(cfg.pretrained);
  const auto tr = load_scenes(cfg.train_data, cfg.model, "train_data");
  const auto va = load_scenes(cfg.val_data, cfg.model, "val_data");
  const auto rows = run_ablation(cfg, pre, tr, va);
  const nlohmann::json j = ablation_json(cfg, rows);
  {
    std::ofstream f(out_file(a, "ablation.csv"));
    f << ablation_csv(rows);
  }
  for (const char* m : {"minADE", "minFDE", "MR", "b-minFDE", "trainable"}) {
    std::string name = std::string("ablation_") + m + ".svg";
    std::ofstream f(out_file(a, name));
    f << ablation_svg(cfg.ablation.axis, rows, m);
  }
  return emit(a, j);
}

}  // namespace fpeft
