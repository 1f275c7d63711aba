#include "fpeft/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include "fpeft/binio.hpp"

namespace fpeft::inline FPEFT_PRECISION_NS {

namespace {

void need(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

void check_keys(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  need(j.is_object(), where + " must be a JSON object");
  for (const auto& [k, _] : j.items()) need(known.count(k) != 0, "unknown " + where + " key '" + k + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  need(epochs >= 0, "epochs must be >= 0");
  need(batch_size > 0, "batch_size must be positive");
  need(lr > 0 && std::isfinite(lr), "lr must be positive");
  need(weight_decay >= 0, "weight_decay must be >= 0");
  need(history_mask_prob >= 0 && history_mask_prob <= 1, "history_mask_prob must lie in [0, 1]");
  need(lane_mask_ratio >= 0 && lane_mask_ratio <= 1, "lane_mask_ratio must lie in [0, 1]");
  need(loss_weights.history >= 0 && loss_weights.future >= 0 && loss_weights.lane >= 0,
       "loss weights must be >= 0");
  need(huber_delta > 0, "huber_delta must be positive");
  need(ce_weight >= 0, "ce_weight must be >= 0");
  need(audit_every >= 0, "audit_every must be >= 0");
  need(threads >= 0, "threads must be >= 0");
}

void RunConfig::validate() const {
  model.validate();
  peft.validate(model);
  train.validate();
  need(eval_horizon >= 0 && eval_horizon <= model.T,
       "eval_horizon " + std::to_string(eval_horizon) + " exceeds the model horizon T=" + std::to_string(model.T));
  need(data.n_train >= 0 && data.n_val >= 0, "scene counts must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"mode", to_string(c.mode)},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"seed", c.seed},
       {"history_mask_prob", c.history_mask_prob},
       {"lane_mask_ratio", c.lane_mask_ratio},
       {"loss_weights",
        {{"history", c.loss_weights.history}, {"future", c.loss_weights.future}, {"lane", c.loss_weights.lane}}},
       {"huber_delta", c.huber_delta},
       {"ce_weight", c.ce_weight},
       {"audit_every", c.audit_every},
       {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  check_keys(j,
             {"mode", "epochs", "batch_size", "lr", "weight_decay", "seed", "history_mask_prob", "lane_mask_ratio",
              "loss_weights", "huber_delta", "ce_weight", "audit_every", "threads"},
             "train");
  TrainConfig d = c;
  if (j.contains("mode")) d.mode = parse_mode(j.at("mode").get<std::string>());
  d.epochs = j.value("epochs", d.epochs);
  d.batch_size = j.value("batch_size", d.batch_size);
  d.lr = j.value("lr", d.lr);
  d.weight_decay = j.value("weight_decay", d.weight_decay);
  d.seed = j.value("seed", d.seed);
  d.history_mask_prob = j.value("history_mask_prob", d.history_mask_prob);
  d.lane_mask_ratio = j.value("lane_mask_ratio", d.lane_mask_ratio);
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    check_keys(w, {"history", "future", "lane"}, "loss_weights");
    d.loss_weights.history = w.value("history", d.loss_weights.history);
    d.loss_weights.future = w.value("future", d.loss_weights.future);
    d.loss_weights.lane = w.value("lane", d.loss_weights.lane);
  }
  d.huber_delta = j.value("huber_delta", d.huber_delta);
  d.ce_weight = j.value("ce_weight", d.ce_weight);
  d.audit_every = j.value("audit_every", d.audit_every);
  d.threads = j.value("threads", d.threads);
  c = d;
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"model", c.model},
       {"peft", c.peft},
       {"train", c.train},
       {"train_data", c.train_data},
       {"val_data", c.val_data},
       {"pretrained", c.pretrained},
       {"eval_horizon", c.eval_horizon},
       {"data", {{"profile", c.data.profile}, {"n_train", c.data.n_train}, {"n_val", c.data.n_val}, {"seed", c.data.seed}}},
       {"ablation", {{"axis", c.ablation.axis}, {"values", c.ablation.values}}}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  check_keys(j, {"model", "peft", "train", "train_data", "val_data", "pretrained", "eval_horizon", "data", "ablation"},
             "config");
  RunConfig d = c;
  if (j.contains("model")) d.model = j.at("model").get<ModelConfig>();
  if (j.contains("peft")) d.peft = j.at("peft").get<PeftConfig>();
  if (j.contains("train")) d.train = j.at("train").get<TrainConfig>();
  d.train_data = j.value("train_data", d.train_data);
  d.val_data = j.value("val_data", d.val_data);
  d.pretrained = j.value("pretrained", d.pretrained);
  d.eval_horizon = j.value("eval_horizon", d.eval_horizon);
  if (j.contains("data")) {
    const auto& g = j.at("data");
    check_keys(g, {"profile", "n_train", "n_val", "seed"}, "data");
    if (g.contains("profile")) d.data.profile = g.at("profile");
    d.data.n_train = g.value("n_train", d.data.n_train);
    d.data.n_val = g.value("n_val", d.data.n_val);
    d.data.seed = g.value("seed", d.data.seed);
  }
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    check_keys(a, {"axis", "values"}, "ablation");
    d.ablation.axis = a.value("axis", d.ablation.axis);
    if (a.contains("values")) d.ablation.values = a.at("values");
  }
  c = d;
}

RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  try {
    c = j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_run_config(j);
}

GeneratorProfile data_profile(const RunConfig& cfg) {
  const ModelConfig& m = cfg.model;
  if (cfg.data.profile.is_string()) return preset_profile(cfg.data.profile.get<std::string>(), m.H, m.T, m.P);
  GeneratorProfile p = preset_profile("av2_like", m.H, m.T, m.P);
  try {
    from_json(cfg.data.profile, p);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad data profile: ") + e.what());
  }
  need(p.H == m.H && p.T == m.T && p.P == m.P, "data profile window (H, T, P) must match the model");
  return p;
}

// ---------------------------------------------------------------------------
// Threads

int worker_threads(int configured) {
  int n = configured > 0 ? configured : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("FP_THREADS"); env && *env) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    need(*end == '\0' && cap > 0, std::string("FP_THREADS must be a positive integer, got '") + env + "'");
    n = std::min<long>(n, cap);
  }
  return n;
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t w = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr err;
  std::mutex mu;
  auto work = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n || failed.load()) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!err) err = std::current_exception();
        failed = true;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < w; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

// ---------------------------------------------------------------------------
// Training

TrainState start_pretrain(const RunConfig& cfg) {
  need(cfg.train.mode == Mode::pretrain, "start_pretrain needs mode pretrain");
  TrainState s;
  s.params = init_pretrained(cfg.model, cfg.train.seed);
  apply_plan(s.params, make_plan(s.params, Mode::pretrain, cfg.peft));
  return s;
}

TrainState start_finetune(const RunConfig& cfg, const ParameterStore& pretrained) {
  need(cfg.train.mode != Mode::pretrain, "finetuning needs a finetune mode");
  for (const auto& [name, _] : pretrained)
    if (is_finetune_group(parameter_group(name)))
      throw ConfigError("expected a pretrained backbone, found finetuning parameter " + name);
  const ParameterStore fresh = init_pretrained(cfg.model, 0);
  for (const auto& [name, p] : fresh) {
    if (!pretrained.contains(name))
      throw ConfigError("pretrained backbone does not match the model config: missing " + name);
    if (pretrained.value(name).shape() != p.value.shape())
      throw ConfigError("pretrained backbone does not match the model config: " + name + " has shape " +
                        shape_str(pretrained.value(name).shape()));
  }
  if (pretrained.size() != fresh.size()) throw ConfigError("pretrained backbone has parameters the model lacks");
  TrainState s;
  s.params = pretrained;
  add_finetune_params(s.params, cfg.model, cfg.peft, cfg.train.mode, cfg.train.seed);
  apply_plan(s.params, make_plan(s.params, cfg.train.mode, cfg.peft));
  return s;
}

std::mt19937_64 mask_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t scene_id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(scene_id),
                    static_cast<std::uint32_t>(scene_id >> 32)};
  return std::mt19937_64(seq);
}

std::optional<Var> scene_objective(Binder& b, const RunConfig& cfg, const Scene& scene, std::uint64_t epoch) {
  const TrainConfig& t = cfg.train;
  if (t.mode == Mode::pretrain) {
    auto rng = mask_rng(t.seed, epoch, scene.id);
    const MaskPlan plan = complementary_mask(scene, t.history_mask_prob, t.lane_mask_ratio, rng);
    return pretrain_loss(b, cfg.model, scene, plan, t.loss_weights);
  }
  return scene_finetune_loss(forecast_forward(b, cfg.model, scene), scene, t.huber_delta, t.ce_weight);
}

namespace {

struct SceneGrad {
  bool used = false;
  double loss = 0;
  GradMap grads;
};

std::map<std::string, Tensor> frozen_snapshot(const ParameterStore& s) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, p] : s)
    if (!p.trainable) out.emplace(name, p.value);
  return out;
}

void audit_frozen(const ParameterStore& s, const std::map<std::string, Tensor>& snap) {
  for (const auto& [name, v] : snap)
    if (!bit_equal(s.value(name), v)) throw FreezeViolation("frozen parameter " + name + " changed during training");
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint32_t epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), epoch, 0x0badcafeu};
  std::mt19937_64 rng(seq);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace

void train(const RunConfig& cfg, TrainState& state, std::span<const Scene> scenes, const TrainHooks& hooks) {
  cfg.validate();
  if (scenes.empty()) throw DataError("no training scenes");
  for (const auto& sc : scenes) validate_scene(sc, cfg.model.H, cfg.model.T, cfg.model.P);
  const TrainConfig& tc = cfg.train;
  const std::size_t n = scenes.size();
  const auto bs = static_cast<std::size_t>(tc.batch_size);
  const auto batches = static_cast<std::uint32_t>((n + bs - 1) / bs);
  const std::uint64_t total = static_cast<std::uint64_t>(tc.epochs) * batches;
  const int threads = worker_threads(tc.threads);
  const AdamWConfig opt{0.9, 0.999, 1e-8, tc.weight_decay};
  const auto snapshot = frozen_snapshot(state.params);
  std::uint64_t taken = 0;

  while (state.cursor.epoch < static_cast<std::uint32_t>(tc.epochs)) {
    const std::uint32_t epoch = state.cursor.epoch;
    const auto order = epoch_order(n, tc.seed, epoch);
    while (state.cursor.batch < batches) {
      if (hooks.max_steps && taken >= hooks.max_steps) return;
      const std::uint32_t bi = state.cursor.batch;
      const std::size_t lo = bi * bs, hi = std::min(n, lo + bs);
      std::vector<SceneGrad> out(hi - lo);
      parallel_for(hi - lo, threads, [&](std::size_t i) {
        const Scene& sc = scenes[order[lo + i]];
        Tape tape;
        Binder b(tape, state.params);
        auto loss = scene_objective(b, cfg, sc, epoch);
        if (!loss) return;
        tape.backward(*loss);
        out[i].used = true;
        out[i].loss = static_cast<double>(loss->value().item());
        b.collect_grads(out[i].grads);
      });
      GradMap sum;
      double loss_sum = 0;
      int used = 0;
      for (auto& sg : out) {
        if (!sg.used) continue;
        ++used;
        loss_sum += sg.loss;
        for (auto& [name, g] : sg.grads) {
          auto it = sum.find(name);
          if (it == sum.end()) {
            sum.emplace(name, std::move(g));
          } else {
            Real* d = it->second.ptr();
            const Real* s = g.ptr();
            for (std::int64_t k = 0; k < g.size(); ++k) d[k] += s[k];
          }
        }
      }
      if (used > 0) {
        const Real inv = static_cast<Real>(1.0 / used);
        for (auto& [_, g] : sum)
          for (auto& x : g.data()) x *= inv;
        const std::uint64_t global = static_cast<std::uint64_t>(epoch) * batches + bi;
        adamw_step(state.params, sum, state.opt, cosine_lr(tc.lr, global, total), opt);
        state.step_loss.push_back(loss_sum / used);
        state.cursor.loss_sum += loss_sum;
        state.cursor.loss_count += static_cast<std::uint64_t>(used);
        ++taken;
        if (tc.audit_every > 0 && state.opt.step % static_cast<std::uint64_t>(tc.audit_every) == 0)
          audit_frozen(state.params, snapshot);
      }
      ++state.cursor.batch;
    }
    state.epoch_loss.push_back(state.cursor.loss_count ? state.cursor.loss_sum / state.cursor.loss_count : 0.0);
    state.cursor.epoch++;
    state.cursor.batch = 0;
    state.cursor.loss_sum = 0;
    state.cursor.loss_count = 0;
    if (hooks.on_epoch) hooks.on_epoch(state, static_cast<int>(epoch));
  }
  audit_frozen(state.params, snapshot);
}

// ---------------------------------------------------------------------------
// Evaluation

double eval_recon_loss(const ParameterStore& store, const RunConfig& cfg, std::span<const Scene> scenes,
                       std::uint64_t seed) {
  if (scenes.empty()) throw DataError("no evaluation scenes");
  const ParameterStore base = backbone_only(store);
  std::vector<double> loss(scenes.size());
  parallel_for(scenes.size(), worker_threads(cfg.train.threads), [&](std::size_t i) {
    auto rng = mask_rng(seed, 0, scenes[i].id);
    const MaskPlan plan = complementary_mask(scenes[i], cfg.train.history_mask_prob, cfg.train.lane_mask_ratio, rng);
    Tape t;
    Binder b(t, base);
    loss[i] = static_cast<double>(pretrain_loss(b, cfg.model, scenes[i], plan, cfg.train.loss_weights).value().item());
  });
  double s = 0;
  for (double l : loss) s += l;
  return s / static_cast<double>(scenes.size());
}

double eval_finetune_loss(const ParameterStore& store, const RunConfig& cfg, std::span<const Scene> scenes) {
  std::vector<std::optional<double>> loss(scenes.size());
  parallel_for(scenes.size(), worker_threads(cfg.train.threads), [&](std::size_t i) {
    Tape t;
    Binder b(t, store);
    auto l = scene_finetune_loss(forecast_forward(b, cfg.model, scenes[i]), scenes[i], cfg.train.huber_delta,
                                 cfg.train.ce_weight);
    if (l) loss[i] = static_cast<double>(l->value().item());
  });
  double s = 0;
  int n = 0;
  for (const auto& l : loss)
    if (l) {
      s += *l;
      ++n;
    }
  if (n == 0) throw DataError("no evaluation scene has a valid target future");
  return s / n;
}

EvalResult run_eval(const ParameterStore& store, const RunConfig& cfg, std::span<const Scene> scenes, int horizon) {
  if (horizon > cfg.model.T)
    throw ConfigError("evaluation horizon " + std::to_string(horizon) + " is longer than the model output T=" +
                      std::to_string(cfg.model.T));
  if (scenes.empty()) throw DataError("no evaluation scenes");
  EvalResult r;
  r.outputs.resize(scenes.size());
  parallel_for(scenes.size(), worker_threads(cfg.train.threads), [&](std::size_t i) {
    Tape t;
    Binder b(t, store);
    r.outputs[i] = to_output(forecast_forward(b, cfg.model, scenes[i]), scenes[i].id);
  });
  r.report = compute_metrics(r.outputs, scenes, horizon);
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::string& path, const RunConfig& cfg, const TrainState& s) {
  ByteWriter w;
  w.magic("FPCK");
  w.u8(1);
  w.str(nlohmann::json(cfg).dump());
  w.u32(static_cast<std::uint32_t>(s.params.size()));
  for (const auto& [name, p] : s.params) {
    w.str(name);
    w.u8(p.trainable ? 1 : 0);
    write_tensor(w, p.value);
  }
  w.u64(s.opt.step);
  w.u32(static_cast<std::uint32_t>(s.opt.m.size()));
  for (const auto& [name, m] : s.opt.m) {
    w.str(name);
    write_tensor(w, m);
    write_tensor(w, s.opt.v.at(name));
  }
  w.u32(s.cursor.epoch);
  w.u32(s.cursor.batch);
  w.f64(s.cursor.loss_sum);
  w.u64(s.cursor.loss_count);
  for (const auto* log : {&s.step_loss, &s.epoch_loss}) {
    w.u32(static_cast<std::uint32_t>(log->size()));
    for (double v : *log) w.f64(v);
  }
  const Hash256 h = sha256(w.data().data(), w.size());
  w.bytes(h.data(), h.size());
  write_file(path, w.data());
}

Checkpoint load_checkpoint(const std::string& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 32 + 5) throw DataError(path + ": too short for a checkpoint");
  const std::size_t body = bytes.size() - 32;
  const Hash256 h = sha256(bytes.data(), body);
  if (!std::equal(h.begin(), h.end(), bytes.begin() + static_cast<std::ptrdiff_t>(body)))
    throw DataError(path + ": checkpoint content hash mismatch");
  ByteReader r(bytes.data(), body, path);
  r.expect_magic("FPCK");
  if (const auto v = r.u8(); v != 1) throw DataError(path + ": unsupported checkpoint version " + std::to_string(v));
  Checkpoint ck;
  try {
    ck.config = parse_run_config(nlohmann::json::parse(r.str()));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": bad embedded config: " + e.what());
  }
  TrainState& s = ck.state;
  const std::uint32_t np = r.u32();
  for (std::uint32_t i = 0; i < np; ++i) {
    std::string name = r.str();
    const bool trainable = r.u8() != 0;
    s.params.add(name, read_tensor(r), trainable);
  }
  s.opt.step = r.u64();
  const std::uint32_t nm = r.u32();
  for (std::uint32_t i = 0; i < nm; ++i) {
    std::string name = r.str();
    if (!s.params.contains(name)) throw DataError(path + ": optimizer state for unknown parameter " + name);
    s.opt.m.emplace(name, read_tensor(r));
    s.opt.v.emplace(name, read_tensor(r));
  }
  s.cursor.epoch = r.u32();
  s.cursor.batch = r.u32();
  s.cursor.loss_sum = r.f64();
  s.cursor.loss_count = r.u64();
  for (auto* log : {&s.step_loss, &s.epoch_loss}) {
    const std::uint32_t n = r.u32();
    log->resize(n);
    for (auto& v : *log) v = r.f64();
  }
  if (!r.done()) throw DataError(path + ": trailing bytes in checkpoint");
  return ck;
}

nlohmann::json plugin_meta(const RunConfig& cfg) {
  return {{"mode", to_string(cfg.train.mode)}, {"model", cfg.model}, {"peft", cfg.peft}};
}

}  // namespace fpeft
