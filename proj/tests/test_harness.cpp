#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "fpeft/binio.hpp"
#include "fpeft/harness.hpp"
#include "support/fixtures.hpp"

using namespace fpeft;
using fpeft_test::toy_model;
using fpeft_test::toy_peft;

namespace {

std::vector<Scene> toy_scenes(std::uint64_t seed, int n) {
  GeneratorProfile prof = preset_profile("av2_like", 6, 6, 5);
  prof.n_agents = {2, 3};
  prof.n_lanes = {2, 2};
  return generate_synthetic(seed, n, prof);
}

RunConfig toy_run(Mode mode) {
  RunConfig c;
  c.model = toy_model();
  c.peft = toy_peft();
  c.train.mode = mode;
  c.train.epochs = 2;
  c.train.batch_size = 3;
  c.train.lr = 5e-3;
  c.train.seed = 11;
  c.train.audit_every = 1;
  c.train.threads = 1;
  c.validate();
  return c;
}

ParameterStore toy_pretrained() {
  RunConfig c = toy_run(Mode::pretrain);
  c.train.epochs = 1;
  TrainState s = start_pretrain(c);
  const auto sc = toy_scenes(3, 6);
  train(c, s, sc);
  return s.params;
}

std::string tmp(const std::string& name) { return (std::filesystem::temp_directory_path() / name).string(); }

struct EnvGuard {
  std::string name;
  std::optional<std::string> old;
  EnvGuard(const std::string& n, const char* value) : name(n) {
    if (const char* v = std::getenv(n.c_str())) old = v;
    if (value) setenv(n.c_str(), value, 1);
    else unsetenv(n.c_str());
  }
  ~EnvGuard() {
    if (old) setenv(name.c_str(), old->c_str(), 1);
    else unsetenv(name.c_str());
  }
};

}  // namespace

TEST_CASE("adamw matches a hand-rolled three-step update") {
  ParameterStore st;
  st.add("w", Tensor::vector({1.0f, -2.0f}));
  AdamState state;
  const AdamWConfig cfg{0.9, 0.999, 1e-8, 0.01};
  const double lr = 0.1;
  const double g[3][2] = {{0.5, -1.0}, {-0.2, 0.3}, {0.1, 0.0}};
  double th[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 3; ++t) {
    GradMap gm;
    gm.emplace("w", Tensor::vector({static_cast<Real>(g[t - 1][0]), static_cast<Real>(g[t - 1][1])}));
    adamw_step(st, gm, state, lr, cfg);
    for (int i = 0; i < 2; ++i) {
      th[i] -= lr * cfg.weight_decay * th[i];
      m[i] = 0.9 * m[i] + 0.1 * g[t - 1][i];
      v[i] = 0.999 * v[i] + 0.001 * g[t - 1][i] * g[t - 1][i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      th[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  CHECK(state.step == 3);
  CHECK(st.value("w").data()[0] == doctest::Approx(th[0]).epsilon(1e-6));
  CHECK(st.value("w").data()[1] == doctest::Approx(th[1]).epsilon(1e-6));
}

TEST_CASE("adamw leaves zero-gradient and frozen parameters alone") {
  ParameterStore st;
  st.add("a", Tensor::vector({0.25f, -4.0f}));
  st.add("frozen", Tensor::vector({3.0f}), false);
  AdamState state;
  GradMap gm;
  gm.emplace("a", Tensor(Shape{2}));
  gm.emplace("frozen", Tensor::vector({1.0f}));
  for (int i = 0; i < 5; ++i) adamw_step(st, gm, state, 0.1, {0.9, 0.999, 1e-8, 0.0});
  CHECK(st.value("a").data()[0] == 0.25f);
  CHECK(st.value("a").data()[1] == -4.0f);
  CHECK(st.value("frozen").data()[0] == 3.0f);
  CHECK(state.m.count("frozen") == 0);
}

TEST_CASE("adamw rejects non-finite gradients before touching anything") {
  ParameterStore st;
  st.add("a", Tensor::vector({1.0f}));
  st.add("b", Tensor::vector({2.0f}));
  AdamState state;
  GradMap gm;
  gm.emplace("a", Tensor::vector({1.0f}));
  gm.emplace("b", Tensor::vector({std::numeric_limits<Real>::quiet_NaN()}));
  try {
    adamw_step(st, gm, state, 0.1, {});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("b") != std::string::npos);
  }
  CHECK(st.value("a").data()[0] == 1.0f);
  CHECK(state.step == 0);
}

TEST_CASE("cosine schedule endpoints") {
  CHECK(cosine_lr(1e-3, 0, 100) == 1e-3);
  CHECK(cosine_lr(1e-3, 100, 100) == 0.0);
  CHECK(cosine_lr(1e-3, 50, 100) == doctest::Approx(5e-4));
  CHECK(cosine_lr(1e-3, 25, 100) > cosine_lr(1e-3, 75, 100));
}

TEST_CASE("config parsing reports problems as ConfigError") {
  CHECK_THROWS_AS(parse_run_config({{"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(parse_run_config({{"train", {{"lr", -1.0}}}}), ConfigError);
  CHECK_THROWS_AS(parse_run_config({{"train", {{"mode", "sideways"}}}}), ConfigError);
  CHECK_THROWS_AS(parse_run_config({{"train", {{"epochs", "ten"}}}}), ConfigError);
  CHECK_THROWS_AS(parse_run_config({{"eval_horizon", 1000}}), ConfigError);
  CHECK_THROWS_AS(load_run_config(tmp("fpeft_no_such_config.json")), ConfigError);

  RunConfig c = toy_run(Mode::peft);
  const RunConfig back = parse_run_config(nlohmann::json(c));
  CHECK(nlohmann::json(back) == nlohmann::json(c));
}

TEST_CASE("FP_THREADS caps the worker count") {
  {
    EnvGuard g("FP_THREADS", "2");
    CHECK(worker_threads(8) == 2);
    CHECK(worker_threads(1) == 1);
  }
  {
    EnvGuard g("FP_THREADS", "zero");
    CHECK_THROWS_AS(worker_threads(4), ConfigError);
  }
  {
    EnvGuard g("FP_THREADS", nullptr);
    CHECK(worker_threads(3) == 3);
    CHECK(worker_threads(0) >= 1);
  }
}

TEST_CASE("parallel_for visits every index once and propagates exceptions") {
  std::vector<int> hits(37, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i]++; });
  for (int h : hits) CHECK(h == 1);
  CHECK_THROWS_AS(parallel_for(10, 3, [](std::size_t i) {
                    if (i == 7) throw DataError("boom");
                  }),
                  DataError);
}

TEST_CASE("training results do not depend on the thread count") {
  EnvGuard g("FP_THREADS", nullptr);
  const auto scenes = toy_scenes(5, 7);
  RunConfig c = toy_run(Mode::pretrain);
  TrainState a = start_pretrain(c), b = start_pretrain(c);
  train(c, a, scenes);
  c.train.threads = 3;
  train(c, b, scenes);
  CHECK(bit_equal(a.params, b.params));
  CHECK(a.step_loss == b.step_loss);
  CHECK(a.epoch_loss == b.epoch_loss);
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run") {
  const auto scenes = toy_scenes(6, 8);
  for (Mode mode : {Mode::pretrain, Mode::peft}) {
    CAPTURE(to_string(mode));
    const RunConfig c = toy_run(mode);
    auto fresh = [&] { return mode == Mode::pretrain ? start_pretrain(c) : start_finetune(c, toy_pretrained()); };
    TrainState full = fresh();
    train(c, full, scenes);
    CHECK(full.opt.step == 6);  // 2 epochs x ceil(8 / 3) batches

    TrainState part = fresh();
    train(c, part, scenes, TrainHooks{4, {}});
    CHECK(part.opt.step == 4);
    CHECK(part.cursor.epoch == 1);
    CHECK(part.cursor.batch == 1);
    const std::string path = tmp("fpeft_resume.fpck");
    save_checkpoint(path, c, part);
    Checkpoint ck = load_checkpoint(path);
    CHECK(nlohmann::json(ck.config) == nlohmann::json(c));
    train(ck.config, ck.state, scenes);
    CHECK(bit_equal(full.params, ck.state.params));
    CHECK(full.step_loss == ck.state.step_loss);
    CHECK(full.epoch_loss == ck.state.epoch_loss);
    std::filesystem::remove(path);
  }
}

TEST_CASE("tampered or truncated checkpoints are rejected") {
  const RunConfig c = toy_run(Mode::pretrain);
  TrainState s = start_pretrain(c);
  const std::string path = tmp("fpeft_tamper.fpck");
  save_checkpoint(path, c, s);
  auto bytes = read_file(path);
  bytes[bytes.size() / 2] ^= 0x01;
  write_file(path, bytes);
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  bytes.resize(20);
  write_file(path, bytes);
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  std::filesystem::remove(path);
}

TEST_CASE("finetuning never moves frozen parameters") {
  const ParameterStore pre = toy_pretrained();
  const auto scenes = toy_scenes(8, 5);
  for (Mode mode : {Mode::peft, Mode::peft_a, Mode::head_only, Mode::lora, Mode::full_ft}) {
    CAPTURE(to_string(mode));
    RunConfig c = toy_run(mode);
    c.train.epochs = 1;
    TrainState s = start_finetune(c, pre);
    const ParameterStore before = s.params;
    train(c, s, scenes);
    int moved = 0;
    for (const auto& [name, p] : s.params) {
      if (!p.trainable) {
        CHECK_MESSAGE(bit_equal(p.value, before.value(name)), name);
      } else if (!bit_equal(p.value, before.value(name))) {
        ++moved;
      }
    }
    CHECK(moved > 0);
  }
}

TEST_CASE("start_finetune rejects stores that are not a matching backbone") {
  const ParameterStore pre = toy_pretrained();
  RunConfig c = toy_run(Mode::peft);
  TrainState s = start_finetune(c, pre);
  CHECK_THROWS_AS(start_finetune(c, s.params), ConfigError);
  RunConfig wider = c;
  wider.model.C = 16;
  CHECK_THROWS_AS(start_finetune(wider, pre), ConfigError);
  CHECK_THROWS_AS(start_finetune(toy_run(Mode::pretrain), pre), ConfigError);
}

TEST_CASE("training validates its input scenes") {
  RunConfig c = toy_run(Mode::pretrain);
  TrainState s = start_pretrain(c);
  CHECK_THROWS_AS(train(c, s, std::vector<Scene>{}), DataError);
  auto scenes = toy_scenes(2, 2);
  scenes[1].agents[0].history.pop_back();
  CHECK_THROWS_AS(train(c, s, scenes), DataError);
}

TEST_CASE("evaluation horizon longer than the model is a config error") {
  const RunConfig c = toy_run(Mode::pretrain);
  const ParameterStore pre = toy_pretrained();
  const auto scenes = toy_scenes(9, 2);
  CHECK_THROWS_AS(run_eval(pre, c, scenes, c.model.T + 1), ConfigError);
  const EvalResult r = run_eval(pre, c, scenes, 3);
  CHECK(r.outputs.size() == 2);
  CHECK(r.report.horizon == 3);
}

TEST_CASE("eval_recon_loss ignores finetuning parameters") {
  const ParameterStore pre = toy_pretrained();
  RunConfig c = toy_run(Mode::peft);
  TrainState s = start_finetune(c, pre);
  const auto scenes = toy_scenes(10, 3);
  CHECK(eval_recon_loss(pre, c, scenes, 1) == eval_recon_loss(s.params, c, scenes, 1));
}

TEST_CASE("ablation cells") {
  RunConfig c = toy_run(Mode::peft);
  c.ablation.axis = "components";
  const RunConfig none = ablation_cell(c, "none");
  CHECK(none.peft.cep_depth == 0);
  CHECK_FALSE(none.peft.mcp);
  CHECK_FALSE(none.peft.adapter_msa);
  const RunConfig cm = ablation_cell(c, "cep+mcp");
  CHECK(cm.peft.cep_depth == c.peft.cep_depth);
  CHECK(cm.peft.mcp);
  CHECK_FALSE(cm.peft.adapter_ffn);
  CHECK_THROWS_AS(ablation_cell(c, "cep+lasers"), ConfigError);
  CHECK_THROWS_AS(ablation_cell(c, 3), ConfigError);
  c.ablation.axis = "prompt_length";
  CHECK(ablation_cell(c, 7).peft.n_prompt == 7);
  CHECK_THROWS_AS(ablation_cell(c, -1), ConfigError);
  c.ablation.axis = "dropout";
  CHECK_THROWS_AS(ablation_cell(c, 1), ConfigError);
}

TEST_CASE("ablation sweep is deterministic and exports all formats") {
  const ParameterStore pre = toy_pretrained();
  RunConfig c = toy_run(Mode::peft);
  c.train.epochs = 1;
  c.ablation.axis = "cep_depth";
  c.ablation.values = {0, 1, 2};
  const auto tr = toy_scenes(12, 4), va = toy_scenes(13, 3);
  const auto a = run_ablation(c, pre, tr, va);
  const auto b = run_ablation(c, pre, tr, va);
  REQUIRE(a.size() == 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(bit_equal(a[i].metrics, b[i].metrics));
    CHECK(a[i].final_loss == b[i].final_loss);
    if (i > 0) CHECK(a[i].trainable > a[i - 1].trainable);
  }
  const auto j = ablation_json(c, a);
  CHECK(j["rows"].size() == 3);
  CHECK(j["axis"] == "cep_depth");
  const std::string csv = ablation_csv(a);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  CHECK(csv.rfind("value,trainable,final_loss,minADE,minFDE,MR,b-minFDE\n", 0) == 0);
  const std::string svg = ablation_svg("cep_depth", a, "minFDE");
  CHECK(svg.find("<polyline") != std::string::npos);
  CHECK_THROWS_AS(ablation_svg("cep_depth", a, "accuracy"), ConfigError);
}
