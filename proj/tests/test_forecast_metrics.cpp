#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "fpeft/forecast.hpp"
#include "fpeft/peft.hpp"
#include "support/fixtures.hpp"

using namespace fpeft;
using fpeft_test::toy_model;
using fpeft_test::toy_peft;
using fpeft_test::toy_scene;

namespace {

// Straight-line reference so brute-force metrics share no code with the library.
struct Reference {
  double ade = 0, fde = 0, mr = 0, b = 0;
  int used = 0;
};

Reference brute_force(const std::vector<ForecastOutput>& outs, const std::vector<Scene>& scenes, int h) {
  Reference r;
  int used = 0;
  for (std::size_t i = 0; i < outs.size(); ++i) {
    const auto& o = outs[i];
    const auto& a = scenes[i].agents[0];
    std::vector<double> ade(static_cast<std::size_t>(o.K)), fde(static_cast<std::size_t>(o.K));
    bool any = false;
    for (int k = 0; k < o.K; ++k) {
      std::vector<double> d;
      for (int t = 0; t < h; ++t) {
        if (!a.future_valid[static_cast<std::size_t>(t)]) continue;
        d.push_back(std::hypot(static_cast<double>(o.x(0, k, t)) - a.future[static_cast<std::size_t>(t)].x,
                               static_cast<double>(o.y(0, k, t)) - a.future[static_cast<std::size_t>(t)].y));
      }
      if (d.empty()) break;
      any = true;
      ade[static_cast<std::size_t>(k)] = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
      fde[static_cast<std::size_t>(k)] = d.back();
    }
    if (!any) continue;
    ++used;
    const auto best = std::min_element(fde.begin(), fde.end()) - fde.begin();
    const double fmin = fde[static_cast<std::size_t>(best)];
    r.ade += *std::min_element(ade.begin(), ade.end());
    r.fde += fmin;
    r.mr += fmin > 2.0;
    r.b += fmin + std::pow(1.0 - o.p(0, static_cast<int>(best)), 2);
  }
  const double n = used;
  return {r.ade / n, r.fde / n, r.mr / n, r.b / n, used};
}

Scene line_scene(std::uint64_t id, int T, std::vector<Point2> future) {
  Scene s;
  s.id = id;
  AgentTrack a;
  a.history = {Point2{}};
  a.history_valid = {1};
  a.future = std::move(future);
  a.future_valid.assign(static_cast<std::size_t>(T), 1);
  s.agents.push_back(a);
  return s;
}

ForecastOutput make_output(std::uint64_t id, int K, int T) {
  ForecastOutput o;
  o.scene_id = id;
  o.N = 1;
  o.K = K;
  o.T = T;
  o.traj.assign(static_cast<std::size_t>(K * T * 2), 0.0f);
  o.conf.assign(static_cast<std::size_t>(K), 1.0f / static_cast<float>(K));
  return o;
}

float& at(ForecastOutput& o, int k, int t, int c) { return o.traj[static_cast<std::size_t>((k * o.T + t) * 2 + c)]; }

void random_pair(std::mt19937_64& rng, std::uint64_t id, int K, int T, ForecastOutput& o, Scene& s) {
  std::normal_distribution<double> nd(0, 3);
  std::vector<Point2> fut;
  for (int t = 0; t < T; ++t) fut.push_back({static_cast<float>(nd(rng)), static_cast<float>(nd(rng))});
  s = line_scene(id, T, fut);
  o = make_output(id, K, T);
  for (auto& v : o.traj) v = static_cast<float>(nd(rng));
  std::vector<double> e(static_cast<std::size_t>(K));
  for (auto& x : e) x = std::exp(nd(rng));
  const double z = std::accumulate(e.begin(), e.end(), 0.0);
  for (int k = 0; k < K; ++k) o.conf[static_cast<std::size_t>(k)] = static_cast<float>(e[static_cast<std::size_t>(k)] / z);
  // One scene in four has gaps in its ground truth, occasionally none valid at all.
  if (id % 4 == 1) {
    std::bernoulli_distribution keep(id % 40 == 1 ? 0.0 : 0.6);
    auto& a = s.agents[0];
    for (std::size_t t = 0; t < a.future.size(); ++t)
      if (!keep(rng)) {
        a.future_valid[t] = 0;
        a.future[t] = Point2{};
      }
  }
}

}  // namespace

TEST_CASE("winner-takes-all: mode choice, hand values and gradient mask") {
  Tape t;
  const int T = 2;
  // Mode 0 has ADE 1.0 m, mode 1 has ADE 2.0 m.
  Var traj = t.leaf(Tensor::matrix(2, 2 * T, {1, 0, 1, 0, 0, 2, 0, 2}), true);
  Var logits = t.leaf(Tensor::vector({0.3f, -0.2f}), true);
  const Point2 gt[] = {{0, 0}, {0, 0}};
  const std::uint8_t valid[] = {1, 1};
  FinetuneLossParts parts;
  Var loss = *loss_finetune(traj, logits, gt, valid, 1.0, 1.0, &parts);
  CHECK(parts.best_mode == 0);
  // Huber(1) = 0.5 on two of four coordinates.
  CHECK(parts.regression == doctest::Approx(0.25));
  CHECK(parts.classification == doctest::Approx(std::log(1 + std::exp(-0.5))));
  t.backward(loss);
  const Tensor& g = *t.grad(traj);
  for (std::int64_t j = 2 * T; j < 4 * T; ++j) CHECK(g[j] == 0);
  CHECK(g[0] != 0);
  const Tensor& gl = *t.grad(logits);
  CHECK(gl[0] < 0);
  CHECK(gl[1] > 0);
}

TEST_CASE("winner-takes-all: Huber beyond delta, perfect fit, no valid steps") {
  Tape t;
  const Point2 gt[] = {{2, 0}, {5, 5}};
  std::uint8_t valid[] = {1, 0};
  Var one = t.constant(Tensor::matrix(1, 4, {0, 0, 9, 9}));
  Var z = t.constant(Tensor::vector({0}));
  FinetuneLossParts parts;
  // |2| -> 1 * (2 - 0.5) over two valid coordinates.
  CHECK(loss_finetune(one, z, gt, valid, 1.0, 1.0, &parts)->value().item() == doctest::Approx(0.75));
  CHECK(parts.classification == 0);

  Var exact = t.constant(Tensor::matrix(2, 4, {7, 7, 7, 7, 2, 0, 5, 5}));
  Var sure = t.constant(Tensor::vector({-40, 40}));
  valid[1] = 1;
  CHECK(loss_finetune(exact, sure, gt, valid)->value().item() == doctest::Approx(0).epsilon(1e-12));

  const std::uint8_t none[] = {0, 0};
  CHECK_FALSE(loss_finetune(exact, sure, gt, none).has_value());
}

TEST_CASE("forecast outputs: shapes and simplex confidences") {
  const ModelConfig m = toy_model();
  ParameterStore pf = init_pretrained(m, 1), md = pf;
  add_finetune_params(pf, m, toy_peft(), Mode::peft, 1);
  add_finetune_params(md, m, toy_peft(), Mode::head_only, 1);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  for (auto& v : pf.at("head.conf.w").value.data()) v = static_cast<Real>(nd(rng));
  const Scene sc = toy_scene(1);
  for (ParameterStore* st : {&pf, &md}) {
    Tape t;
    Binder b(t, *st);
    const ForecastVars f = forecast_forward(b, m, sc);
    CHECK(f.mode_major == (st == &pf));
    const ForecastOutput o = to_output(f, sc.id);
    CHECK(o.traj.size() == sc.agents.size() * static_cast<std::size_t>(m.K * m.T * 2));
    for (int n = 0; n < o.N; ++n) {
      double s = 0;
      for (int k = 0; k < o.K; ++k) s += o.p(n, k);
      CHECK(s == doctest::Approx(1).epsilon(1e-5));
    }
    // Agent frame outputs are shifted back by the reference point.
    const Point2 ref = agent_reference(sc.agents[1]);
    const Tensor at1 = f.agent_traj(1).value();
    CHECK(o.x(1, 0, 0) == static_cast<float>(at1[0]) + ref.x);
  }
}

TEST_CASE("metrics: hand oracles") {
  const int T = 3;
  const Scene sc = line_scene(5, T, {{1, 0}, {2, 0}, {3, 0}});
  ForecastOutput o = make_output(5, 2, T);
  for (int t = 0; t < T; ++t) {
    at(o, 0, t, 0) = static_cast<float>(t + 1);
    at(o, 1, t, 0) = static_cast<float>(t + 1);
  }
  at(o, 0, 2, 1) = 1.5f;
  at(o, 1, 2, 1) = -3.0f;
  o.conf = {0.75f, 0.25f};
  const ForecastOutput outs[] = {o};
  const Scene scenes[] = {sc};
  MetricsReport r = compute_metrics(outs, scenes);
  CHECK(r.min_fde == 1.5);
  CHECK(r.min_ade == 0.5);
  CHECK(r.miss_rate == 0);
  CHECK(r.brier_min_fde == 1.5 + 0.0625);

  ForecastOutput perfect = o;
  at(perfect, 0, 2, 1) = 0;
  perfect.conf = {1.0f, 0.0f};
  const ForecastOutput po[] = {perfect};
  r = compute_metrics(po, scenes);
  CHECK(r.min_ade == 0);
  CHECK(r.min_fde == 0);
  CHECK(r.miss_rate == 0);
  CHECK(r.brier_min_fde == r.min_fde);

  ForecastOutput far = o;
  at(far, 0, 2, 1) = 2.5f;
  const ForecastOutput fo[] = {far};
  CHECK(compute_metrics(fo, scenes).miss_rate == 1);

  // Prefix horizon: the first two steps are exact.
  CHECK(compute_metrics(outs, scenes, 2).min_fde == 0);
  CHECK_THROWS_AS(compute_metrics(outs, scenes, 4), ConfigError);
  CHECK_THROWS_AS(compute_metrics(std::span<const ForecastOutput>{}, std::span<const Scene>{}), DataError);
}

TEST_CASE("metrics: only valid ground-truth steps are scored") {
  const int T = 4;
  Scene sc = line_scene(9, T, {{1, 0}, {2, 0}, {3, 0}, {4, 0}});
  sc.agents[0].future_valid = {0, 1, 0, 1};
  sc.agents[0].future[0] = sc.agents[0].future[2] = Point2{};
  ForecastOutput o = make_output(9, 1, T);
  // Errors 7, 1, 7, 3 by step; the invalid steps must not count.
  const float xs[] = {8, 3, 10, 7};
  for (int t = 0; t < T; ++t) at(o, 0, t, 0) = xs[t];
  const ForecastOutput outs[] = {o};
  const Scene scenes[] = {sc};
  MetricsReport r = compute_metrics(outs, scenes);
  CHECK(r.min_ade == 2.0);
  CHECK(r.min_fde == 3.0);
  CHECK(r.count == 1);
  // Horizon 3 ends on an invalid slot: FDE comes from the last valid one.
  r = compute_metrics(outs, scenes, 3);
  CHECK(r.min_ade == 1.0);
  CHECK(r.min_fde == 1.0);
  // Nothing valid in the first step: no scene left.
  CHECK_THROWS_AS(compute_metrics(outs, scenes, 1), DataError);

  Scene full = line_scene(10, T, {{1, 0}, {2, 0}, {3, 0}, {4, 0}});
  ForecastOutput o2 = make_output(10, 1, T);
  for (int t = 0; t < T; ++t) at(o2, 0, t, 0) = static_cast<float>(t + 1);
  const ForecastOutput both[] = {o, o2};
  const Scene both_sc[] = {sc, full};
  r = compute_metrics(both, both_sc, 1);
  CHECK(r.count == 1);
  CHECK(r.min_fde == 0.0);
}

TEST_CASE("metrics match a brute-force reference on random pairs") {
  std::mt19937_64 rng(2024);
  std::vector<ForecastOutput> outs(1000);
  std::vector<Scene> scenes(1000);
  for (std::size_t i = 0; i < outs.size(); ++i) random_pair(rng, i, 1 + static_cast<int>(i % 6), 8, outs[i], scenes[i]);
  for (int h : {8, 4}) {
    const MetricsReport r = compute_metrics(outs, scenes, h);
    const Reference ref = brute_force(outs, scenes, h);
    CHECK(r.count == static_cast<std::size_t>(ref.used));
    CHECK(ref.used < 1000);
    CHECK(std::abs(r.min_ade - ref.ade) < 1e-6);
    CHECK(std::abs(r.min_fde - ref.fde) < 1e-6);
    CHECK(std::abs(r.miss_rate - ref.mr) < 1e-6);
    CHECK(std::abs(r.brier_min_fde - ref.b) < 1e-6);
    CHECK(r.brier_min_fde >= r.min_fde);
    CHECK(r.miss_rate >= 0);
    CHECK(r.miss_rate <= 1);
  }
}

TEST_CASE("metrics: per-mode bounds and mode permutation") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 200; ++i) {
    ForecastOutput o;
    Scene s;
    random_pair(rng, static_cast<std::uint64_t>(i), 4, 6, o, s);
    const ForecastOutput one[] = {o};
    const Scene sc[] = {s};
    if (std::count(s.agents[0].future_valid.begin(), s.agents[0].future_valid.end(), 1) == 0) {
      CHECK_THROWS_AS(compute_metrics(one, sc), DataError);
      continue;
    }
    const MetricsReport r = compute_metrics(one, sc);
    for (int k = 0; k < 4; ++k) {
      ForecastOutput single = make_output(o.scene_id, 1, 6);
      std::copy(o.traj.begin() + k * 12, o.traj.begin() + (k + 1) * 12, single.traj.begin());
      single.conf = {1.0f};
      const ForecastOutput so[] = {single};
      const MetricsReport rk = compute_metrics(so, sc);
      CHECK(r.min_ade <= rk.min_ade);
      CHECK(r.min_fde <= rk.min_fde);
    }
    ForecastOutput rev = o;
    for (int k = 0; k < 4; ++k) {
      std::copy(o.traj.begin() + k * 12, o.traj.begin() + (k + 1) * 12, rev.traj.begin() + (3 - k) * 12);
      rev.conf[static_cast<std::size_t>(3 - k)] = o.conf[static_cast<std::size_t>(k)];
    }
    const ForecastOutput ro[] = {rev};
    CHECK(bit_equal(compute_metrics(ro, sc), r));
  }
}

TEST_CASE("prediction dump round trip") {
  std::mt19937_64 rng(3);
  std::vector<ForecastOutput> outs(5);
  Scene s;
  for (std::size_t i = 0; i < outs.size(); ++i) random_pair(rng, 100 + i, 3, 4, outs[i], s);
  outs[2].N = 2;
  outs[2].traj.resize(2 * 3 * 4 * 2, 1.25f);
  outs[2].conf.resize(6, 0.5f);
  const auto path = (std::filesystem::temp_directory_path() / "fpeft_preds.fppr").string();
  write_predictions(path, outs);
  const auto back = read_predictions(path);
  REQUIRE(back.size() == outs.size());
  for (std::size_t i = 0; i < outs.size(); ++i) {
    CHECK(back[i].scene_id == outs[i].scene_id);
    CHECK(back[i].N == outs[i].N);
    CHECK(back[i].traj == outs[i].traj);
    CHECK(back[i].conf == outs[i].conf);
  }
  std::filesystem::remove(path);
}
