#include "fpeft/forecast.hpp"

#include <cmath>
#include <cstring>
#include <limits>

#include "fpeft/binio.hpp"

namespace fpeft::inline FPEFT_PRECISION_NS {

namespace {

Var lin(Binder& b, Var x, const std::string& prefix) { return linear(x, b(prefix + ".w"), b(prefix + ".b")); }

}  // namespace

Var ForecastVars::agent_traj(int agent) const {
  if (agent < 0 || agent >= N) throw ShapeError("agent index out of range");
  return reshape(slice(traj, mode_major ? 1 : 0, agent, agent + 1), {K, 2 * T});
}

Var ForecastVars::agent_logits(int agent) const {
  if (agent < 0 || agent >= N) throw ShapeError("agent index out of range");
  return reshape(slice(logits, mode_major ? 1 : 0, agent, agent + 1), {K});
}

ForecastVars peft_forward(Binder& b, const ModelConfig& cfg, const Scene& scene) {
  FinetuneTokens tk = build_finetune_tokens(b, cfg, scene);
  Var lat = encoder_forward(b, cfg, tk.encoder_in.tokens, tk.encoder_in.valid);
  lat = add(lat, positional_embedding(b, cfg, tk.encoder_in.positions));
  Var dec = decoder_forward(b, cfg, lat, tk.encoder_in.valid, tk.future_queries.tokens);
  if (dec.shape().size() == 2) dec = tile(dec, cfg.K);
  if (dec.shape()[0] != cfg.K)
    throw ConfigError("prompt set has " + std::to_string(dec.shape()[0]) + " modes, config K=" + std::to_string(cfg.K));
  ForecastVars f;
  f.N = static_cast<int>(scene.agents.size());
  f.K = cfg.K;
  f.T = cfg.T;
  f.mode_major = true;
  f.refs = tk.future_queries.positions;
  f.traj = lin(b, dec, "head.future");
  if (b.has("head.conf.w")) {
    f.logits = reshape(lin(b, dec, "head.conf"), {f.K, f.N});
  } else {
    f.logits = b.tape().constant(Tensor({f.K, f.N}));
  }
  return f;
}

ForecastVars baseline_forward(Binder& b, const ModelConfig& cfg, const Scene& scene) {
  FinetuneTokens tk = build_finetune_tokens(b, cfg, scene);
  Var lat = encoder_forward(b, cfg, tk.encoder_in.tokens, tk.encoder_in.valid);
  ForecastVars f;
  f.N = static_cast<int>(scene.agents.size());
  f.K = cfg.K;
  f.T = cfg.T;
  f.mode_major = false;
  f.refs = tk.future_queries.positions;
  Var h = gelu(lin(b, slice(lat, 0, 0, f.N), "md.fc1"));
  f.traj = lin(b, h, "md.traj");
  f.logits = lin(b, h, "md.conf");
  return f;
}

ForecastVars forecast_forward(Binder& b, const ModelConfig& cfg, const Scene& scene) {
  return b.has("md.fc1.w") ? baseline_forward(b, cfg, scene) : peft_forward(b, cfg, scene);
}

ForecastOutput to_output(const ForecastVars& f, std::uint64_t scene_id) {
  ForecastOutput o;
  o.scene_id = scene_id;
  o.N = f.N;
  o.K = f.K;
  o.T = f.T;
  o.traj.resize(static_cast<std::size_t>(f.N * f.K * f.T * 2));
  o.conf.resize(static_cast<std::size_t>(f.N * f.K));
  const Tensor& tv = f.traj.value();
  const Tensor& lv = f.logits.value();
  for (int n = 0; n < f.N; ++n) {
    const Point2 ref = f.refs[static_cast<std::size_t>(n)];
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < f.K; ++k) {
      const std::int64_t li = f.mode_major ? k * f.N + n : n * f.K + k;
      mx = std::max(mx, static_cast<double>(lv[li]));
    }
    double z = 0;
    std::vector<double> e(static_cast<std::size_t>(f.K));
    for (int k = 0; k < f.K; ++k) {
      const std::int64_t li = f.mode_major ? k * f.N + n : n * f.K + k;
      e[static_cast<std::size_t>(k)] = std::exp(static_cast<double>(lv[li]) - mx);
      z += e[static_cast<std::size_t>(k)];
    }
    for (int k = 0; k < f.K; ++k) {
      o.conf[static_cast<std::size_t>(n * f.K + k)] = static_cast<float>(e[static_cast<std::size_t>(k)] / z);
      const std::int64_t base = f.mode_major ? (static_cast<std::int64_t>(k) * f.N + n) * 2 * f.T
                                             : (static_cast<std::int64_t>(n) * f.K + k) * 2 * f.T;
      for (int t = 0; t < f.T; ++t) {
        const std::size_t out = static_cast<std::size_t>(((n * f.K + k) * f.T + t) * 2);
        o.traj[out] = static_cast<float>(tv[base + 2 * t]) + ref.x;
        o.traj[out + 1] = static_cast<float>(tv[base + 2 * t + 1]) + ref.y;
      }
    }
  }
  return o;
}

std::optional<Var> loss_finetune(Var agent_traj, Var agent_logits, std::span<const Point2> gt_local,
                                 std::span<const std::uint8_t> valid, double huber_delta, double ce_weight,
                                 FinetuneLossParts* parts) {
  const std::int64_t K = agent_traj.shape()[0], T2 = agent_traj.shape()[1];
  const std::int64_t T = T2 / 2;
  if (static_cast<std::int64_t>(gt_local.size()) != T || static_cast<std::int64_t>(valid.size()) != T)
    throw ShapeError("finetune loss: ground truth has " + std::to_string(gt_local.size()) + " steps, prediction " +
                     std::to_string(T));
  if (agent_logits.shape() != Shape{K}) throw ShapeError("finetune loss: logits shape " + shape_str(agent_logits.shape()));
  Tensor gt({T2}), mask({T2});
  std::int64_t n_valid = 0;
  for (std::int64_t t = 0; t < T; ++t) {
    if (!valid[static_cast<std::size_t>(t)]) continue;
    gt[2 * t] = static_cast<Real>(gt_local[static_cast<std::size_t>(t)].x);
    gt[2 * t + 1] = static_cast<Real>(gt_local[static_cast<std::size_t>(t)].y);
    mask[2 * t] = mask[2 * t + 1] = 1;
    ++n_valid;
  }
  if (n_valid == 0) return std::nullopt;
  const Tensor& tv = agent_traj.value();
  int best = 0;
  double best_ade = std::numeric_limits<double>::infinity();
  for (std::int64_t k = 0; k < K; ++k) {
    double s = 0;
    for (std::int64_t t = 0; t < T; ++t) {
      if (!valid[static_cast<std::size_t>(t)]) continue;
      const double dx = static_cast<double>(tv[k * T2 + 2 * t]) - static_cast<double>(gt[2 * t]);
      const double dy = static_cast<double>(tv[k * T2 + 2 * t + 1]) - static_cast<double>(gt[2 * t + 1]);
      s += std::sqrt(dx * dx + dy * dy);
    }
    const double ade = s / static_cast<double>(n_valid);
    if (ade < best_ade) {
      best_ade = ade;
      best = static_cast<int>(k);
    }
  }
  Tape& tape = *agent_traj.tape;
  Var pred = reshape(slice(agent_traj, 0, best, best + 1), {T2});
  Var diff = mul(sub(pred, tape.constant(std::move(gt))), tape.constant(std::move(mask)));
  Var reg = scale(sum(huber(diff, huber_delta)), 1.0 / static_cast<double>(2 * n_valid));
  Var ce = scale(sum(slice(log_softmax(agent_logits, 0), 0, best, best + 1)), -1.0);
  if (parts) {
    parts->best_mode = best;
    parts->regression = static_cast<double>(reg.value().item());
    parts->classification = static_cast<double>(ce.value().item());
  }
  return add(reg, scale(ce, ce_weight));
}

std::optional<Var> scene_finetune_loss(const ForecastVars& f, const Scene& scene, double huber_delta,
                                       double ce_weight, FinetuneLossParts* parts) {
  const AgentTrack& a = scene.agents.at(0);
  const Point2 ref = f.refs.at(0);
  std::vector<Point2> local(a.future.size());
  for (std::size_t t = 0; t < a.future.size(); ++t) local[t] = Point2{a.future[t].x - ref.x, a.future[t].y - ref.y};
  return loss_finetune(f.agent_traj(0), f.agent_logits(0), local, a.future_valid, huber_delta, ce_weight, parts);
}

MetricsReport compute_metrics(std::span<const ForecastOutput> outs, std::span<const Scene> scenes, int horizon,
                              double miss_threshold) {
  if (outs.empty()) throw DataError("metrics: empty evaluation set");
  if (outs.size() != scenes.size())
    throw DataError("metrics: " + std::to_string(outs.size()) + " predictions for " + std::to_string(scenes.size()) +
                    " scenes");
  MetricsReport r;
  const int T = outs[0].T;
  r.horizon = horizon == 0 ? T : horizon;
  if (r.horizon < 1 || r.horizon > T)
    throw ConfigError("evaluation horizon " + std::to_string(r.horizon) + " exceeds prediction length " +
                      std::to_string(T));
  const int h = r.horizon;
  double s_ade = 0, s_fde = 0, s_mr = 0, s_b = 0;
  for (std::size_t i = 0; i < outs.size(); ++i) {
    const ForecastOutput& o = outs[i];
    const AgentTrack& a = scenes[i].agents.at(0);
    if (o.scene_id != scenes[i].id) throw DataError("metrics: prediction/scene id mismatch at " + std::to_string(i));
    if (o.T != T) throw DataError("metrics: inconsistent prediction lengths");
    if (static_cast<int>(a.future.size()) < h) throw DataError("metrics: ground truth shorter than horizon");
    std::vector<int> steps;
    for (int t = 0; t < h; ++t)
      if (a.future_valid[static_cast<std::size_t>(t)]) steps.push_back(t);
    if (steps.empty()) continue;
    ++r.count;
    double min_ade = std::numeric_limits<double>::infinity(), min_fde = min_ade;
    int best = 0;
    for (int k = 0; k < o.K; ++k) {
      double s = 0, fde = 0;
      for (int t : steps) {
        const double dx = static_cast<double>(o.x(0, k, t)) - a.future[static_cast<std::size_t>(t)].x;
        const double dy = static_cast<double>(o.y(0, k, t)) - a.future[static_cast<std::size_t>(t)].y;
        const double d = std::sqrt(dx * dx + dy * dy);
        s += d;
        fde = d;
      }
      min_ade = std::min(min_ade, s / static_cast<double>(steps.size()));
      if (fde < min_fde) {
        min_fde = fde;
        best = k;
      }
    }
    const double miss = 1.0 - static_cast<double>(o.p(0, best));
    s_ade += min_ade;
    s_fde += min_fde;
    s_mr += min_fde > miss_threshold ? 1.0 : 0.0;
    s_b += min_fde + miss * miss;
  }
  if (r.count == 0) throw DataError("metrics: no scene has a valid target step within the horizon");
  const double n = static_cast<double>(r.count);
  r.min_ade = s_ade / n;
  r.min_fde = s_fde / n;
  r.miss_rate = s_mr / n;
  r.brier_min_fde = s_b / n;
  return r;
}

void to_json(nlohmann::json& j, const MetricsReport& m) {
  j = {{"minADE", m.min_ade},         {"minFDE", m.min_fde}, {"MR", m.miss_rate},
       {"b-minFDE", m.brier_min_fde}, {"count", m.count},    {"horizon", m.horizon}};
}

bool bit_equal(const MetricsReport& a, const MetricsReport& b) {
  return std::memcmp(&a.min_ade, &b.min_ade, sizeof(double)) == 0 &&
         std::memcmp(&a.min_fde, &b.min_fde, sizeof(double)) == 0 &&
         std::memcmp(&a.miss_rate, &b.miss_rate, sizeof(double)) == 0 &&
         std::memcmp(&a.brier_min_fde, &b.brier_min_fde, sizeof(double)) == 0 && a.count == b.count &&
         a.horizon == b.horizon;
}

void write_predictions(const std::string& path, std::span<const ForecastOutput> outs) {
  ByteWriter w;
  w.magic("FPPR");
  w.u8(1);
  for (const auto& o : outs) {
    w.u64(o.scene_id);
    w.u32(static_cast<std::uint32_t>(o.N));
    w.u32(static_cast<std::uint32_t>(o.K));
    w.u32(static_cast<std::uint32_t>(o.T));
    for (float v : o.traj) w.f32(v);
    for (float v : o.conf) w.f32(v);
  }
  write_file(path, w.data());
}

std::vector<ForecastOutput> read_predictions(const std::string& path) {
  const auto bytes = read_file(path);
  ByteReader r(bytes, path);
  r.expect_magic("FPPR");
  if (const auto v = r.u8(); v != 1) throw DataError(path + ": unsupported FPPR version " + std::to_string(v));
  std::vector<ForecastOutput> outs;
  while (!r.done()) {
    ForecastOutput o;
    o.scene_id = r.u64();
    o.N = static_cast<int>(r.u32());
    o.K = static_cast<int>(r.u32());
    o.T = static_cast<int>(r.u32());
    const std::size_t nt = static_cast<std::size_t>(o.N) * o.K * o.T * 2, nc = static_cast<std::size_t>(o.N) * o.K;
    if ((nt + nc) * 4 > r.remaining()) throw DataError(path + ": truncated prediction record");
    o.traj.resize(nt);
    o.conf.resize(nc);
    for (auto& v : o.traj) v = r.f32();
    for (auto& v : o.conf) v = r.f32();
    outs.push_back(std::move(o));
  }
  return outs;
}

}  // namespace fpeft
