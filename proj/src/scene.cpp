#include "fpeft/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "fpeft/binio.hpp"

namespace fpeft::inline FPEFT_PRECISION_NS {

void validate_scene(const Scene& scene, int H, int T, int P) {
  const std::string where = "scene " + std::to_string(scene.id);
  if (scene.agents.empty()) throw DataError(where + ": no agents");
  if (scene.lanes.empty()) throw DataError(where + ": no lanes");
  auto check_track = [&](const std::vector<Point2>& pts, const std::vector<std::uint8_t>& valid, int n, const char* what) {
    if (static_cast<int>(pts.size()) != n || static_cast<int>(valid.size()) != n) {
      throw DataError(where + ": " + what + " has " + std::to_string(pts.size()) + " slots, expected " + std::to_string(n));
    }
    for (int i = 0; i < n; ++i)
      if (!valid[static_cast<std::size_t>(i)] && !(pts[static_cast<std::size_t>(i)] == Point2{}))
        throw DataError(where + ": invalid " + what + " slot carries non-zero coordinates");
  };
  for (const auto& a : scene.agents) {
    check_track(a.history, a.history_valid, H, "history");
    check_track(a.future, a.future_valid, T, "future");
  }
  for (const auto& l : scene.lanes) {
    check_track(l.points, l.point_valid, P, "lane");
    if (std::none_of(l.point_valid.begin(), l.point_valid.end(), [](auto v) { return v != 0; }))
      throw DataError(where + ": lane without valid points");
  }
}

// ---------------------------------------------------------------------------

StandardizedTrack standardize(const RawTrack& raw, double target_rate_hz, int H, int T) {
  if (H <= 0 || T <= 0) throw ConfigError("standardize: window lengths must be positive");
  if (raw.samples.empty()) throw DataError("standardize: empty raw track");
  if (!(raw.native_rate_hz > 0) || !(target_rate_hz > 0)) throw DataError("standardize: rates must be positive");
  const double ratio = target_rate_hz / raw.native_rate_hz;
  if (ratio < 1.0 - 1e-9 || std::abs(ratio - std::round(ratio)) > 1e-9) {
    throw DataError("standardize: native rate " + std::to_string(raw.native_rate_hz) + " Hz does not divide target rate " +
                    std::to_string(target_rate_hz) + " Hz");
  }
  for (std::size_t i = 1; i < raw.samples.size(); ++i)
    if (!(raw.samples[i].t > raw.samples[i - 1].t)) throw DataError("standardize: timestamps not strictly increasing");

  StandardizedTrack out;
  out.history.assign(static_cast<std::size_t>(H), Point2{});
  out.future.assign(static_cast<std::size_t>(T), Point2{});
  out.history_valid.assign(static_cast<std::size_t>(H), 0);
  out.future_valid.assign(static_cast<std::size_t>(T), 0);

  for (const auto& s : raw.samples) {
    const double native_step = s.t * raw.native_rate_hz;
    const double k_native = std::round(native_step);
    if (std::abs(native_step - k_native) > 1e-6) {
      throw DataError("standardize: timestamp " + std::to_string(s.t) + " s is off the native " +
                      std::to_string(raw.native_rate_hz) + " Hz grid");
    }
    if (k_native <= -raw.native_history_len || k_native > raw.native_future_len) continue;  // outside native window
    const long long k = std::llround(k_native * std::round(ratio));
    if (k <= 0) {
      const long long slot = H - 1 + k;
      if (slot < 0) continue;
      out.history[static_cast<std::size_t>(slot)] = s.p;
      out.history_valid[static_cast<std::size_t>(slot)] = 1;
    } else {
      const long long slot = k - 1;
      if (slot >= T) continue;
      out.future[static_cast<std::size_t>(slot)] = s.p;
      out.future_valid[static_cast<std::size_t>(slot)] = 1;
    }
  }
  return out;
}

RawTrack to_raw(const StandardizedTrack& track, double rate_hz) {
  RawTrack raw;
  raw.native_rate_hz = rate_hz;
  const int H = static_cast<int>(track.history.size());
  const int T = static_cast<int>(track.future.size());
  raw.native_history_len = H;
  raw.native_future_len = T;
  for (int i = 0; i < H; ++i)
    if (track.history_valid[static_cast<std::size_t>(i)])
      raw.samples.push_back({static_cast<double>(i - (H - 1)) / rate_hz, track.history[static_cast<std::size_t>(i)]});
  for (int j = 0; j < T; ++j)
    if (track.future_valid[static_cast<std::size_t>(j)])
      raw.samples.push_back({static_cast<double>(j + 1) / rate_hz, track.future[static_cast<std::size_t>(j)]});
  return raw;
}

// ---------------------------------------------------------------------------
// Generator

namespace {

constexpr double kMaxCurvature = 1.0 / 25.0;
constexpr double kLaneChangeDuration = 2.0;

struct Vec {
  double x = 0, y = 0;
};

// Straight line (kappa == 0) or circular arc parameterised by arc length of
// the reference curve, shifted laterally by `offset`.
struct Curve {
  double x0 = 0, y0 = 0, th0 = 0, kappa = 0, offset = 0;

  double heading(double s) const { return th0 + kappa * s; }
  Vec base(double s) const {
    if (kappa == 0) return {x0 + s * std::cos(th0), y0 + s * std::sin(th0)};
    const double th = heading(s);
    return {x0 + (std::sin(th) - std::sin(th0)) / kappa, y0 - (std::cos(th) - std::cos(th0)) / kappa};
  }
  Vec at(double s, double lateral) const {
    const Vec b = base(s);
    const double th = heading(s);
    const double d = offset + lateral;
    return {b.x - d * std::sin(th), b.y + d * std::cos(th)};
  }
};

struct Motion {
  const Curve* lane = nullptr;
  double s_present = 0, v0 = 0, accel = 0;
  bool lane_change = false;
  double lc_dir = 0, lc_t0 = 0, lane_width = 3.5;

  double lateral(double t) const {
    if (!lane_change) return 0;
    const double u = std::clamp((t - lc_t0) / kLaneChangeDuration, 0.0, 1.0);
    return lc_dir * lane_width * u * u * (3 - 2 * u);
  }
  Vec at(double t) const { return lane->at(s_present + v0 * t + 0.5 * accel * t * t, lateral(t)); }
};

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
bool coin(std::mt19937_64& rng, double p) { return std::bernoulli_distribution(p)(rng); }

// Gaussian noise truncated to norm <= 2 sigma.
Vec noise(std::mt19937_64& rng, double sigma) {
  if (sigma <= 0) return {};
  std::normal_distribution<double> n(0.0, sigma);
  for (int i = 0; i < 64; ++i) {
    Vec v{n(rng), n(rng)};
    if (v.x * v.x + v.y * v.y <= 4 * sigma * sigma) return v;
  }
  return {};
}

Curve random_lane(std::mt19937_64& rng, const Curve& ego, int index, int& parallel_left, int& parallel_right,
                  double lane_width) {
  Curve c;
  const double kappa = coin(rng, 0.5) ? 0.0 : (coin(rng, 0.5) ? 1 : -1) * uniform(rng, 1.0 / 60.0, kMaxCurvature);
  if (index == 0) {
    c.kappa = kappa;
    return c;
  }
  if (coin(rng, 0.5) && parallel_left + parallel_right < 4) {
    c = ego;
    const bool left = coin(rng, 0.5);
    const int j = left ? ++parallel_left : ++parallel_right;
    c.offset = (left ? 1 : -1) * lane_width * std::min(j, 2);
    return c;
  }
  // Crossing or branching lane through a point on the ego lane.
  const double sc = uniform(rng, 30.0, 70.0);
  const Vec p = ego.base(sc);
  const double th = ego.heading(sc) + (coin(rng, 0.5) ? 1 : -1) * uniform(rng, 0.4, 1.2);
  c.kappa = kappa;
  c.th0 = th;
  c.x0 = p.x - 40.0 * std::cos(th);
  c.y0 = p.y - 40.0 * std::sin(th);
  return c;
}

}  // namespace

double GeneratorProfile::max_path_speed() const {
  const double max_offset = 3.0 * lane_width;  // two parallel lanes plus one lane change
  return speed_max * (1.0 + kMaxCurvature * max_offset) + 1.5 * lane_width / kLaneChangeDuration;
}

Scene generate_scene(std::uint64_t seed, std::uint64_t index, const GeneratorProfile& prof) {
  if (prof.n_agents[0] < 1 || prof.n_agents[1] < prof.n_agents[0] || prof.n_lanes[0] < 1 ||
      prof.n_lanes[1] < prof.n_lanes[0]) {
    throw ConfigError("generator profile: agent/lane ranges must be nonempty and start at >= 1");
  }
  if (prof.history_native < 1 || prof.future_native < 1 || prof.P < 2) {
    throw ConfigError("generator profile: native windows must be positive and P >= 2");
  }
  std::mt19937_64 rng(seed ^ index);
  const int n_lanes = uniform_int(rng, prof.n_lanes[0], prof.n_lanes[1]);
  const int n_agents = uniform_int(rng, prof.n_agents[0], prof.n_agents[1]);

  std::vector<Curve> lanes;
  int pl = 0, pr = 0;
  for (int i = 0; i < n_lanes; ++i) lanes.push_back(random_lane(rng, lanes.empty() ? Curve{} : lanes[0], i, pl, pr, prof.lane_width));

  const double t_max = std::max((prof.history_native - 1) / prof.rate_hz, prof.future_native / prof.rate_hz);
  const double accel_max =
      t_max > 0 ? std::min(prof.max_accel, 0.99 * (prof.speed_max - prof.speed_min) / (2.0 * t_max)) : prof.max_accel;

  std::vector<Motion> motions;
  for (int a = 0; a < n_agents; ++a) {
    Motion m;
    const int lane = a == 0 ? 0 : uniform_int(rng, 0, n_lanes - 1);
    m.lane = &lanes[static_cast<std::size_t>(lane)];
    m.s_present = a == 0 ? 40.0 : uniform(rng, 25.0, 65.0);
    m.accel = uniform(rng, -accel_max, accel_max);
    const double margin = std::abs(m.accel) * t_max;
    m.v0 = uniform(rng, prof.speed_min + margin, prof.speed_max - margin);
    m.lane_width = prof.lane_width;
    m.lane_change = coin(rng, prof.lane_change_prob);
    if (m.lane_change) {
      m.lc_dir = coin(rng, 0.5) ? 1.0 : -1.0;
      m.lc_t0 = uniform(rng, -kLaneChangeDuration, t_max);
    }
    motions.push_back(m);
  }

  // Raw native samples.
  std::vector<RawTrack> raw(static_cast<std::size_t>(n_agents));
  for (int a = 0; a < n_agents; ++a) {
    int first = -(prof.history_native - 1), last = prof.future_native;
    if (a > 0 && coin(rng, prof.partial_obs_prob)) {
      first += uniform_int(rng, 0, prof.history_native - 1);
      last -= uniform_int(rng, 0, prof.future_native);
    }
    RawTrack& r = raw[static_cast<std::size_t>(a)];
    r.native_rate_hz = prof.rate_hz;
    r.native_history_len = prof.history_native;
    r.native_future_len = prof.future_native;
    for (int k = -(prof.history_native - 1); k <= prof.future_native; ++k) {
      const double t = k / prof.rate_hz;
      const Vec p = motions[static_cast<std::size_t>(a)].at(t);
      const Vec e = noise(rng, prof.noise_sigma);
      if (k < first || k > last) continue;
      r.samples.push_back({t, Point2{static_cast<float>(p.x + e.x), static_cast<float>(p.y + e.y)}});
    }
  }

  // Target frame: observed present position, noise-free heading.
  const Point2 origin = raw[0].samples[static_cast<std::size_t>(prof.history_native - 1)].p;
  const Vec v_plus = motions[0].at(1e-3), v_minus = motions[0].at(-1e-3);
  const double heading = std::atan2(v_plus.y - v_minus.y, v_plus.x - v_minus.x);
  const double ch = std::cos(heading), sh = std::sin(heading);
  auto to_frame = [&](double x, double y) {
    const double dx = x - origin.x, dy = y - origin.y;
    return Point2{static_cast<float>(ch * dx + sh * dy), static_cast<float>(-sh * dx + ch * dy)};
  };

  Scene scene;
  scene.id = index;
  scene.dataset_tag = prof.tag;
  scene.sample_rate_hz = prof.target_rate_hz;
  for (int a = 0; a < n_agents; ++a) {
    StandardizedTrack st = standardize(raw[static_cast<std::size_t>(a)], prof.target_rate_hz, prof.H, prof.T);
    AgentTrack track;
    for (std::size_t i = 0; i < st.history.size(); ++i)
      if (st.history_valid[i]) st.history[i] = to_frame(st.history[i].x, st.history[i].y);
    for (std::size_t i = 0; i < st.future.size(); ++i)
      if (st.future_valid[i]) st.future[i] = to_frame(st.future[i].x, st.future[i].y);
    track.history = std::move(st.history);
    track.future = std::move(st.future);
    track.history_valid = std::move(st.history_valid);
    track.future_valid = std::move(st.future_valid);
    track.category = a == 0 ? 0 : (uniform_int(rng, 0, 2) == 0 ? 1 : 0);
    scene.agents.push_back(std::move(track));
  }
  // The target's present sample defines the origin exactly.
  scene.agents[0].history[static_cast<std::size_t>(prof.H - 1)] = Point2{0, 0};

  const Vec target_world{origin.x, origin.y};
  for (const Curve& c : lanes) {
    double best_s = 0, best_d = 1e300;
    for (double s = 0; s <= 120.0; s += 0.5) {
      const Vec p = c.at(s, 0);
      const double d = std::hypot(p.x - target_world.x, p.y - target_world.y);
      if (d < best_d) best_d = d, best_s = s;
    }
    const double s0 = std::max(0.0, best_s - prof.lane_window / 4.0);
    LanePolyline lane;
    lane.category = c.kappa == 0 ? 0 : 1;
    int n_valid = prof.P;
    if (coin(rng, 0.1)) n_valid = uniform_int(rng, 2, prof.P - 1);
    for (int k = 0; k < prof.P; ++k) {
      if (k < n_valid) {
        const Vec p = c.at(s0 + k * prof.lane_window / (prof.P - 1), 0);
        lane.points.push_back(to_frame(p.x, p.y));
        lane.point_valid.push_back(1);
      } else {
        lane.points.push_back(Point2{});
        lane.point_valid.push_back(0);
      }
    }
    scene.lanes.push_back(std::move(lane));
  }
  return scene;
}

std::vector<Scene> generate_synthetic(std::uint64_t seed, int n_scenes, const GeneratorProfile& profile) {
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(std::max(0, n_scenes)));
  for (int i = 0; i < n_scenes; ++i) out.push_back(generate_scene(seed, static_cast<std::uint64_t>(i), profile));
  return out;
}

GeneratorProfile preset_profile(const std::string& name, int H, int T, int P) {
  GeneratorProfile p;
  p.H = H;
  p.T = T;
  p.P = P;
  p.tag = name;
  if (name == "av2_like") {
    p.history_native = H;
    p.future_native = T;
  } else if (name == "av1_like") {
    // 2 s of history and 3 s of future against a 5 s / 6 s unified window.
    p.history_native = std::max(1, (2 * H) / 5);
    p.future_native = std::max(1, T / 2);
  } else if (name == "nu_like") {
    p.rate_hz = 2.0;
    p.history_native = std::max(1, H / 5);
    p.future_native = std::max(1, T / 5);
  } else {
    throw ConfigError("unknown generator preset \"" + name + "\"");
  }
  return p;
}

void to_json(nlohmann::json& j, const GeneratorProfile& p) {
  j = nlohmann::json{{"tag", p.tag},
                     {"rate_hz", p.rate_hz},
                     {"history_native", p.history_native},
                     {"future_native", p.future_native},
                     {"n_agents_range", p.n_agents},
                     {"n_lanes_range", p.n_lanes},
                     {"target_rate_hz", p.target_rate_hz},
                     {"H", p.H},
                     {"T", p.T},
                     {"P", p.P},
                     {"speed_min", p.speed_min},
                     {"speed_max", p.speed_max},
                     {"max_accel", p.max_accel},
                     {"noise_sigma", p.noise_sigma},
                     {"lane_change_prob", p.lane_change_prob},
                     {"partial_obs_prob", p.partial_obs_prob},
                     {"lane_width", p.lane_width},
                     {"lane_window", p.lane_window}};
}

void from_json(const nlohmann::json& j, GeneratorProfile& p) {
  GeneratorProfile d = p;
  if (j.contains("preset")) {
    d = preset_profile(j.at("preset").get<std::string>(), j.value("H", d.H), j.value("T", d.T), j.value("P", d.P));
  }
  d.tag = j.value("tag", d.tag);
  d.rate_hz = j.value("rate_hz", d.rate_hz);
  d.history_native = j.value("history_native", d.history_native);
  d.future_native = j.value("future_native", d.future_native);
  d.n_agents = j.value("n_agents_range", d.n_agents);
  d.n_lanes = j.value("n_lanes_range", d.n_lanes);
  d.target_rate_hz = j.value("target_rate_hz", d.target_rate_hz);
  d.H = j.value("H", d.H);
  d.T = j.value("T", d.T);
  d.P = j.value("P", d.P);
  d.speed_min = j.value("speed_min", d.speed_min);
  d.speed_max = j.value("speed_max", d.speed_max);
  d.max_accel = j.value("max_accel", d.max_accel);
  d.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  d.lane_change_prob = j.value("lane_change_prob", d.lane_change_prob);
  d.partial_obs_prob = j.value("partial_obs_prob", d.partial_obs_prob);
  d.lane_width = j.value("lane_width", d.lane_width);
  d.lane_window = j.value("lane_window", d.lane_window);
  p = d;
}

// ---------------------------------------------------------------------------

std::size_t MaskPlan::masked_lane_count() const {
  return static_cast<std::size_t>(std::count(lane_masked.begin(), lane_masked.end(), std::uint8_t{1}));
}

MaskPlan complementary_mask(const Scene& scene, double history_mask_prob, double lane_mask_ratio, std::mt19937_64& rng) {
  if (history_mask_prob < 0 || history_mask_prob > 1 || lane_mask_ratio < 0 || lane_mask_ratio > 1) {
    throw ConfigError("complementary_mask: ratios must lie in [0, 1]");
  }
  MaskPlan plan;
  std::bernoulli_distribution flip(history_mask_prob);
  for (std::size_t i = 0; i < scene.agents.size(); ++i) plan.history_masked.push_back(flip(rng) ? 1 : 0);

  const std::size_t M = scene.lanes.size();
  const auto k = static_cast<std::size_t>(std::llround(lane_mask_ratio * static_cast<double>(M)));
  std::vector<std::size_t> order(M);
  for (std::size_t i = 0; i < M; ++i) order[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, M - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  plan.lane_masked.assign(M, 0);
  for (std::size_t i = 0; i < k; ++i) plan.lane_masked[order[i]] = 1;
  return plan;
}

// ---------------------------------------------------------------------------
// FPSC container: "FPSC", version byte, then records of (u32 length, payload).

namespace {

constexpr std::uint8_t kSceneVersion = 1;

void write_points(ByteWriter& w, const std::vector<Point2>& pts, const std::vector<std::uint8_t>& valid) {
  for (const auto& p : pts) {
    w.f32(p.x);
    w.f32(p.y);
  }
  for (auto v : valid) w.u8(v);
}

void read_points(ByteReader& r, std::uint32_t n, std::vector<Point2>& pts, std::vector<std::uint8_t>& valid) {
  pts.resize(n);
  valid.resize(n);
  for (auto& p : pts) {
    p.x = r.f32();
    p.y = r.f32();
  }
  for (auto& v : valid) v = r.u8();
}

}  // namespace

void write_scenes(const std::string& path, const std::vector<Scene>& scenes) {
  ByteWriter w;
  w.magic("FPSC");
  w.u8(kSceneVersion);
  for (const Scene& s : scenes) {
    ByteWriter rec;
    const auto H = static_cast<std::uint32_t>(s.agents.empty() ? 0 : s.agents[0].history.size());
    const auto T = static_cast<std::uint32_t>(s.agents.empty() ? 0 : s.agents[0].future.size());
    const auto P = static_cast<std::uint32_t>(s.lanes.empty() ? 0 : s.lanes[0].points.size());
    rec.u64(s.id);
    rec.str(s.dataset_tag);
    rec.f64(s.sample_rate_hz);
    rec.u32(H);
    rec.u32(T);
    rec.u32(P);
    rec.u32(static_cast<std::uint32_t>(s.agents.size()));
    rec.u32(static_cast<std::uint32_t>(s.lanes.size()));
    for (const auto& a : s.agents) {
      rec.i32(a.category);
      write_points(rec, a.history, a.history_valid);
      write_points(rec, a.future, a.future_valid);
    }
    for (const auto& l : s.lanes) {
      rec.i32(l.category);
      write_points(rec, l.points, l.point_valid);
    }
    w.u32(static_cast<std::uint32_t>(rec.size()));
    w.bytes(rec.data().data(), rec.size());
  }
  write_file(path, w.data());
}

std::vector<Scene> read_scenes(const std::string& path) {
  const auto bytes = read_file(path);
  ByteReader r(bytes, path);
  r.expect_magic("FPSC");
  const std::uint8_t version = r.u8();
  if (version != kSceneVersion) throw DataError(path + ": unsupported scene file version " + std::to_string(version));
  std::vector<Scene> scenes;
  while (!r.done()) {
    ByteReader rec = r.sub(r.u32());
    Scene s;
    s.id = rec.u64();
    s.dataset_tag = rec.str();
    s.sample_rate_hz = rec.f64();
    const std::uint32_t H = rec.u32(), T = rec.u32(), P = rec.u32();
    const std::uint32_t na = rec.u32(), nl = rec.u32();
    if (na > 100000 || nl > 100000) throw DataError(path + ": implausible agent/lane counts");
    s.agents.resize(na);
    for (auto& a : s.agents) {
      a.category = rec.i32();
      read_points(rec, H, a.history, a.history_valid);
      read_points(rec, T, a.future, a.future_valid);
    }
    s.lanes.resize(nl);
    for (auto& l : s.lanes) {
      l.category = rec.i32();
      read_points(rec, P, l.points, l.point_valid);
    }
    if (!rec.done()) throw DataError(path + ": trailing bytes in scene record");
    scenes.push_back(std::move(s));
  }
  return scenes;
}

}  // namespace fpeft
