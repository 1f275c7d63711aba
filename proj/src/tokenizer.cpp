#include "fpeft/tokenizer.hpp"

#include <algorithm>
#include <cmath>

namespace fpeft::inline FPEFT_PRECISION_NS {

namespace {

Var lin(Binder& b, Var x, const std::string& prefix) { return linear(x, b(prefix + ".w"), b(prefix + ".b")); }

// Rows of a stride-2, width-3 window with zero padding, flattened tap-major.
std::vector<std::int64_t> conv_index(std::int64_t rows_in, std::int64_t rows_out) {
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(rows_out * 3));
  for (std::int64_t j = 0; j < rows_out; ++j)
    for (std::int64_t t = 0; t < 3; ++t) {
      const std::int64_t src = 2 * j + t - 1;
      idx.push_back(src >= 0 && src < rows_in ? src : -1);
    }
  return idx;
}

std::vector<std::int64_t> upsample_index(std::int64_t rows_fine, std::int64_t rows_coarse) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(rows_fine));
  for (std::int64_t j = 0; j < rows_fine; ++j) idx[static_cast<std::size_t>(j)] = std::min(j / 2, rows_coarse - 1);
  return idx;
}

bool any_valid(std::span<const std::uint8_t> v) {
  for (auto x : v)
    if (x) return true;
  return false;
}

Var rows_of(Tape& tape, std::int64_t n, std::int64_t C) { return tape.constant(Tensor({n, C})); }

Var stack_parts(std::vector<Var>& parts, Tape& tape, std::int64_t C) {
  if (parts.empty()) return rows_of(tape, 0, C);
  if (parts.size() == 1) return parts[0];
  return concat(parts, 0);
}

}  // namespace

Point2 agent_reference(const AgentTrack& a) {
  for (std::size_t i = a.history.size(); i-- > 0;)
    if (a.history_valid[i]) return a.history[i];
  for (std::size_t j = 0; j < a.future.size(); ++j)
    if (a.future_valid[j]) return a.future[j];
  return Point2{};
}

Point2 lane_reference(const LanePolyline& l) {
  double sx = 0, sy = 0;
  int n = 0;
  for (std::size_t i = 0; i < l.points.size(); ++i) {
    if (!l.point_valid[i]) continue;
    sx += l.points[i].x;
    sy += l.points[i].y;
    ++n;
  }
  if (n == 0) throw DataError("lane polyline has no valid points");
  return Point2{static_cast<float>(sx / n), static_cast<float>(sy / n)};
}

Tensor trajectory_features(std::span<const Segment> segments, int S) {
  const auto n = static_cast<std::int64_t>(segments.size());
  Tensor f({n, S, 3});
  for (std::int64_t i = 0; i < n; ++i) {
    const Segment& s = segments[static_cast<std::size_t>(i)];
    if (static_cast<int>(s.points.size()) != S || static_cast<int>(s.valid.size()) != S)
      throw DataError("trajectory segment has " + std::to_string(s.points.size()) + " steps, expected " +
                      std::to_string(S));
    int prev = -1;
    for (int t = 0; t < S; ++t) {
      if (!s.valid[static_cast<std::size_t>(t)]) continue;
      Real* row = f.ptr() + (i * S + t) * 3;
      if (prev >= 0) {
        row[0] = static_cast<Real>(s.points[static_cast<std::size_t>(t)].x - s.points[static_cast<std::size_t>(prev)].x);
        row[1] = static_cast<Real>(s.points[static_cast<std::size_t>(t)].y - s.points[static_cast<std::size_t>(prev)].y);
      }
      row[2] = 1;
      prev = t;
    }
  }
  return f;
}

Var embed_trajectory_features(Binder& b, const std::string& prefix, Var features) {
  std::vector<Var> levels;
  Var x = features;
  for (int i = 0; i < 3; ++i) {
    const std::int64_t n = x.shape()[0], rows = x.shape()[1], width = x.shape()[2];
    const std::int64_t out_rows = (rows + 1) / 2;
    const auto idx = conv_index(rows, out_rows);
    Var win = reshape(gather_rows(x, idx), {n, out_rows, 3 * width});
    x = gelu(lin(b, win, prefix + ".conv" + std::to_string(i)));
    levels.push_back(x);
  }
  Var top = lin(b, levels[2], prefix + ".lat2");
  for (int i = 1; i >= 0; --i) {
    Var lat = lin(b, levels[static_cast<std::size_t>(i)], prefix + ".lat" + std::to_string(i));
    const auto up = upsample_index(lat.shape()[1], top.shape()[1]);
    top = add(lat, gather_rows(top, up));
  }
  return lin(b, mean_rows(top), prefix + ".out");
}

Var embed_trajectories(Binder& b, const std::string& prefix, std::span<const Segment> segments, int S) {
  return embed_trajectory_features(b, prefix, b.tape().constant(trajectory_features(segments, S)));
}

Var embed_lanes(Binder& b, const ModelConfig& cfg, std::span<const LanePolyline* const> lanes) {
  const auto n = static_cast<std::int64_t>(lanes.size());
  const std::int64_t P = cfg.P;
  Tensor in({n, P, 3});
  std::vector<std::uint8_t> keep(static_cast<std::size_t>(n * P), 0);
  for (std::int64_t i = 0; i < n; ++i) {
    const LanePolyline& l = *lanes[static_cast<std::size_t>(i)];
    if (static_cast<std::int64_t>(l.points.size()) != P || static_cast<std::int64_t>(l.point_valid.size()) != P)
      throw DataError("lane has " + std::to_string(l.points.size()) + " points, expected " + std::to_string(P));
    const Point2 c = lane_reference(l);
    for (std::int64_t p = 0; p < P; ++p) {
      if (!l.point_valid[static_cast<std::size_t>(p)]) continue;
      Real* row = in.ptr() + (i * P + p) * 3;
      row[0] = static_cast<Real>((l.points[static_cast<std::size_t>(p)].x - c.x) * cfg.coord_scale);
      row[1] = static_cast<Real>((l.points[static_cast<std::size_t>(p)].y - c.y) * cfg.coord_scale);
      row[2] = 1;
      keep[static_cast<std::size_t>(i * P + p)] = 1;
    }
  }
  Var h = lin(b, gelu(lin(b, b.tape().constant(std::move(in)), "embed.lane.pt1")), "embed.lane.pt2");
  Var pooled = masked_max_rows(h, keep);
  return lin(b, gelu(lin(b, pooled, "embed.lane.out1")), "embed.lane.out2");
}

Var positional_embedding(Binder& b, const ModelConfig& cfg, std::span<const Point2> points) {
  const auto n = static_cast<std::int64_t>(points.size());
  Tensor in({n, 2});
  for (std::int64_t i = 0; i < n; ++i) {
    const Point2& p = points[static_cast<std::size_t>(i)];
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw DataError("non-finite reference point");
    in[2 * i] = static_cast<Real>(p.x * cfg.coord_scale);
    in[2 * i + 1] = static_cast<Real>(p.y * cfg.coord_scale);
  }
  return lin(b, gelu(lin(b, b.tape().constant(std::move(in)), "embed.pe.l1")), "embed.pe.l2");
}

Var semantic_embedding(Binder& b, std::span<const TokenKind> kinds) {
  std::vector<std::int64_t> idx;
  idx.reserve(kinds.size());
  for (auto k : kinds) {
    if (k == TokenKind::prompt) throw ConfigError("prompt tokens carry no semantic embedding");
    idx.push_back(static_cast<std::int64_t>(k));
  }
  return gather_rows(b("embed.semantic"), idx);
}

namespace {

struct VisibleSet {
  std::vector<Segment> hist, fut;
  std::vector<const LanePolyline*> lanes;
  TokenBatch meta;  // tokens filled by assemble()
};

// Embeds the collected elements as [histories; futures; lanes] + PE + semantic.
void assemble(Binder& b, const ModelConfig& cfg, VisibleSet& v) {
  Tape& tape = b.tape();
  std::vector<Var> parts;
  if (!v.hist.empty()) parts.push_back(embed_trajectories(b, "embed.hist", v.hist, cfg.H));
  if (!v.fut.empty()) parts.push_back(embed_trajectories(b, "embed.fut", v.fut, cfg.T));
  if (!v.lanes.empty()) parts.push_back(embed_lanes(b, cfg, v.lanes));
  Var x = stack_parts(parts, tape, cfg.C);
  if (v.meta.size() > 0) {
    x = add(x, positional_embedding(b, cfg, v.meta.positions));
    x = add(x, semantic_embedding(b, v.meta.kinds));
  }
  v.meta.tokens = x;
}

void push_meta(TokenBatch& t, TokenKind k, int index, bool valid, Point2 pos) {
  t.kinds.push_back(k);
  t.index.push_back(index);
  t.valid.push_back(valid ? 1 : 0);
  t.positions.push_back(pos);
}

ReconTarget make_target(TokenKind kind, int index, std::span<const Point2> pts, std::span<const std::uint8_t> valid,
                        Point2 ref) {
  ReconTarget r{kind, index, Tensor({static_cast<std::int64_t>(2 * pts.size())}), {valid.begin(), valid.end()}};
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!valid[i]) continue;
    r.target[static_cast<std::int64_t>(2 * i)] = static_cast<Real>(pts[i].x - ref.x);
    r.target[static_cast<std::int64_t>(2 * i + 1)] = static_cast<Real>(pts[i].y - ref.y);
  }
  return r;
}

Var mask_rows(Binder& b, std::span<const TokenKind> kinds, std::int64_t C) {
  static const char* names[] = {"mask.history", "mask.future", "mask.lane"};
  std::vector<Var> table;
  for (const char* n : names) table.push_back(reshape(b(n), {1, C}));
  std::vector<std::int64_t> idx;
  for (auto k : kinds) idx.push_back(static_cast<std::int64_t>(k));
  return gather_rows(concat(table, 0), idx);
}

}  // namespace

PretrainTokens build_pretrain_tokens(Binder& b, const ModelConfig& cfg, const Scene& scene, const MaskPlan& plan) {
  if (plan.history_masked.size() != scene.agents.size() || plan.lane_masked.size() != scene.lanes.size())
    throw DataError("mask plan does not match scene " + std::to_string(scene.id));
  VisibleSet vh, vf, vl;
  PretrainTokens out;
  TokenBatch& q = out.queries;
  std::vector<Point2> agent_refs;
  for (std::size_t i = 0; i < scene.agents.size(); ++i) {
    const AgentTrack& a = scene.agents[i];
    const Point2 ref = agent_reference(a);
    const int idx = static_cast<int>(i);
    if (plan.history_masked[i]) {
      vf.fut.push_back({a.future, a.future_valid});
      push_meta(vf.meta, TokenKind::future, idx, any_valid(a.future_valid), ref);
      push_meta(q, TokenKind::history, idx, true, ref);
      out.targets.push_back(make_target(TokenKind::history, idx, a.history, a.history_valid, ref));
    } else {
      vh.hist.push_back({a.history, a.history_valid});
      push_meta(vh.meta, TokenKind::history, idx, any_valid(a.history_valid), ref);
      push_meta(q, TokenKind::future, idx, true, ref);
      out.targets.push_back(make_target(TokenKind::future, idx, a.future, a.future_valid, ref));
    }
  }
  for (std::size_t l = 0; l < scene.lanes.size(); ++l) {
    const LanePolyline& lane = scene.lanes[l];
    const Point2 ref = lane_reference(lane);
    const int idx = static_cast<int>(l);
    if (plan.lane_masked[l]) {
      push_meta(q, TokenKind::lane, idx, true, ref);
      out.targets.push_back(make_target(TokenKind::lane, idx, lane.points, lane.point_valid, ref));
    } else {
      vl.lanes.push_back(&lane);
      push_meta(vl.meta, TokenKind::lane, idx, true, ref);
    }
  }
  // One embedding pass over all visible elements, ordered histories, futures, lanes.
  VisibleSet all;
  all.hist = std::move(vh.hist);
  all.fut = std::move(vf.fut);
  all.lanes = std::move(vl.lanes);
  for (const TokenBatch* m : {&vh.meta, &vf.meta, &vl.meta}) {
    all.meta.kinds.insert(all.meta.kinds.end(), m->kinds.begin(), m->kinds.end());
    all.meta.index.insert(all.meta.index.end(), m->index.begin(), m->index.end());
    all.meta.valid.insert(all.meta.valid.end(), m->valid.begin(), m->valid.end());
    all.meta.positions.insert(all.meta.positions.end(), m->positions.begin(), m->positions.end());
  }
  assemble(b, cfg, all);
  out.visible = std::move(all.meta);

  if (q.size() > 0) {
    q.tokens = add(mask_rows(b, q.kinds, cfg.C), positional_embedding(b, cfg, q.positions));
  } else {
    q.tokens = rows_of(b.tape(), 0, cfg.C);
  }
  return out;
}

FinetuneTokens build_finetune_tokens(Binder& b, const ModelConfig& cfg, const Scene& scene) {
  VisibleSet v;
  FinetuneTokens out;
  TokenBatch& q = out.future_queries;
  for (std::size_t i = 0; i < scene.agents.size(); ++i) {
    const AgentTrack& a = scene.agents[i];
    const Point2 ref = agent_reference(a);
    v.hist.push_back({a.history, a.history_valid});
    push_meta(v.meta, TokenKind::history, static_cast<int>(i), any_valid(a.history_valid), ref);
    push_meta(q, TokenKind::future, static_cast<int>(i), true, ref);
  }
  for (std::size_t l = 0; l < scene.lanes.size(); ++l) {
    v.lanes.push_back(&scene.lanes[l]);
    push_meta(v.meta, TokenKind::lane, static_cast<int>(l), true, lane_reference(scene.lanes[l]));
  }
  assemble(b, cfg, v);
  out.encoder_in = std::move(v.meta);
  std::vector<TokenKind> kinds(q.size(), TokenKind::future);
  q.tokens = q.size() > 0 ? add(mask_rows(b, kinds, cfg.C), positional_embedding(b, cfg, q.positions))
                          : rows_of(b.tape(), 0, cfg.C);
  return out;
}

}  // namespace fpeft
