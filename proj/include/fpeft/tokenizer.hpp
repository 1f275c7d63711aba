#pragma once

#include <span>
#include <vector>

#include "fpeft/model.hpp"
#include "fpeft/scene.hpp"

namespace fpeft::inline FPEFT_PRECISION_NS {

enum class TokenKind : std::uint8_t { history = 0, future = 1, lane = 2, prompt = 3 };

/// Token rows plus per-row metadata. For mask queries `kinds` names the kind
/// of the masked element, which is what the reconstruction heads route on.
struct TokenBatch {
  Var tokens;  // [n, C]
  std::vector<TokenKind> kinds;
  std::vector<int> index;  // agent or lane index
  std::vector<std::uint8_t> valid;
  std::vector<Point2> positions;

  std::size_t size() const { return kinds.size(); }
};

struct Segment {
  std::span<const Point2> points;
  std::span<const std::uint8_t> valid;
};

// Last observed history point, else first observed future point, else origin.
Point2 agent_reference(const AgentTrack& a);
// Mean of valid points. Throws DataError when there are none.
Point2 lane_reference(const LanePolyline& l);

// Per-step (dx, dy, valid) where dx, dy is the offset from the previous
// valid step of the same segment; zero for the first valid step and for
// invalid steps.
Tensor trajectory_features(std::span<const Segment> segments, int S);

// Pyramid embedder over a batch of segments: [n] segments -> [n, C].
// `prefix` is "embed.hist" or "embed.fut".
Var embed_trajectories(Binder& b, const std::string& prefix, std::span<const Segment> segments, int S);
Var embed_trajectory_features(Binder& b, const std::string& prefix, Var features);  // [n, S, 3] -> [n, C]

// Point-wise MLP, masked max-pool, MLP: [n] polylines -> [n, C].
Var embed_lanes(Binder& b, const ModelConfig& cfg, std::span<const LanePolyline* const> lanes);

// Two-layer MLP of coord_scale * (x, y): [n] points -> [n, C].
Var positional_embedding(Binder& b, const ModelConfig& cfg, std::span<const Point2> points);

Var semantic_embedding(Binder& b, std::span<const TokenKind> kinds);

struct ReconTarget {
  TokenKind kind;
  int index;
  Tensor target;                    // [2S], element minus its reference point
  std::vector<std::uint8_t> valid;  // [S]
};

struct PretrainTokens {
  TokenBatch visible;
  TokenBatch queries;
  std::vector<ReconTarget> targets;  // aligned with queries
};

PretrainTokens build_pretrain_tokens(Binder& b, const ModelConfig& cfg, const Scene& scene, const MaskPlan& plan);

struct FinetuneTokens {
  TokenBatch encoder_in;      // histories then lanes
  TokenBatch future_queries;  // one per agent
};

FinetuneTokens build_finetune_tokens(Binder& b, const ModelConfig& cfg, const Scene& scene);

}  // namespace fpeft
