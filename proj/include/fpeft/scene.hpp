#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fpeft/tensor.hpp"
#include "json.hpp"

namespace fpeft::inline FPEFT_PRECISION_NS {

// Scene coordinates are stored as f32 in every build; they are data, not
// trainable values.
struct Point2 {
  float x = 0;
  float y = 0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

struct AgentTrack {
  std::vector<Point2> history;  // H slots, present step last
  std::vector<Point2> future;   // T slots
  std::vector<std::uint8_t> history_valid;
  std::vector<std::uint8_t> future_valid;
  int category = 0;
  friend bool operator==(const AgentTrack&, const AgentTrack&) = default;
};

struct LanePolyline {
  std::vector<Point2> points;  // P points
  std::vector<std::uint8_t> point_valid;
  int category = 0;
  friend bool operator==(const LanePolyline&, const LanePolyline&) = default;
};

/// One forecasting sample in the target-agent frame at the present step.
/// agents[0] is the target.
struct Scene {
  std::uint64_t id = 0;
  std::vector<AgentTrack> agents;
  std::vector<LanePolyline> lanes;
  std::string dataset_tag;
  double sample_rate_hz = 10.0;
  friend bool operator==(const Scene&, const Scene&) = default;
};

// Throws DataError when window lengths, validity conventions or counts are off.
void validate_scene(const Scene& scene, int H, int T, int P);

// ---------------------------------------------------------------------------
// Rate/horizon standardization by padding-with-masking.

struct RawSample {
  double t = 0;  // seconds relative to the present step (t <= 0 is history)
  Point2 p;
};

struct RawTrack {
  std::vector<RawSample> samples;  // strictly increasing timestamps
  double native_rate_hz = 10.0;
  int native_history_len = 0;  // native steps up to and including the present
  int native_future_len = 0;
};

struct StandardizedTrack {
  std::vector<Point2> history, future;
  std::vector<std::uint8_t> history_valid, future_valid;
};

/// Places native samples on the unified 1/target_rate grid anchored at the
/// present slot (history index H-1). Slots without a sample stay invalid at
/// (0,0); nothing is interpolated. Samples outside either the native window or
/// the unified window are dropped.
StandardizedTrack standardize(const RawTrack& raw, double target_rate_hz, int H, int T);

// Inverse view of a standardized track: one sample per valid slot.
RawTrack to_raw(const StandardizedTrack& track, double rate_hz);

// ---------------------------------------------------------------------------
// Synthetic scenes.

struct GeneratorProfile {
  std::string tag = "av2_like";
  double rate_hz = 10.0;       // native sampling rate
  int history_native = 10;     // native history steps (incl. present)
  int future_native = 12;      // native future steps
  std::array<int, 2> n_agents{2, 5};
  std::array<int, 2> n_lanes{2, 4};
  // Unified window the scenes are standardized into.
  double target_rate_hz = 10.0;
  int H = 10;
  int T = 12;
  int P = 20;
  double speed_min = 4.0;
  double speed_max = 12.0;
  double max_accel = 1.0;
  double noise_sigma = 0.05;
  double lane_change_prob = 0.2;
  double partial_obs_prob = 0.3;
  double lane_width = 3.5;
  double lane_window = 40.0;  // arc length covered by one polyline token

  // Upper bound on the noise-free speed of any generated agent, including
  // curvature and lane-change lateral motion.
  double max_path_speed() const;
};

void to_json(nlohmann::json& j, const GeneratorProfile& p);
void from_json(const nlohmann::json& j, GeneratorProfile& p);

// Named presets: "av2_like", "av1_like", "nu_like".
GeneratorProfile preset_profile(const std::string& name, int H, int T, int P);

// Scene i is generated from an engine seeded with (seed ^ i).
std::vector<Scene> generate_synthetic(std::uint64_t seed, int n_scenes, const GeneratorProfile& profile);
Scene generate_scene(std::uint64_t seed, std::uint64_t index, const GeneratorProfile& profile);

// ---------------------------------------------------------------------------
// Complementary masking for pretraining.

struct MaskPlan {
  // Per agent: true masks the history (future visible), false masks the future.
  std::vector<std::uint8_t> history_masked;
  std::vector<std::uint8_t> lane_masked;

  bool future_masked(std::size_t agent) const { return !history_masked[agent]; }
  std::size_t masked_lane_count() const;
};

/// Each agent flips a coin with P(history masked) = history_mask_prob; exactly
/// round(lane_mask_ratio * M) lanes are masked, chosen uniformly.
MaskPlan complementary_mask(const Scene& scene, double history_mask_prob, double lane_mask_ratio,
                            std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// "FPSC" container.

void write_scenes(const std::string& path, const std::vector<Scene>& scenes);
std::vector<Scene> read_scenes(const std::string& path);

}  // namespace fpeft
