#pragma once

#include <optional>

#include "fpeft/backbone.hpp"

namespace fpeft::inline FPEFT_PRECISION_NS {

/// Differentiable forecast for every agent of one scene, in each agent's
/// frame (offsets from its reference point).
struct ForecastVars {
  Var traj;    // prompt path: [K, N, 2T]; MLP head: [N, K*2T]
  Var logits;  // prompt path: [K, N];     MLP head: [N, K]
  bool mode_major = true;
  int N = 0, K = 0, T = 0;
  std::vector<Point2> refs;

  Var agent_traj(int agent) const;    // [K, 2T]
  Var agent_logits(int agent) const;  // [K]
};

/// Plain forecast in scene coordinates.
struct ForecastOutput {
  std::uint64_t scene_id = 0;
  int N = 0, K = 0, T = 0;
  std::vector<float> traj;  // [N][K][T][2], metres
  std::vector<float> conf;  // [N][K], rows sum to 1

  float x(int n, int k, int t) const { return traj[static_cast<std::size_t>(((n * K + k) * T + t) * 2)]; }
  float y(int n, int k, int t) const { return traj[static_cast<std::size_t>(((n * K + k) * T + t) * 2 + 1)]; }
  float p(int n, int k) const { return conf[static_cast<std::size_t>(n * K + k)]; }
};

// Encoder with CEPs, K decoder passes with MCP slice k, future head per mode,
// confidence from head.conf on each decoded query with softmax over modes.
// Without "peft.mcp" one decoder pass is shared by all K modes; without
// "head.conf" the confidence logits are zero.
ForecastVars peft_forward(Binder& b, const ModelConfig& cfg, const Scene& scene);

// Encoder over histories and lanes, then the MLP decoder on each agent token.
ForecastVars baseline_forward(Binder& b, const ModelConfig& cfg, const Scene& scene);

// Dispatches on whether the store carries the MLP decoder.
ForecastVars forecast_forward(Binder& b, const ModelConfig& cfg, const Scene& scene);

ForecastOutput to_output(const ForecastVars& f, std::uint64_t scene_id);

struct FinetuneLossParts {
  int best_mode = -1;
  double regression = 0, classification = 0;
};

// Winner-takes-all: the mode with lowest mean L2 over valid steps gets the
// Huber regression (averaged over valid coordinates); cross-entropy pushes
// its confidence. Returns nullopt when no step is valid.
std::optional<Var> loss_finetune(Var agent_traj, Var agent_logits, std::span<const Point2> gt_local,
                                 std::span<const std::uint8_t> valid, double huber_delta = 1.0, double ce_weight = 1.0,
                                 FinetuneLossParts* parts = nullptr);

// Target agent (index 0) of one scene.
std::optional<Var> scene_finetune_loss(const ForecastVars& f, const Scene& scene, double huber_delta = 1.0,
                                       double ce_weight = 1.0, FinetuneLossParts* parts = nullptr);

struct MetricsReport {
  double min_ade = 0, min_fde = 0, miss_rate = 0, brier_min_fde = 0;
  std::size_t count = 0;
  int horizon = 0;
};

// Per scene over the target agent, using the valid ground-truth steps among
// the first `horizon` (0: all). ADE averages over those steps and FDE is taken
// at the last of them; scenes without any are skipped and not counted.
// Throws DataError when nothing is left and ConfigError when horizon exceeds T.
MetricsReport compute_metrics(std::span<const ForecastOutput> outs, std::span<const Scene> scenes, int horizon = 0,
                              double miss_threshold = 2.0);

void to_json(nlohmann::json& j, const MetricsReport& m);
bool bit_equal(const MetricsReport& a, const MetricsReport& b);

// "FPPR" prediction dump: u8 version, then per record u64 scene id, u32 N, K,
// T, f32 trajectories, f32 confidences.
void write_predictions(const std::string& path, std::span<const ForecastOutput> outs);
std::vector<ForecastOutput> read_predictions(const std::string& path);

}  // namespace fpeft
