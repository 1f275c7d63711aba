#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fpeft/forecast.hpp"
#include "fpeft/optim.hpp"
#include "fpeft/peft.hpp"

namespace fpeft::inline FPEFT_PRECISION_NS {

// Raised by the freeze audit when a frozen parameter moved.
class FreezeViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  Mode mode = Mode::pretrain;
  int epochs = 30;
  int batch_size = 16;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  double history_mask_prob = 0.5;  // per agent
  double lane_mask_ratio = 0.5;    // fraction of lanes masked per scene
  LossWeights loss_weights;
  double huber_delta = 1.0;
  double ce_weight = 1.0;
  int audit_every = 10;  // steps between freeze audits; 0 disables
  int threads = 0;       // 0: hardware concurrency; FP_THREADS caps either way

  void validate() const;
};

struct DataGenConfig {
  nlohmann::json profile = "av2_like";  // preset name or GeneratorProfile object
  int n_train = 2000;
  int n_val = 200;
  std::uint64_t seed = 0;
};

struct AblationConfig {
  // prompt_length, adapter_rank, cep_depth or components. For components each
  // value is a '+'-joined subset of {cep, mcp, adapters}, or "none".
  std::string axis = "cep_depth";
  nlohmann::json values = nlohmann::json::array();
};

struct RunConfig {
  ModelConfig model;
  PeftConfig peft;
  TrainConfig train;
  std::string train_data;
  std::string val_data;
  std::string pretrained;  // checkpoint the finetuning/eval/ablation commands start from
  int eval_horizon = 0;    // 0: the full prediction
  DataGenConfig data;
  AblationConfig ablation;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
// Parses and validates; any problem is a ConfigError.
RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config(const nlohmann::json& j);

GeneratorProfile data_profile(const RunConfig& cfg);

// Worker count: the configured value (or hardware concurrency), capped by
// the FP_THREADS environment variable.
int worker_threads(int configured);
// Runs fn(i) for i in [0, n) on up to `threads` workers. The first exception
// is rethrown after all workers stop.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

struct TrainCursor {
  std::uint32_t epoch = 0;
  std::uint32_t batch = 0;  // next batch within `epoch`
  double loss_sum = 0;      // scene losses so far in `epoch`
  std::uint64_t loss_count = 0;
};

struct TrainState {
  ParameterStore params;
  AdamState opt;
  TrainCursor cursor;
  std::vector<double> step_loss;   // mean batch loss per optimizer step
  std::vector<double> epoch_loss;  // mean scene loss per finished epoch
};

// Freshly initialised store for pretraining.
TrainState start_pretrain(const RunConfig& cfg);
// Pretrained backbone plus the additions of cfg.train.mode, with its plan applied.
TrainState start_finetune(const RunConfig& cfg, const ParameterStore& pretrained);

struct TrainHooks {
  // Stop once this many optimizer steps were taken in this call (0: run to the end).
  std::uint64_t max_steps = 0;
  std::function<void(const TrainState&, int epoch)> on_epoch;
};

// Continues from state.cursor until cfg.train.epochs are done. The objective
// is L_RE in pretrain mode and the finetune loss otherwise. Per-scene
// gradients are computed in parallel and summed in scene order, so results
// do not depend on the thread count.
void train(const RunConfig& cfg, TrainState& state, std::span<const Scene> scenes, const TrainHooks& hooks = {});

std::mt19937_64 mask_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t scene_id);

// Per-scene objective as used by train(); nullopt when the scene contributes nothing.
std::optional<Var> scene_objective(Binder& b, const RunConfig& cfg, const Scene& scene, std::uint64_t epoch);

// Mean L_RE over scenes with masks drawn from (seed, scene id). Uses only the
// pretraining parameters of `store`.
double eval_recon_loss(const ParameterStore& store, const RunConfig& cfg, std::span<const Scene> scenes,
                       std::uint64_t seed);
// Mean finetune loss over scenes with a valid target future.
double eval_finetune_loss(const ParameterStore& store, const RunConfig& cfg, std::span<const Scene> scenes);

struct EvalResult {
  std::vector<ForecastOutput> outputs;
  MetricsReport report;
};

// Forecasts every scene and scores the first `horizon` steps (0: all).
// Throws ConfigError when the horizon exceeds the model's.
EvalResult run_eval(const ParameterStore& store, const RunConfig& cfg, std::span<const Scene> scenes, int horizon);

// "FPCK": magic, u8 version, run config JSON, parameters (name, trainable,
// tensor), optimizer state, cursor, loss logs, then SHA-256 of all preceding
// bytes.
struct Checkpoint {
  RunConfig config;
  TrainState state;
};

void save_checkpoint(const std::string& path, const RunConfig& cfg, const TrainState& state);
Checkpoint load_checkpoint(const std::string& path);

// Plugin metadata for a finetuned store.
nlohmann::json plugin_meta(const RunConfig& cfg);

struct AblationRow {
  nlohmann::json value;
  std::int64_t trainable = 0;
  double final_loss = 0;
  MetricsReport metrics;
};

// One finetune + eval per value of cfg.ablation.axis, each from `pretrained`.
std::vector<AblationRow> run_ablation(const RunConfig& cfg, const ParameterStore& pretrained,
                                      std::span<const Scene> train_scenes, std::span<const Scene> val_scenes);
RunConfig ablation_cell(const RunConfig& cfg, const nlohmann::json& value);

nlohmann::json ablation_json(const RunConfig& cfg, std::span<const AblationRow> rows);
std::string ablation_csv(std::span<const AblationRow> rows);
// Line plot of one metric ("minADE", "minFDE", "MR", "b-minFDE", "trainable") against the axis.
std::string ablation_svg(const std::string& axis, std::span<const AblationRow> rows, const std::string& metric);

}  // namespace fpeft
