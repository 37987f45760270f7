#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "anchorpose/anchors.hpp"
#include "anchorpose/losses.hpp"
#include "anchorpose/skeleton.hpp"
#include "anchorpose/synthdata.hpp"
#include "anchorpose/tensors.hpp"

namespace anchorpose {

/// Anything that turns a scene into prediction tensors and can expose its
/// trainable parameters as one flat block. Implementations must be
/// deterministic given (parameters, input) and produce shapes matching the
/// grid and skeleton they were configured with.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual PredictionTensors forward(const SceneSample& sample) = 0;
  /// Accumulates d(loss)/d(parameters) into grads() for the given sample,
  /// from the loss derivatives with respect to the predictions.
  virtual void backward(const SceneSample& sample, const LossGradients& loss_grads) = 0;
  virtual std::span<double> params() = 0;
  virtual std::span<double> grads() = 0;
  virtual void zero_grads() = 0;
  virtual std::string type() const = 0;
};

/// Reference predictor: one free parameter per output element per training
/// scene — a pure lookup table, so d(output)/d(parameter) is exactly 1 and
/// the optimization exercises the losses with no model in the way.
class DirectPredictor final : public Predictor {
 public:
  DirectPredictor(AnchorGrid grid, int n_joints, std::vector<int64_t> image_ids);

  PredictionTensors forward(const SceneSample& sample) override;
  void backward(const SceneSample& sample, const LossGradients& loss_grads) override;
  std::span<double> params() override { return params_; }
  std::span<double> grads() override { return grads_; }
  void zero_grads() override;
  std::string type() const override { return "direct"; }

  const std::vector<int64_t>& image_ids() const { return ids_; }
  const AnchorGrid& grid() const { return grid_; }
  int n_joints() const { return n_joints_; }

 private:
  size_t scene_offset(int64_t image_id) const;

  AnchorGrid grid_;
  int n_joints_ = 0;
  std::vector<int64_t> ids_;
  std::unordered_map<int64_t, size_t> index_;
  size_t per_scene_ = 0;
  std::vector<double> params_;
  std::vector<double> grads_;
};

/// SGD-with-momentum state plus the polynomial learning-rate schedule
/// lr(t) = lr0 * (1 - t/total_steps)^power.
struct OptimizerState {
  double lr0 = 0.005;
  int64_t total_steps = 5000;
  double power = 0.9;
  double momentum = 0.9;
  std::vector<double> velocity;  // sized to the parameters on first use
  int64_t step = 0;
};

/// The schedule value at step t. Throws std::invalid_argument outside
/// [0, total_steps].
double lr_at(const OptimizerState& state, int64_t t);

/// One momentum update on a parameter slice: v <- momentum*v + g;
/// p <- p - lr*v. All three spans must have equal length.
void sgd_step(std::span<double> params, std::span<const double> grads,
              std::span<double> velocity, double lr, double momentum);

/// Whole-state convenience form: uses lr_at(state, state.step), the full
/// velocity buffer (allocated on first use), and increments the counter.
void sgd_step(std::span<double> params, std::span<const double> grads, OptimizerState& state);

/// Everything a training run needs, readable from a key = value file.
struct TrainConfig {
  std::string dataset_path;
  std::string anchors_path;  // empty: cluster priors from the dataset boxes
  int n_anchors = 10;
  double stride = 8.0;
  int grid_height = 0;  // 0: ceil(camera frame / stride) of the first sample
  int grid_width = 0;
  int64_t total_steps = 5000;
  double lr0 = 0.005;
  double momentum = 0.9;
  double poly_power = 0.9;
  int batch_size = 1;
  uint64_t seed = 0;
  int64_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::string checkpoint_path;   // empty: no checkpoint file is written
  std::string history_path;      // empty: no history file is written
  bool augment_enabled = false;
  double augment_scale_min = 0.8;
  double augment_scale_max = 1.2;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Parses a key = value file ('#' lines are comments). Unknown keys and
/// unparsable values throw std::invalid_argument; missing file throws
/// IoError.
TrainConfig parse_train_config(const std::string& path);

/// Applies one key = value assignment (the config-file vocabulary) to a
/// config; used both by the parser and by CLI overrides.
void set_config_key(TrainConfig& config, const std::string& key, const std::string& value);

/// One training step's log line.
struct StepRecord {
  int64_t step = 0;
  double lr = 0.0;
  double total = 0.0;
  double cls = 0.0;
  double loc = 0.0;
  double pose2d = 0.0;
  double pose3d = 0.0;
  double raw_cls = 0.0;
  double raw_loc = 0.0;
  double raw_pose2d = 0.0;
  double raw_pose3d = 0.0;
  double n_positive = 0.0;  // batch mean
  double s_min = 0.0;       // smallest log-weight after the update
};

/// History files are JSONL, one StepRecord per line.
void save_history(const std::vector<StepRecord>& history, const std::string& path);
std::vector<StepRecord> load_history(const std::string& path);

/// Complete serialized training state: restoring it and continuing yields
/// the same bytes as a run that never stopped.
struct Checkpoint {
  int version = 1;
  TrainConfig config;
  AnchorGrid grid;
  Skeleton skeleton;
  std::string predictor_type = "direct";
  std::vector<int64_t> image_ids;
  std::vector<double> predictor_params;
  LossWeights weights;
  OptimizerState optimizer;
};

std::string checkpoint_to_json(const Checkpoint& checkpoint);
Checkpoint checkpoint_from_json(const std::string& text);
void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Rebuilds the predictor described by a checkpoint (parameters included).
std::unique_ptr<Predictor> make_predictor(const Checkpoint& checkpoint);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepRecord> history;
};

/// Runs the training loop: cycles deterministically through the dataset,
/// evaluates the weighted loss and its gradients, and updates the predictor
/// parameters and the loss weights jointly with momentum SGD under the
/// polynomial schedule. After each step the log-weights are projected into
/// [-kWeightLogClamp, kWeightLogClamp], which bounds every effective loss
/// weight (see the constant's comment). Pass a checkpoint to resume: the
/// loop continues
/// from its optimizer step with its parameters, bit-identical to a run that
/// never stopped. stop_after_steps (when >= 0) interrupts the run once the
/// optimizer step reaches it, leaving a resumable checkpoint. A non-finite
/// loss aborts with a NumericError naming the offending term.
/// Checkpoint/history files are written when their paths are set.
TrainResult train(const TrainConfig& config, const Checkpoint* resume = nullptr,
                  int64_t stop_after_steps = -1);

}  // namespace anchorpose
