#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "kinflow/checkpoint.hpp"
#include "kinflow/dataio.hpp"
#include "kinflow/kinetics.hpp"
#include "kinflow/losses.hpp"
#include "kinflow/metrics.hpp"
#include "kinflow/model.hpp"

namespace kinflow::trainer {

enum class Phase { ail, kgl };
const char* to_string(Phase p);
Phase phase_from_string(const std::string& s);  // ConfigError

struct ScheduleConfig {
  bool one_cycle = true;  // false: constant lr_max
  double warmup_fraction = 0.05;
  double start_fraction = 0.04;  // lr at step 0 = lr_max * start_fraction
  double final_fraction = 0.01;  // lr at the last step = lr_max * final_fraction
};

struct TrainConfig {
  Phase phase = Phase::ail;
  int64_t steps = 2000;
  int64_t batch = 2;
  double lr_max = 4e-4;
  double weight_decay = 1e-4;
  ScheduleConfig schedule;
  dataio::CropSize crop;  // 0 x 0 = full frames
  RngSeed seed;
  int64_t eval_every = 0;  // 0 = no periodic evaluation
  std::vector<std::filesystem::path> train_manifests;
  std::vector<std::filesystem::path> eval_manifests;
  losses::LossConfig loss_cfg;
  kinetics::KineticsConfig kinetics_cfg;
  model::ModelConfig model;
  double clip_norm = 1.0;
  bool augment = false;
  int64_t checkpoint_every = 0;  // 0 = only at the end of a run
};

/// Parses the JSON config document. Keys mirror TrainConfig field names;
/// phase, steps, batch, lr_max, weight_decay, seed and train_manifests are
/// required. Missing, unknown or mistyped keys raise ConfigError naming the
/// key. Relative manifest paths resolve against `base_dir`.
TrainConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir = {});
TrainConfig load_config(const std::filesystem::path& path);
std::string to_json(const TrainConfig& config);
void validate(const TrainConfig& config);

/// Linear warmup from lr_max * start_fraction to lr_max, then linear decay to
/// lr_max * final_fraction at the last step. RangeError unless 0 <= step < steps.
double one_cycle_lr(int64_t step, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Losses over a batch

struct Batch {
  Tensor i0, i1;  // [B, C, H, W]
  Tensor flow;    // [B, 2, H, W], undefined without gt
  Tensor valid;   // [B, 1, H, W], undefined when every gt is dense
  Tensor occ;     // [B, 1, H, W], undefined unless every record has gt_occ
};

/// EmptyValidSet when a record's mask selects no pixel.
Batch collate(const std::vector<dataio::SampleRecord>& records);

struct AilTerms {
  Tensor total, l1, perceptual, occ;
  Tensor final_l1;  // L1 of the last prediction alone, detached
};

/// L_AIL for one batch: forward and backward flows from one attention pass,
/// sequence L1 on the forward flow, and WarpNet's reconstruction of I0 from I1
/// for the perceptual and occlusion terms.
AilTerms ail_loss(model::FlowModel& model, losses::PerceptualExtractor& extractor, const Batch& batch,
                  const losses::LossConfig& cfg);

// ---------------------------------------------------------------------------
// Evaluation

using Predictor = std::function<FlowField(const dataio::SampleRecord&)>;

Predictor model_predictor(model::FlowModel model);
Predictor oracle_predictor();  // returns the record's own gt
Predictor zero_predictor();

/// Metrics pooled over every valid pixel of every record (final prediction
/// only). PreconditionError when a record carries no gt_flow.
metrics::MetricReport evaluate(const Predictor& predictor, const std::vector<dataio::SampleRecord>& records);

// ---------------------------------------------------------------------------
// Training loop

struct StepRecord {
  Phase phase = Phase::ail;
  int64_t step = 0;
  double lr = 0.0;
  std::optional<double> alpha;
  std::vector<std::pair<std::string, double>> losses;
  double wall_ms = 0.0;
  std::optional<metrics::MetricReport> eval;

  double loss(const std::string& name) const;  // std::out_of_range if absent
};

/// One JSON object per line.
std::string to_json_line(const StepRecord& record);

class Trainer {
 public:
  /// Seeds torch, builds the model and optimizer. KGL uses the frames of
  /// `train` only; `eval` needs ground truth.
  Trainer(TrainConfig config, std::vector<dataio::SampleRecord> train, std::vector<dataio::SampleRecord> eval = {});

  /// Model weights only, e.g. an AIL checkpoint to start KGL from.
  void load_weights(const checkpoint::Checkpoint& ckpt);
  /// Full state of an interrupted run of the same phase and config.
  void resume(const checkpoint::Checkpoint& ckpt);
  checkpoint::Checkpoint save_state() const;

  StepRecord step();
  bool done() const noexcept { return step_ >= config_.steps; }
  int64_t step_index() const noexcept { return step_; }

  std::optional<metrics::MetricReport> evaluate_held_out();

  model::FlowModel& model() noexcept { return model_; }
  const TrainConfig& config() const noexcept { return config_; }

 private:
  StepRecord ail_step(const std::vector<dataio::SampleRecord>& records);
  StepRecord kgl_step(const std::vector<dataio::SampleRecord>& records);
  std::vector<Tensor> trainable() const;

  TrainConfig config_;
  std::vector<dataio::SampleRecord> train_, eval_;
  model::FlowModel model_{nullptr};
  losses::PerceptualExtractor extractor_{nullptr};
  std::unique_ptr<torch::optim::AdamW> optimizer_;
  std::unique_ptr<dataio::DatasetIterator> iterator_;
  std::mt19937_64 rng_;
  int64_t step_ = 0;
};

struct RunOptions {
  std::filesystem::path log_path;         // appended to; empty = no log file
  std::filesystem::path checkpoint_path;  // empty = no checkpoints
  int64_t stop_after = -1;                // stop once this many steps are done (for tests)
  std::function<void(const StepRecord&)> on_step;
};

/// Steps until done (or stop_after), logging every step and checkpointing
/// every checkpoint_every steps and at the end.
void run(Trainer& trainer, const RunOptions& options);

/// Rebuilds the model described by a checkpoint's config echo and loads its
/// weights.
model::FlowModel model_from_checkpoint(const checkpoint::Checkpoint& ckpt);

/// Loads every manifest in order.
std::vector<dataio::SampleRecord> load_manifests(const std::vector<std::filesystem::path>& paths);

}  // namespace kinflow::trainer
