// SPDX-License-Identifier: Apache-2.0
//
// The incremental open-world loop: per-task training, exemplar-replay
// fine-tuning, checkpoints and evaluation.
#pragma once

#include "dprob/data/dataset.hpp"
#include "dprob/eval/metrics.hpp"
#include "dprob/loss/detection_loss.hpp"
#include "dprob/protocol/optimizer.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace dprob {

enum class Phase { train, finetune };

std::string to_string(Phase p);
Phase phase_from_string(const std::string& s);

struct TrainSession {
  int task_id = 1;
  Phase phase = Phase::train;
  int epochs = 20;
  /// Epoch (1-based) from which the learning rate is multiplied by lr_drop_factor.
  int lr_drop_epoch = 15;
  double lr = 2e-4;
  double lr_drop_factor = 0.1;
  int batch_size = 4;
  double grad_clip = 0.1;
  std::uint64_t seed = 0;

  double lr_at(int epoch) const { return epoch >= lr_drop_epoch ? lr * lr_drop_factor : lr; }
  void validate() const;
};

struct Exemplar {
  std::string scene_id;
  Annotation annotation;
};

/// Exemplars per known class, at most k each.
struct ExemplarStore {
  int capacity = 25;
  std::map<int, std::vector<Exemplar>> per_class;

  bool empty() const;
  /// Distinct scene ids in first-seen order (class ascending).
  std::vector<std::string> scene_ids() const;
};

/// Up to k distinct scenes per class drawn uniformly without replacement under
/// `seed`; only classes in `classes` are kept.
ExemplarStore build_exemplar_store(const std::vector<Scene>& scenes, const std::vector<int>& classes, int k,
                                   std::uint64_t seed);

/// Detector, Gaussian statistics and optimizer state for one run.
class OwodModel {
 public:
  OwodModel(ModelConfig model, TdqiConfig tdqi, EtopConfig etop, CostWeights weights, AdamWConfig optimizer = {},
            bool with_tdqi = true);

  Detector<float>& detector() { return detector_; }
  const Detector<float>& detector() const { return detector_; }
  GaussianStats<float>& stats() { return stats_; }
  const GaussianStats<float>& stats() const { return stats_; }
  AdamW& optimizer() { return optimizer_; }
  const AdamW& optimizer() const { return optimizer_; }
  const CostWeights& weights() const { return weights_; }

  /// All N queries of one image under a task view.
  std::vector<Detection> detect(const Matrix<float>& image, const TaskView& view);

  struct StepResult {
    double mean_loss = 0;
    LossBreakdown mean_breakdown;
    double grad_norm = 0;
  };
  /// One optimizer step over a batch: accumulated gradients averaged over the
  /// batch, clipped, AdamW update, then the Gaussian update from the batch's
  /// matched stats-layer embeddings.
  StepResult train_step(const std::vector<const Scene*>& batch, const TaskView& view, double lr, double grad_clip);

 private:
  Detector<float> detector_;
  GaussianStats<float> stats_;
  AdamW optimizer_;
  CostWeights weights_;
};

GroundTruth ground_truth_for(const Scene& scene, const TaskView& view);

struct CheckpointMeta {
  std::string config_hash;
  std::uint64_t seed = 0;
  int task_id = 0;
  Phase phase = Phase::train;
  int epoch = 0;
};

void save_checkpoint(const std::filesystem::path& dir, const OwodModel& model, const CheckpointMeta& meta);
/// Loads parameters, statistics and optimizer state. Throws std::runtime_error
/// naming the field when `expected_hash` is given and differs.
CheckpointMeta load_checkpoint(const std::filesystem::path& dir, OwodModel& model,
                               const std::optional<std::string>& expected_hash = std::nullopt);
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& dir);

struct EpochLog {
  int task_id = 0;
  Phase phase = Phase::train;
  int epoch = 0;
  double lr = 0;
  double mean_loss = 0;
  std::int64_t steps = 0;
};

struct RunOptions {
  std::filesystem::path out_dir;
  std::string config_hash;
  std::uint64_t master_seed = 0;
  /// Optional per-step loss CSV sink.
  std::ostream* loss_csv = nullptr;
  std::function<void(const EpochLog&)> on_epoch;
  bool write_checkpoints = true;
};

/// Trains for one session, starting after `start_epoch` (0 = fresh).
std::vector<EpochLog> run_session(OwodModel& model, const std::vector<const Scene*>& scenes, const TaskView& view,
                                  const TrainSession& session, const RunOptions& options, int start_epoch = 0);

/// Task training on the task's train split; classes outside K^t are masked.
std::vector<EpochLog> run_task(OwodModel& model, const TaskSpec& task, const TrainSession& session,
                               const RunOptions& options, int start_epoch = 0);

/// Scenes for fine-tuning: every exemplar scene, annotated with all classes in
/// `known` (from the scene's full ground truth). An empty store falls back to
/// the current task's training scenes.
std::vector<Scene> finetune_scenes(const Dataset& dataset, const ExemplarStore& store, const TaskSpec& task);

std::vector<EpochLog> finetune(OwodModel& model, const Dataset& dataset, const ExemplarStore& store,
                               const TaskSpec& task, const TrainSession& session, const RunOptions& options,
                               int start_epoch = 0);

/// Runs detection over `scenes` and reports under the task's view.
EvalReport evaluate(OwodModel& model, const TaskSpec& task, const std::vector<Scene>& scenes,
                    const EvalOptions& options, std::vector<std::vector<Detection>>* detections = nullptr);

}  // namespace dprob
