#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "valerian/dataset.hpp"
#include "valerian/evaluation.hpp"
#include "valerian/losses.hpp"
#include "valerian/network.hpp"
#include "valerian/optim.hpp"
#include "valerian/transforms.hpp"

namespace valerian {

enum class Method { Valerian, Bmtl, Stl, Si, SiElr };

std::string method_name(Method m);
Method parse_method(const std::string& name);
bool method_uses_shots(Method m);

enum class UpdateSchedule { PerBatch, PerEpoch };

struct PretrainConfig {
  int epochs = 30;
  int batch_size = 64;
  OptimizerConfig optimizer = OptimizerConfig::adam(1e-3);
  TransformParams transforms;
  double validation_fraction = 0.1;
  int max_windows = 0;  // cap on source windows used per epoch (0 = all)

  void validate() const;
};

enum class Phase { Heads, Extractor };

/// Called with the model just before and just after each alternating phase.
using PhaseObserver = std::function<void(Phase phase, bool after, int epoch, const Model<float>& m)>;

struct TrainConfig {
  OptimizerConfig optimizer = OptimizerConfig::adam(1e-4);
  int batch_size = 64;
  int epochs = 300;      // multi-task trainers
  int si_epochs = 200;   // pooled trainers
  int stl_iterations = 500;
  OptimizerConfig stl_optimizer = OptimizerConfig::rmsprop(1e-3);
  LossWeights weights;
  MixupConfig mixup;
  std::uint64_t seed = 0;
  bool use_pretrain = true;
  bool use_elr = true;
  bool use_mixup = true;
  UpdateSchedule updates = UpdateSchedule::PerBatch;
  PretrainConfig pretrain;
  double validation_fraction = 0.1;  // clean hold-out used only for SI-ELR-best selection
  int checkpoint_every = 25;         // epochs; 0 disables
  std::filesystem::path checkpoint_dir;  // empty disables periodic checkpoints
  int report_every = 1;              // epochs between monitored metrics; the last epoch is always reported
  bool verbose = false;
  PhaseObserver observer;

  /// BMTL: the multi-task trainer with pretraining, ELR and MixUp all off.
  static TrainConfig bmtl(TrainConfig base);
  void validate() const;
};

/// Holds the clean labels and flip masks of a source dataset for reporting;
/// trainers only read observed labels from the dataset itself.
class Monitor {
 public:
  Monitor() = default;
  explicit Monitor(const MultiSubjectDataset& source);

  bool has_clean() const { return has_clean_; }
  bool has_masks() const { return has_masks_; }
  std::size_t subject_count() const { return clean_.size(); }
  const std::vector<int>& clean(std::size_t domain) const { return clean_.at(domain); }
  const std::vector<int>& observed(std::size_t domain) const { return observed_.at(domain); }
  const std::vector<bool>& flipped(std::size_t domain) const { return flipped_.at(domain); }

 private:
  std::vector<std::vector<int>> clean_, observed_;
  std::vector<std::vector<bool>> flipped_;
  bool has_clean_ = false;
  bool has_masks_ = false;
};

struct EpochRecord {
  int epoch = 0;
  std::vector<double> task_loss;  // mean head objective per subject (or the single pooled head)
  double extractor_loss = 0.0;    // mean phase-B objective; 0 for single-head trainers
  bool monitored = false;
  double noisy_accuracy = 0.0;    // predictions vs observed labels
  std::optional<double> clean_accuracy;
  std::optional<MemorizationBreakdown> memorization;
  std::optional<double> validation_accuracy;
  double seconds = 0.0;
};

struct TrainReport {
  std::string method;
  std::vector<EpochRecord> epochs;
  double wall_seconds = 0.0;
  std::filesystem::path checkpoint;
  std::optional<int> best_epoch;  // clean-validation-best epoch (SI-ELR-best)
  std::optional<double> best_validation_accuracy;
  std::vector<double> pretext_auc;
  bool degenerate = false;

  void write_csv(const std::filesystem::path& path) const;
  std::string summary_json() const;
};

struct TrainResult {
  Model<float> model;
  TrainReport report;
  std::optional<EnsembleState> ensemble;
  std::optional<Model<float>> best_model;
};

struct PretrainResult {
  std::vector<float> theta;
  Head<float> pretext;
  std::array<double, kTransformCount> auc{};
  std::vector<double> epoch_loss;
};

/// Rank-based area under the ROC curve; 0.5 when a class is empty.
double roc_auc(std::span<const double> scores, std::span<const int> positive);

/// Trains the extractor and the transformation-recognition heads of `m` in
/// place on unlabeled windows; held-out windows give per-head AUCs.
PretrainResult pretrain_self_supervised(Model<float>& m, std::span<const SensorWindow> windows,
                                        const PretrainConfig& cfg, std::uint64_t seed);

/// Extractor configuration adjusted to the dataset's window shape.
ExtractorConfig fit_extractor(ExtractorConfig cfg, const MultiSubjectDataset& data);

/// Alternating per-head / shared-extractor training over the source subjects.
TrainResult train_valerian(const MultiSubjectDataset& source, const TrainConfig& cfg, const ExtractorConfig& ecfg,
                           const Monitor* monitor = nullptr, const std::vector<float>* pretrained = nullptr);

/// Single-head model trained from scratch on clean support windows only.
TrainResult train_stl(std::span<const SensorWindow> support, int num_classes, const TrainConfig& cfg,
                      const ExtractorConfig& ecfg);

/// Single-head model over the pooled source subjects.
TrainResult train_si(const MultiSubjectDataset& source, const TrainConfig& cfg, const ExtractorConfig& ecfg,
                     bool use_elr, const Monitor* monitor = nullptr);

}  // namespace valerian
