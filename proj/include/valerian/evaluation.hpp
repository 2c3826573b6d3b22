#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "valerian/common.hpp"
#include "valerian/dataset.hpp"
#include "valerian/network.hpp"
#include "valerian/optim.hpp"

namespace valerian {

/// Index of the largest entry; ties go to the lower index.
std::size_t argmax(std::span<const double> row);

struct Metrics {
  std::size_t count = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<std::optional<double>> per_class_f1;  // nullopt for classes absent from truth and predictions
  Matrix<long> confusion;                           // rows = truth, cols = prediction
};

Metrics evaluate_predictions(std::span<const int> truth, std::span<const int> predicted, int num_classes);

/// Head used for a subject: its own head if it has one, else the single pooled head.
template <class Real>
std::optional<std::size_t> head_for_subject(const Model<Real>& m, const std::string& subject);

/// Predicted global class ids (eval mode).
template <class Real>
std::vector<int> predict(const Model<Real>& m, std::size_t head, std::span<const SensorWindow> windows);

/// Scores windows against their clean labels.
template <class Real>
Metrics evaluate(const Model<Real>& m, std::size_t head, std::span<const SensorWindow> windows, int num_classes);

struct MemorizationBreakdown {
  double clean_correct = 0.0;
  double clean_wrong = 0.0;
  double noisy_correct = 0.0;
  double noisy_memorized = 0.0;
  double noisy_other = 0.0;

  double total() const { return clean_correct + clean_wrong + noisy_correct + noisy_memorized + noisy_other; }
};

MemorizationBreakdown memorization_breakdown(std::span<const int> predicted, std::span<const int> clean,
                                             std::span<const int> noisy, const std::vector<bool>& flipped);

/// Breakdown of a trained model over a noisy source dataset with retained flip masks.
template <class Real>
MemorizationBreakdown memorization_breakdown(const Model<Real>& m, const MultiSubjectDataset& source);

struct GmmSplit {
  std::array<double, 2> mean{};      // [clean, noisy], clean has the lower mean
  std::array<double, 2> variance{};
  std::array<double, 2> weight{};
  std::vector<double> normalized;    // min-max normalized losses
  std::vector<double> clean_posterior;
  std::vector<bool> clean;
  std::vector<double> log_likelihood;  // per EM iteration
  int iterations = 0;
  bool degenerate = false;
};

inline constexpr double kGmmVarianceFloor = 1e-4;

/// Two-component 1-D Gaussian mixture over min-max normalized losses (EM).
GmmSplit gmm_loss_split(std::span<const double> losses, int max_iterations = 100, double tolerance = 1e-6);

/// Per-sample cross-entropy against the observed labels.
template <class Real>
std::vector<double> per_sample_losses(const Model<Real>& m, std::size_t head, std::span<const SensorWindow> windows);

struct SubjectCorrection {
  std::string subject_id;
  std::size_t windows = 0;
  std::size_t flipped = 0;
  std::size_t recovered = 0;
  std::optional<double> recall;          // nullopt when nothing was flipped
  std::optional<double> clean_accuracy;  // corrected labels vs clean labels
};

struct CorrectionReport {
  MultiSubjectDataset relabeled;
  std::vector<SubjectCorrection> subjects;
  std::size_t flipped = 0;
  std::size_t recovered = 0;
  std::optional<double> recall;
  std::optional<double> clean_accuracy;
  Matrix<long> confusion;  // clean vs corrected
};

/// Relabels every source window with its subject head's prediction.
template <class Real>
CorrectionReport correct_labels(const Model<Real>& m, const MultiSubjectDataset& source);

enum class HeadInit { ReuseRandomSourceHead, Fresh };

struct AdaptConfig {
  int shots = 5;
  int epochs = 100;
  int batch_size = 64;
  OptimizerConfig optimizer = OptimizerConfig::adam(1e-3);
  HeadInit head_init = HeadInit::ReuseRandomSourceHead;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AdaptResult {
  std::size_t head = 0;  // index of the adapted head inside the model
  bool reused = false;
  std::optional<std::size_t> source_head;
  std::size_t shots_used = 0;
  int epochs = 0;
};

/// Trains one new head on the support set with the extractor frozen; the head is
/// appended to the model and starts from a random source head when its classes
/// cover the support, otherwise from a fresh initialization.
template <class Real>
AdaptResult adapt_to_target(Model<Real>& m, std::span<const SensorWindow> support, const AdaptConfig& cfg,
                            const std::string& target_subject = "target");

/// CSV of window_id, subject_id, clean_label, then one column per feature.
template <class Real>
void export_embeddings(const Model<Real>& m, std::span<const SensorWindow> windows,
                       const std::filesystem::path& path);

}  // namespace valerian
