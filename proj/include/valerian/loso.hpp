#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "valerian/evaluation.hpp"
#include "valerian/noise.hpp"
#include "valerian/preprocess.hpp"
#include "valerian/training.hpp"

namespace valerian {

struct NoiseSpec {
  NoisePattern pattern = NoisePattern::Asymmetric;
  double tau = 0.4;
  ConfusionPairs pairs;  // asymmetric only; empty means class i -> (i + 1) mod C

  NoiseTransitionMatrix matrix(int num_classes) const;
};

std::string noise_pattern_name(NoisePattern p);
NoisePattern parse_noise_pattern(const std::string& name);

struct LosoConfig {
  std::vector<Method> methods{Method::Valerian};
  NoiseSpec noise;
  TrainConfig train;
  ExtractorConfig network = ExtractorConfig::full();
  AdaptConfig adapt;
  std::optional<PreprocessConfig> refit;  // refit normalization on each fold's source windows
  int repeats = 5;
  std::vector<std::string> folds;  // target subjects; empty means every subject
  std::uint64_t seed = 0;
  std::string dataset_name = "dataset";
  std::filesystem::path checkpoint_root;  // per-run checkpoints when set

  void validate() const;
};

struct RunRecord {
  std::string method;
  std::string dataset;
  std::string noise_pattern;
  double tau = 0.0;
  int shots = 0;
  std::string fold_subject;
  int repeat = 0;
  std::optional<double> accuracy;
  std::optional<double> macro_f1;
  std::optional<double> correction_recall;
  std::optional<double> noisy_memorized;
  std::string error;  // non-empty when the run failed
};

struct Aggregate {
  std::string method;
  std::size_t runs = 0;
  std::size_t failures = 0;
  double accuracy_mean = 0.0;
  double accuracy_std = 0.0;  // population standard deviation over runs
  double macro_f1_mean = 0.0;
  double macro_f1_std = 0.0;
  std::optional<double> recall_mean;
};

struct LosoResult {
  std::vector<RunRecord> runs;

  std::vector<Aggregate> aggregate() const;
  bool any_failed() const;
  void write_csv(const std::filesystem::path& path) const;
  std::string to_json() const;
};

/// Population mean and standard deviation.
std::pair<double, double> mean_std(const std::vector<double>& values);

/// Seed of one (target, repeat) run; every method in that run shares it.
std::uint64_t run_seed(std::uint64_t seed, const std::string& target, int repeat);

/// One fold/repeat/method: inject noise into the source, train, correct and
/// adapt as the method requires, evaluate on the target remainder.
std::vector<RunRecord> run_fold(const MultiSubjectDataset& dataset, const LosoConfig& cfg,
                                const std::string& target, int repeat, Method method);

/// Leave-one-subject-out over the configured folds, methods and repeats.
/// Failures are recorded per run and do not stop the others.
LosoResult run_loso(const MultiSubjectDataset& dataset, const LosoConfig& cfg,
                    const std::function<void(const RunRecord&)>& progress = {});

/// Reads a results CSV written by LosoResult::write_csv.
LosoResult read_results_csv(const std::filesystem::path& path);

}  // namespace valerian
