#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "valerian/dataset.hpp"
#include "valerian/evaluation.hpp"
#include "valerian/loso.hpp"
#include "valerian/network.hpp"
#include "valerian/preprocess.hpp"
#include "valerian/training.hpp"
#include "valerian/transforms.hpp"

namespace valerian {

struct SyntheticSection {
  int subjects = 4;
  int classes = 4;
  int trials_per_class = 100;
  double trial_seconds = 10.0;
  double sample_rate_hz = 50.0;
  double noise_std = 0.1;
  double subject_gap = 1.0;

  SyntheticSpec spec() const;
};

struct DatasetSection {
  std::string name = "synthetic";
  std::optional<std::filesystem::path> manifest;
  std::optional<SyntheticSection> synthetic;
  std::filesystem::path file = "dataset.vald";  // relative paths resolve against output_dir
};

struct EvalSection {
  std::vector<Method> methods{Method::Valerian};
  int repeats = 5;
  std::vector<std::string> folds;
  bool refit_normalization = true;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "valerian-output";
  DatasetSection dataset;
  PreprocessConfig preprocess;
  NoiseSpec noise;
  TransformParams transforms;
  ExtractorConfig network = ExtractorConfig::full();
  TrainConfig train;
  AdaptConfig adapt;
  std::optional<double> shot_seconds;  // overrides adapt.shots through the window length
  EvalSection eval;

  /// Parses and validates; unknown keys anywhere are rejected.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  nlohmann::ordered_json to_json() const;
  void validate() const;

  std::filesystem::path dataset_path() const;
  LosoConfig loso() const;
};

}  // namespace valerian
