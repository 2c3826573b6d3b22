#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "valerian/common.hpp"
#include "valerian/dataset.hpp"

namespace valerian {

enum class NoisePattern { Symmetric, Asymmetric, Custom };

/// Row-stochastic label-corruption matrix: T(i, j) = P(observed j | true i).
struct NoiseTransitionMatrix {
  Matrix<double> matrix;
  NoisePattern pattern = NoisePattern::Custom;
  double tau = 0.0;

  int num_classes() const { return static_cast<int>(matrix.rows()); }
  /// Throws ConfigError unless entries are >= 0 and rows sum to 1 within 1e-9.
  void validate() const;
};

/// Maps each class to the class it is most often confused with.
using ConfusionPairs = std::map<int, int>;

NoiseTransitionMatrix symmetric_matrix(int num_classes, double tau);
NoiseTransitionMatrix asymmetric_matrix(int num_classes, double tau, const ConfusionPairs& pairs);

/// Argmax of each off-diagonal row, ties to the lower index.
/// Rows with no off-diagonal mass fall back to (i + 1) mod C with a warning.
ConfusionPairs derive_confusion_pairs(const Matrix<double>& confusion);

struct FlipRecord {
  bool flipped = false;
  int original = -1;
  int assigned = -1;
};

struct InjectionResult {
  SubjectDomain domain;
  std::vector<FlipRecord> records;
};

/// Draws each window's noisy label from row T[clean_label]; keeps clean labels.
InjectionResult inject(const SubjectDomain& domain, const NoiseTransitionMatrix& t, std::uint64_t seed);

/// Injects every domain with a seed derived from (seed, subject id).
MultiSubjectDataset inject_dataset(const MultiSubjectDataset& dataset, const NoiseTransitionMatrix& t,
                                   std::uint64_t seed);

struct EmpiricalTransition {
  Matrix<double> matrix;
  std::vector<bool> empty_rows;  // rows with no samples, filled uniform
};

EmpiricalTransition empirical_transition(std::span<const int> clean, std::span<const int> noisy,
                                         int num_classes);

}  // namespace valerian
