#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "valerian/common.hpp"

namespace valerian {

/// Pretext transformations; the integer codes are stable and used as head indices.
enum class TransformKind : int {
  Noised = 0,
  Scaled = 1,
  Rotated = 2,
  Negated = 3,
  Reversed = 4,
  Permuted = 5,
  TimeWarped = 6,
  ChannelShuffled = 7,
};

inline constexpr int kTransformCount = 8;

std::string_view transform_name(TransformKind kind);

struct TransformParams {
  double noise_std = 0.05;
  double scale_low = 0.7;
  double scale_high = 1.3;
  int permute_slices = 4;
  int timewarp_knots = 4;
  double timewarp_sigma = 0.2;

  void validate() const;
};

struct MixupConfig {
  double alpha = 0.2;
};

/// Applies one transformation to a [L x channels] window. Channels are taken
/// as consecutive 3-axis sensor groups (accelerometer, gyroscope, ...).
Matrix<float> apply_transform(const Matrix<float>& window, TransformKind kind,
                              const TransformParams& params, std::uint64_t seed);

/// Warped sample positions in [0, L-1]: strictly increasing, endpoints fixed.
std::vector<double> time_warp_positions(std::size_t length, const TransformParams& params, Rng& rng);

/// Folded MixUp weight a' = max(a, 1 - a), a ~ Beta(alpha, alpha).
double sample_mixup_weight(const MixupConfig& cfg, Rng& rng);

struct MixupResult {
  Matrix<float> mixed;
  double weight = 1.0;  // a'
};

/// x' = a' x1 + (1 - a') x2 with a' drawn from the folded Beta.
MixupResult mixup_pair(const Matrix<float>& x1, const Matrix<float>& x2, const MixupConfig& cfg,
                       std::uint64_t seed);
/// Same with a given raw factor a (folded internally).
MixupResult mixup_with_factor(const Matrix<float>& x1, const Matrix<float>& x2, double a);

struct PretextBatch {
  std::vector<Matrix<float>> inputs;
  std::vector<std::array<float, kTransformCount>> labels;  // one-hot, or all zero if untouched
  std::vector<int> kind;           // -1 for the untouched copy
  std::vector<std::size_t> source; // index of the originating window
};

/// For every window: one untouched copy plus one copy per transformation,
/// shuffled deterministically by `seed`.
PretextBatch sample_pretext_batch(std::span<const Matrix<float>> windows, const TransformParams& params,
                                  std::uint64_t seed);

}  // namespace valerian
