#pragma once

#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "valerian/common.hpp"
#include "valerian/dataset.hpp"

namespace valerian {

enum class NormalizationKind { ZScore, MinMax };
enum class FitScope { PerSubject, Global };

struct PreprocessConfig {
  double target_rate_hz = 50.0;
  double lowpass_cutoff_hz = 10.0;
  int filter_order = 4;
  double window_seconds = 2.0;
  double overlap_fraction = 0.8;
  NormalizationKind normalization = NormalizationKind::ZScore;
  FitScope fit_scope = FitScope::Global;

  void validate() const;
  std::size_t window_length() const;
  std::size_t stride() const;
};

/// Per-channel affine normalization: x' = (x - center) / scale.
/// For z-score center/scale are mean/std, for min-max they are min/(max-min).
struct NormalizationStats {
  NormalizationKind kind = NormalizationKind::ZScore;
  FitScope scope = FitScope::Global;
  std::vector<double> center;
  std::vector<double> scale;
  std::vector<bool> clamped;  // channels whose spread was zero and got scale 1

  bool any_clamped() const;
  bool operator==(const NormalizationStats&) const = default;
};

/// Linear interpolation of a uniformly sampled series onto a grid at `target_rate_hz`.
Matrix<float> resample(const Matrix<float>& series, double source_rate_hz, double target_rate_hz);
/// Same, for explicitly timestamped samples.
Matrix<float> resample(const Matrix<float>& series, std::span<const double> timestamps,
                       double target_rate_hz);

/// One second-order section: b0 b1 b2 a0 a1 a2 (a0 == 1).
using Biquad = std::array<double, 6>;

/// Digital Butterworth low-pass as cascaded second-order sections,
/// bilinear transform with pre-warping, unit gain at DC.
std::vector<Biquad> butterworth_lowpass(int order, double cutoff_hz, double sample_rate_hz);

/// Forward-backward (zero-phase) application of a section cascade to one channel,
/// with odd-extension padding and steady-state initial conditions.
std::vector<double> sos_filtfilt(const std::vector<Biquad>& sections, std::span<const double> x);

/// Zero-phase low-pass of every channel. Series is assumed to be at config.target_rate_hz.
Matrix<float> lowpass_filter(const Matrix<float>& series, const PreprocessConfig& config);

/// Streaming accumulator so stats can be fit over trials or windows alike.
class NormalizationFitter {
 public:
  NormalizationFitter(std::size_t channels, NormalizationKind kind);
  void add(const Matrix<float>& series);
  NormalizationStats finish(FitScope scope) const;

 private:
  NormalizationKind kind_;
  std::size_t count_ = 0;
  std::vector<double> sum_, sum_sq_, min_, max_;
};

/// Fits over the continuous trials of every domain (or over windows when a
/// domain carries no trials).
NormalizationStats fit_normalization(const MultiSubjectDataset& dataset, const PreprocessConfig& config);
NormalizationStats fit_normalization(std::span<const SensorWindow> windows, const PreprocessConfig& config);

Matrix<float> apply_normalization(const Matrix<float>& series, const NormalizationStats& stats);

/// Sliding windows of length L = window_seconds * rate, stride round(L * (1 - overlap)).
/// Trailing partial windows are dropped. Window ids count from `first_id`.
std::vector<SensorWindow> segment(const Matrix<float>& series, const PreprocessConfig& config,
                                  std::optional<int> label, std::int64_t first_id = 0);

struct PreprocessResult {
  MultiSubjectDataset dataset;  // trials replaced by processed series, windows filled
  NormalizationStats global_stats;
  std::map<std::string, NormalizationStats> subject_stats;  // only for FitScope::PerSubject
};

/// resample -> low-pass -> normalize -> segment for every trial.
PreprocessResult preprocess_dataset(const MultiSubjectDataset& raw, const PreprocessConfig& config);

/// Renormalizes all windows in place with `stats` (used per LOSO fold).
void normalize_windows(std::vector<SensorWindow>& windows, const NormalizationStats& stats);

}  // namespace valerian
