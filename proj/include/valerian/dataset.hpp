#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "valerian/common.hpp"

namespace valerian {

/// One fixed-length multi-channel IMU segment, [time_steps x channels].
struct SensorWindow {
  Matrix<float> values;
  std::string subject_id;
  std::optional<int> clean_label;
  std::optional<int> noisy_label;
  std::optional<int> corrected_label;
  std::int64_t window_id = 0;
  // Provenance inside the subject's recording, used to keep shots disjoint.
  std::int32_t trial = -1;
  std::int64_t offset = 0;

  /// The label a trainer is allowed to see: noisy if injected, else clean.
  std::optional<int> observed_label() const { return noisy_label ? noisy_label : clean_label; }

  bool operator==(const SensorWindow&) const = default;
};

/// Continuous recording of one labelled trial before windowing.
struct Trial {
  Matrix<float> samples;          // [n x channels]
  std::vector<double> timestamps; // seconds, strictly increasing
  int label = -1;

  bool operator==(const Trial&) const = default;
};

struct SubjectDomain {
  std::string subject_id;
  std::vector<SensorWindow> windows;
  std::vector<Trial> trials;
  int num_classes = 0;
  std::vector<bool> flip_mask;  // empty when no noise has been injected

  /// Sorted distinct clean (or observed) labels present in the windows.
  std::vector<int> classes_present() const;

  bool operator==(const SubjectDomain&) const = default;
};

struct DatasetSchema {
  double sample_rate_hz = 50.0;
  std::vector<std::string> channels;
  std::vector<std::string> classes;

  int num_classes() const { return static_cast<int>(classes.size()); }
  bool operator==(const DatasetSchema&) const = default;
};

struct MultiSubjectDataset {
  DatasetSchema schema;
  std::vector<SubjectDomain> domains;

  std::size_t index_of(const std::string& subject_id) const;
  const SubjectDomain& domain(const std::string& subject_id) const;
  std::size_t window_count() const;
  /// Checks the dataset invariants; throws ConfigError on violation.
  void validate() const;

  bool operator==(const MultiSubjectDataset&) const = default;
};

std::vector<std::string> default_channel_names();

// ---------------------------------------------------------------------------
// Synthetic generator

struct ClassPattern {
  double frequency_hz = 1.0;
  double amplitude = 1.0;
  double harmonic_ratio = 0.5;   // second-harmonic amplitude relative to the fundamental
  double harmonic_phase = 0.0;   // fixed phase of the second harmonic (makes waveforms skewed)
  std::array<double, 3> accel_axis{1.0, 0.0, 0.0};
  std::array<double, 3> gyro_axis{0.0, 1.0, 0.0};
  double gyro_gain = 1.0;
};

struct SubjectOffset {
  double amplitude_scale = 1.0;
  double frequency_shift_hz = 0.0;
  std::array<double, 3> rotation_axis{0.0, 0.0, 1.0};
  double rotation_angle = 0.0;  // radians
};

struct SyntheticSpec {
  int num_subjects = 4;
  int num_classes = 4;
  int trials_per_class = 100;
  double sample_rate_hz = 50.0;
  double trial_seconds = 10.0;
  double noise_std = 0.1;
  double gravity = 9.81;           // constant accelerometer offset along z before rotation
  double amplitude_jitter = 0.1;   // per-trial multiplicative jitter, uniform in [1-j, 1+j]
  std::vector<ClassPattern> classes;
  std::vector<SubjectOffset> subjects;

  /// Fills classes/subjects with the stock patterns for the current K, C.
  /// `subject_gap` in [0, 1] scales how far subjects drift from each other.
  static SyntheticSpec defaults(int num_subjects = 4, int num_classes = 4,
                                double subject_gap = 1.0);
  void validate() const;
};

/// Deterministic in (parameters, seed). Trials are attached; windows are left empty.
MultiSubjectDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

/// Rotation matrix for a (not necessarily unit) axis and angle, Rodrigues' formula.
std::array<double, 9> axis_angle_matrix(const std::array<double, 3>& axis, double angle);

// ---------------------------------------------------------------------------
// Ingestion, splitting, persistence

/// Reads a JSON manifest plus the per-trial CSV files it references.
MultiSubjectDataset load_manifest(const std::filesystem::path& path);

struct LosoSplit {
  MultiSubjectDataset source;
  SubjectDomain target;
};
LosoSplit split_loso(const MultiSubjectDataset& dataset, const std::string& target_subject);

struct ShotSample {
  std::vector<SensorWindow> support;
  SubjectDomain remainder;
  std::map<int, int> shortfall;  // class -> windows missing from the requested M
};

/// Draws `shots_per_class` windows per class by clean label, without
/// replacement, preferring windows that do not overlap each other.
ShotSample sample_clean_shots(const SubjectDomain& domain, int shots_per_class,
                              std::uint64_t seed);

/// Number of windows covering `seconds` of signal per class.
int shots_for_seconds(double seconds, double window_seconds);

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

void save_dataset(const MultiSubjectDataset& dataset, const std::filesystem::path& path);
MultiSubjectDataset load_dataset(const std::filesystem::path& path);

}  // namespace valerian
