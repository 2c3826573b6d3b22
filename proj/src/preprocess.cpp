#include "valerian/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>

namespace valerian {

void PreprocessConfig::validate() const {
  if (target_rate_hz <= 0) throw ConfigError("preprocess: target_rate_hz must be > 0");
  if (overlap_fraction < 0 || overlap_fraction >= 1) {
    throw ConfigError("preprocess: overlap_fraction must be in [0, 1)");
  }
  if (lowpass_cutoff_hz <= 0 || lowpass_cutoff_hz >= target_rate_hz / 2) {
    throw ConfigError("preprocess: lowpass_cutoff_hz must be in (0, target_rate_hz / 2)");
  }
  if (filter_order < 1) throw ConfigError("preprocess: filter_order must be >= 1");
  const double l = window_seconds * target_rate_hz;
  if (window_seconds <= 0 || std::abs(l - std::round(l)) > 1e-9) {
    throw ConfigError("preprocess: window_seconds * target_rate_hz must be a positive integer");
  }
  if (stride() == 0) throw ConfigError("preprocess: overlap leaves a zero stride");
}

std::size_t PreprocessConfig::window_length() const {
  return static_cast<std::size_t>(std::llround(window_seconds * target_rate_hz));
}

std::size_t PreprocessConfig::stride() const {
  return static_cast<std::size_t>(
      std::llround(static_cast<double>(window_length()) * (1.0 - overlap_fraction)));
}

bool NormalizationStats::any_clamped() const {
  return std::any_of(clamped.begin(), clamped.end(), [](bool b) { return b; });
}

// ---------------------------------------------------------------------------

Matrix<float> resample(const Matrix<float>& series, double source_rate_hz, double target_rate_hz) {
  if (source_rate_hz <= 0) throw ConfigError("resample: source rate must be > 0");
  std::vector<double> ts(series.rows());
  for (std::size_t i = 0; i < ts.size(); ++i) ts[i] = static_cast<double>(i) / source_rate_hz;
  return resample(series, ts, target_rate_hz);
}

Matrix<float> resample(const Matrix<float>& series, std::span<const double> timestamps,
                       double target_rate_hz) {
  if (series.rows() < 2) throw ConfigError("resample: need at least 2 samples");
  if (timestamps.size() != series.rows()) throw ConfigError("resample: timestamp count mismatch");
  if (target_rate_hz <= 0) throw ConfigError("resample: target rate must be > 0");
  const double t0 = timestamps.front();
  const double duration = timestamps.back() - t0;
  const auto n_out = static_cast<std::size_t>(std::floor(duration * target_rate_hz + 1e-9)) + 1;
  const std::size_t ch = series.cols();
  Matrix<float> out(n_out, ch);
  std::size_t seg = 0;
  for (std::size_t j = 0; j < n_out; ++j) {
    const double t = t0 + static_cast<double>(j) / target_rate_hz;
    while (seg + 2 < timestamps.size() && timestamps[seg + 1] < t) ++seg;
    const double ta = timestamps[seg], tb = timestamps[seg + 1];
    const double u = std::clamp((t - ta) / (tb - ta), 0.0, 1.0);
    for (std::size_t c = 0; c < ch; ++c) {
      const double a = series(seg, c), b = series(seg + 1, c);
      out(j, c) = static_cast<float>(a + u * (b - a));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<Biquad> butterworth_lowpass(int order, double cutoff_hz, double sample_rate_hz) {
  if (order < 1) throw ConfigError("butterworth: order must be >= 1");
  if (cutoff_hz <= 0 || cutoff_hz >= sample_rate_hz / 2) {
    throw ConfigError("butterworth: cutoff must lie below Nyquist");
  }
  const double fs2 = 2.0 * sample_rate_hz;
  const double warped = fs2 * std::tan(std::numbers::pi * cutoff_hz / sample_rate_hz);
  const auto bilinear = [fs2](std::complex<double> s) { return (fs2 + s) / (fs2 - s); };

  std::vector<Biquad> sections;
  for (int k = 0; k < order / 2; ++k) {
    const double angle = std::numbers::pi * (2.0 * k + 1.0 + order) / (2.0 * order);
    const auto zp = bilinear(warped * std::polar(1.0, angle));
    const double a1 = -2.0 * zp.real();
    const double a2 = std::norm(zp);
    const double g = (1.0 + a1 + a2) / 4.0;  // numerator (1 + z^-1)^2 has DC gain 4
    sections.push_back({g, 2.0 * g, g, 1.0, a1, a2});
  }
  if (order % 2 == 1) {
    const double zp = bilinear(std::complex<double>(-warped, 0.0)).real();
    const double g = (1.0 - zp) / 2.0;
    sections.push_back({g, g, 0.0, 1.0, -zp, 0.0});
  }
  return sections;
}

namespace {

void sos_filter_inplace(const std::vector<Biquad>& sections, std::vector<double>& x) {
  if (x.empty()) return;
  for (const auto& s : sections) {
    const double b0 = s[0], b1 = s[1], b2 = s[2], a1 = s[4], a2 = s[5];
    // Steady-state state for a constant input equal to x[0] (sections have unit DC gain).
    double z1 = (1.0 - b0) * x[0];
    double z2 = (b2 - a2) * x[0];
    for (double& v : x) {
      const double in = v;
      const double y = b0 * in + z1;
      z1 = b1 * in - a1 * y + z2;
      z2 = b2 * in - a2 * y;
      v = y;
    }
  }
}

}  // namespace

std::vector<double> sos_filtfilt(const std::vector<Biquad>& sections, std::span<const double> x) {
  const std::size_t n = x.size();
  const std::size_t pad_wanted = 3 * (2 * sections.size() + 1);
  const std::size_t pad = n > 1 ? std::min(pad_wanted, n - 1) : 0;
  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);

  sos_filter_inplace(sections, ext);
  std::reverse(ext.begin(), ext.end());
  sos_filter_inplace(sections, ext);
  std::reverse(ext.begin(), ext.end());
  return {ext.begin() + static_cast<std::ptrdiff_t>(pad),
          ext.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

Matrix<float> lowpass_filter(const Matrix<float>& series, const PreprocessConfig& config) {
  const auto sections =
      butterworth_lowpass(config.filter_order, config.lowpass_cutoff_hz, config.target_rate_hz);
  if (series.rows() < 3 * static_cast<std::size_t>(config.filter_order)) {
    warn("lowpass_filter: series of " + std::to_string(series.rows()) +
         " samples is too short to filter; passing through");
    return series;
  }
  Matrix<float> out(series.rows(), series.cols());
  std::vector<double> channel(series.rows());
  for (std::size_t c = 0; c < series.cols(); ++c) {
    for (std::size_t i = 0; i < series.rows(); ++i) channel[i] = series(i, c);
    const auto filtered = sos_filtfilt(sections, channel);
    for (std::size_t i = 0; i < series.rows(); ++i) out(i, c) = static_cast<float>(filtered[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------

NormalizationFitter::NormalizationFitter(std::size_t channels, NormalizationKind kind)
    : kind_(kind),
      sum_(channels, 0.0),
      sum_sq_(channels, 0.0),
      min_(channels, std::numeric_limits<double>::infinity()),
      max_(channels, -std::numeric_limits<double>::infinity()) {}

void NormalizationFitter::add(const Matrix<float>& series) {
  if (series.cols() != sum_.size()) throw ConfigError("normalization: channel count mismatch");
  for (std::size_t i = 0; i < series.rows(); ++i) {
    for (std::size_t c = 0; c < series.cols(); ++c) {
      const double v = series(i, c);
      sum_[c] += v;
      sum_sq_[c] += v * v;
      min_[c] = std::min(min_[c], v);
      max_[c] = std::max(max_[c], v);
    }
  }
  count_ += series.rows();
}

NormalizationStats NormalizationFitter::finish(FitScope scope) const {
  if (count_ == 0) throw ConfigError("normalization: no samples to fit");
  NormalizationStats st;
  st.kind = kind_;
  st.scope = scope;
  const auto n = static_cast<double>(count_);
  for (std::size_t c = 0; c < sum_.size(); ++c) {
    double center = 0.0, scale = 0.0;
    if (kind_ == NormalizationKind::ZScore) {
      center = sum_[c] / n;
      scale = std::sqrt(std::max(0.0, sum_sq_[c] / n - center * center));
    } else {
      center = min_[c];
      scale = max_[c] - min_[c];
    }
    const bool degenerate = !(scale > 1e-12 * std::max(1.0, std::abs(center)));
    if (degenerate) {
      warn("normalization: channel " + std::to_string(c) + " has zero spread; scale clamped to 1");
      scale = 1.0;
    }
    st.center.push_back(center);
    st.scale.push_back(scale);
    st.clamped.push_back(degenerate);
  }
  return st;
}

NormalizationStats fit_normalization(const MultiSubjectDataset& dataset, const PreprocessConfig& config) {
  NormalizationFitter fitter(dataset.schema.channels.size(), config.normalization);
  for (const auto& d : dataset.domains) {
    if (!d.trials.empty()) {
      for (const auto& t : d.trials) fitter.add(t.samples);
    } else {
      for (const auto& w : d.windows) fitter.add(w.values);
    }
  }
  return fitter.finish(config.fit_scope);
}

NormalizationStats fit_normalization(std::span<const SensorWindow> windows, const PreprocessConfig& config) {
  if (windows.empty()) throw ConfigError("normalization: no windows to fit");
  NormalizationFitter fitter(windows.front().values.cols(), config.normalization);
  for (const auto& w : windows) fitter.add(w.values);
  return fitter.finish(config.fit_scope);
}

Matrix<float> apply_normalization(const Matrix<float>& series, const NormalizationStats& stats) {
  if (series.cols() != stats.center.size()) throw ConfigError("normalization: channel count mismatch");
  Matrix<float> out(series.rows(), series.cols());
  for (std::size_t i = 0; i < series.rows(); ++i) {
    for (std::size_t c = 0; c < series.cols(); ++c) {
      out(i, c) = static_cast<float>((series(i, c) - stats.center[c]) / stats.scale[c]);
    }
  }
  return out;
}

void normalize_windows(std::vector<SensorWindow>& windows, const NormalizationStats& stats) {
  for (auto& w : windows) w.values = apply_normalization(w.values, stats);
}

std::vector<SensorWindow> segment(const Matrix<float>& series, const PreprocessConfig& config,
                                  std::optional<int> label, std::int64_t first_id) {
  const std::size_t len = config.window_length();
  const std::size_t stride = config.stride();
  std::vector<SensorWindow> out;
  if (len == 0 || stride == 0 || series.rows() < len) return out;
  std::int64_t id = first_id;
  for (std::size_t off = 0; off + len <= series.rows(); off += stride) {
    SensorWindow w;
    w.values = Matrix<float>(len, series.cols());
    std::copy(series.data() + off * series.cols(), series.data() + (off + len) * series.cols(),
              w.values.data());
    w.clean_label = label;
    w.window_id = id++;
    w.offset = static_cast<std::int64_t>(off);
    out.push_back(std::move(w));
  }
  return out;
}

PreprocessResult preprocess_dataset(const MultiSubjectDataset& raw, const PreprocessConfig& config) {
  config.validate();
  PreprocessResult res;
  res.dataset.schema = raw.schema;
  res.dataset.schema.sample_rate_hz = config.target_rate_hz;
  for (const auto& d : raw.domains) {
    SubjectDomain out;
    out.subject_id = d.subject_id;
    out.num_classes = d.num_classes;
    for (const auto& t : d.trials) {
      Trial p;
      p.label = t.label;
      p.samples = lowpass_filter(resample(t.samples, t.timestamps, config.target_rate_hz), config);
      p.timestamps.resize(p.samples.rows());
      for (std::size_t i = 0; i < p.timestamps.size(); ++i) {
        p.timestamps[i] = t.timestamps.front() + static_cast<double>(i) / config.target_rate_hz;
      }
      out.trials.push_back(std::move(p));
    }
    res.dataset.domains.push_back(std::move(out));
  }

  res.global_stats = fit_normalization(res.dataset, config);
  for (auto& d : res.dataset.domains) {
    NormalizationStats stats = res.global_stats;
    if (config.fit_scope == FitScope::PerSubject) {
      NormalizationFitter fitter(res.dataset.schema.channels.size(), config.normalization);
      for (const auto& t : d.trials) fitter.add(t.samples);
      stats = fitter.finish(FitScope::PerSubject);
      res.subject_stats[d.subject_id] = stats;
    }
    std::int64_t next_id = 0;
    for (std::size_t ti = 0; ti < d.trials.size(); ++ti) {
      auto& t = d.trials[ti];
      t.samples = apply_normalization(t.samples, stats);
      for (auto& w : segment(t.samples, config, t.label, next_id)) {
        w.subject_id = d.subject_id;
        w.trial = static_cast<std::int32_t>(ti);
        d.windows.push_back(std::move(w));
      }
      next_id = d.windows.empty() ? 0 : d.windows.back().window_id + 1;
    }
  }
  return res;
}

}  // namespace valerian
