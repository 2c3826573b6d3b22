#include "valerian/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "valerian/dataset.hpp"

namespace valerian {

std::string_view transform_name(TransformKind kind) {
  switch (kind) {
    case TransformKind::Noised: return "noised";
    case TransformKind::Scaled: return "scaled";
    case TransformKind::Rotated: return "rotated";
    case TransformKind::Negated: return "negated";
    case TransformKind::Reversed: return "reversed";
    case TransformKind::Permuted: return "permuted";
    case TransformKind::TimeWarped: return "time_warped";
    case TransformKind::ChannelShuffled: return "channel_shuffled";
  }
  return "unknown";
}

void TransformParams::validate() const {
  if (noise_std < 0) throw ConfigError("transforms: noise_std must be >= 0");
  if (!(scale_low > 0) || scale_high < scale_low) {
    throw ConfigError("transforms: scale range must satisfy 0 < low <= high");
  }
  if (permute_slices < 2) throw ConfigError("transforms: permute_slices must be >= 2");
  if (timewarp_knots < 2) throw ConfigError("transforms: timewarp_knots must be >= 2");
  if (timewarp_sigma < 0) throw ConfigError("transforms: timewarp_sigma must be >= 0");
}

namespace {

std::size_t sensor_groups(const Matrix<float>& w) {
  if (w.cols() % 3 != 0) throw ConfigError("transform: channel count must be a multiple of 3");
  return w.cols() / 3;
}

std::array<double, 3> random_unit_axis(Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (;;) {
    std::array<double, 3> a{normal(rng), normal(rng), normal(rng)};
    const double n = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
    if (n > 1e-9) return {a[0] / n, a[1] / n, a[2] / n};
  }
}

template <class Perm>
bool is_identity(const Perm& p) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] != i) return false;
  }
  return true;
}

}  // namespace

std::vector<double> time_warp_positions(std::size_t length, const TransformParams& params, Rng& rng) {
  std::vector<double> pos(length, 0.0);
  if (length < 2) return pos;
  // Local speed is piecewise linear through knots + 2 anchors drawn around 1;
  // its running integral is a strictly increasing warp.
  const int anchors = params.timewarp_knots + 2;
  std::normal_distribution<double> speed(1.0, params.timewarp_sigma);
  std::vector<double> v(static_cast<std::size_t>(anchors));
  for (auto& s : v) s = std::max(0.1, speed(rng));
  std::vector<double> rate(length);
  for (std::size_t i = 0; i < length; ++i) {
    const double u = static_cast<double>(i) / static_cast<double>(length - 1) * (anchors - 1);
    const auto k = std::min(static_cast<std::size_t>(u), static_cast<std::size_t>(anchors - 2));
    const double f = u - static_cast<double>(k);
    rate[i] = v[k] + f * (v[k + 1] - v[k]);
  }
  for (std::size_t i = 1; i < length; ++i) pos[i] = pos[i - 1] + 0.5 * (rate[i - 1] + rate[i]);
  const double scale = static_cast<double>(length - 1) / pos.back();
  for (auto& p : pos) p *= scale;
  pos.back() = static_cast<double>(length - 1);
  return pos;
}

Matrix<float> apply_transform(const Matrix<float>& window, TransformKind kind,
                              const TransformParams& params, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t len = window.rows(), ch = window.cols();
  Matrix<float> out = window;
  switch (kind) {
    case TransformKind::Noised: {
      if (params.noise_std == 0.0) break;
      std::normal_distribution<double> noise(0.0, params.noise_std);
      for (auto& v : out.values()) v = static_cast<float>(v + noise(rng));
      break;
    }
    case TransformKind::Scaled: {
      std::uniform_real_distribution<double> scale(params.scale_low, params.scale_high);
      for (std::size_t g = 0; g < sensor_groups(window); ++g) {
        const double s = scale(rng);
        for (std::size_t t = 0; t < len; ++t) {
          for (std::size_t a = 0; a < 3; ++a) out(t, 3 * g + a) = static_cast<float>(window(t, 3 * g + a) * s);
        }
      }
      break;
    }
    case TransformKind::Rotated: {
      std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
      for (std::size_t g = 0; g < sensor_groups(window); ++g) {
        const auto axis = random_unit_axis(rng);
        const auto r = axis_angle_matrix(axis, angle(rng));
        for (std::size_t t = 0; t < len; ++t) {
          for (std::size_t i = 0; i < 3; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < 3; ++j) acc += r[i * 3 + j] * window(t, 3 * g + j);
            out(t, 3 * g + i) = static_cast<float>(acc);
          }
        }
      }
      break;
    }
    case TransformKind::Negated:
      for (auto& v : out.values()) v = -v;
      break;
    case TransformKind::Reversed:
      for (std::size_t t = 0; t < len; ++t) {
        std::copy(window.row(len - 1 - t).begin(), window.row(len - 1 - t).end(), out.row(t).begin());
      }
      break;
    case TransformKind::Permuted: {
      const auto slices = static_cast<std::size_t>(params.permute_slices);
      if (len < slices) break;
      const std::size_t base = len / slices;
      std::vector<std::size_t> order(slices);
      std::iota(order.begin(), order.end(), 0);
      do {
        std::shuffle(order.begin(), order.end(), rng);
      } while (is_identity(order));
      std::size_t dst = 0;
      for (std::size_t s : order) {
        const std::size_t begin = s * base;
        const std::size_t end = s + 1 == slices ? len : begin + base;  // last slice absorbs remainder
        for (std::size_t t = begin; t < end; ++t, ++dst) {
          std::copy(window.row(t).begin(), window.row(t).end(), out.row(dst).begin());
        }
      }
      break;
    }
    case TransformKind::TimeWarped: {
      const auto pos = time_warp_positions(len, params, rng);
      for (std::size_t t = 0; t < len; ++t) {
        const auto i0 = std::min(static_cast<std::size_t>(pos[t]), len - 1);
        const std::size_t i1 = std::min(i0 + 1, len - 1);
        const double f = pos[t] - static_cast<double>(i0);
        for (std::size_t c = 0; c < ch; ++c) {
          out(t, c) = static_cast<float>(window(i0, c) + f * (window(i1, c) - window(i0, c)));
        }
      }
      break;
    }
    case TransformKind::ChannelShuffled: {
      for (std::size_t g = 0; g < sensor_groups(window); ++g) {
        std::array<std::size_t, 3> perm{0, 1, 2};
        do {
          std::shuffle(perm.begin(), perm.end(), rng);
        } while (is_identity(perm));
        for (std::size_t t = 0; t < len; ++t) {
          for (std::size_t a = 0; a < 3; ++a) out(t, 3 * g + a) = window(t, 3 * g + perm[a]);
        }
      }
      break;
    }
  }
  return out;
}

double sample_mixup_weight(const MixupConfig& cfg, Rng& rng) {
  if (!(cfg.alpha > 0)) throw ConfigError("mixup: alpha must be > 0");
  std::gamma_distribution<double> gamma(cfg.alpha, 1.0);
  double x = 0.0, y = 0.0;
  // Both gamma draws can underflow to zero for small alpha; redraw then.
  do {
    x = gamma(rng);
    y = gamma(rng);
  } while (!(x + y > 0.0));
  const double a = x / (x + y);
  return std::max(a, 1.0 - a);
}

MixupResult mixup_with_factor(const Matrix<float>& x1, const Matrix<float>& x2, double a) {
  if (x1.rows() != x2.rows() || x1.cols() != x2.cols()) throw ConfigError("mixup: shape mismatch");
  const double w = std::max(a, 1.0 - a);
  MixupResult r{Matrix<float>(x1.rows(), x1.cols()), w};
  for (std::size_t i = 0; i < x1.size(); ++i) {
    r.mixed.values()[i] = static_cast<float>(w * x1.values()[i] + (1.0 - w) * x2.values()[i]);
  }
  return r;
}

MixupResult mixup_pair(const Matrix<float>& x1, const Matrix<float>& x2, const MixupConfig& cfg,
                       std::uint64_t seed) {
  Rng rng(seed);
  return mixup_with_factor(x1, x2, sample_mixup_weight(cfg, rng));
}

PretextBatch sample_pretext_batch(std::span<const Matrix<float>> windows, const TransformParams& params,
                                  std::uint64_t seed) {
  params.validate();
  PretextBatch ordered;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    ordered.inputs.push_back(windows[i]);
    ordered.labels.push_back({});
    ordered.kind.push_back(-1);
    ordered.source.push_back(i);
    for (int k = 0; k < kTransformCount; ++k) {
      const auto kind = static_cast<TransformKind>(k);
      ordered.inputs.push_back(apply_transform(windows[i], kind, params,
                                               mix_seed(seed, i * kTransformCount + static_cast<std::uint64_t>(k))));
      std::array<float, kTransformCount> label{};
      label[static_cast<std::size_t>(k)] = 1.0f;
      ordered.labels.push_back(label);
      ordered.kind.push_back(k);
      ordered.source.push_back(i);
    }
  }
  std::vector<std::size_t> perm(ordered.inputs.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(mix_seed(seed, "pretext-shuffle"));
  std::shuffle(perm.begin(), perm.end(), rng);
  PretextBatch out;
  for (std::size_t p : perm) {
    out.inputs.push_back(std::move(ordered.inputs[p]));
    out.labels.push_back(ordered.labels[p]);
    out.kind.push_back(ordered.kind[p]);
    out.source.push_back(ordered.source[p]);
  }
  return out;
}

}  // namespace valerian
