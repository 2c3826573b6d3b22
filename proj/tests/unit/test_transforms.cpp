#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "support.hpp"
#include "valerian/transforms.hpp"

using namespace valerian;
using valerian::testing::random_window;

namespace {

std::vector<std::vector<float>> rows_of(const Matrix<float>& m) {
  std::vector<std::vector<float>> r;
  for (std::size_t i = 0; i < m.rows(); ++i) r.emplace_back(m.row(i).begin(), m.row(i).end());
  return r;
}

// E[max(a, 1 - a)] for a ~ Beta(alpha, alpha) by midpoint quadrature on the
// substitution a = u^(1/alpha) near the singular ends.
double folded_beta_mean(double alpha) {
  const double norm = std::exp(2.0 * std::lgamma(alpha) - std::lgamma(2.0 * alpha));
  const int n = 200000;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = (i + 0.5) / n * std::pow(0.5, alpha);
    const double a = std::pow(u, 1.0 / alpha);
    // Over a in (0, 1/2]: density a^(alpha-1)(1-a)^(alpha-1) da = (1-a)^(alpha-1) du / alpha.
    acc += (1.0 - a) * std::pow(1.0 - a, alpha - 1.0) / alpha;
  }
  const double half = acc * std::pow(0.5, alpha) / n;
  return 2.0 * half / norm;
}

}  // namespace

TEST_CASE("Reversed and Negated are exact involutions") {
  Rng rng(1);
  const auto w = random_window(100, 6, rng);
  const TransformParams p;
  for (auto kind : {TransformKind::Reversed, TransformKind::Negated}) {
    const auto once = apply_transform(w, kind, p, 3);
    CHECK_FALSE(once == w);
    CHECK(apply_transform(once, kind, p, 4) == w);
  }
  const auto r = apply_transform(w, TransformKind::Reversed, p, 0);
  for (std::size_t i = 0; i < 100; ++i) CHECK(r(i, 2) == w(99 - i, 2));
}

TEST_CASE("Rotated preserves per-sensor norms") {
  Rng rng(2);
  const auto w = random_window(100, 6, rng);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = apply_transform(w, TransformKind::Rotated, TransformParams{}, seed);
    for (std::size_t i = 0; i < 100; ++i) {
      for (std::size_t g = 0; g < 6; g += 3) {
        double a = 0.0, b = 0.0;
        for (std::size_t j = g; j < g + 3; ++j) {
          a += static_cast<double>(w(i, j)) * w(i, j);
          b += static_cast<double>(r(i, j)) * r(i, j);
        }
        CHECK(std::abs(std::sqrt(a) - std::sqrt(b)) < 1e-5);
      }
    }
  }
}

TEST_CASE("axis-angle rotation matches an independent oracle") {
  const auto m = axis_angle_matrix({0.0, 0.0, 2.0}, std::numbers::pi / 2.0);
  const double expect[9] = {0, -1, 0, 1, 0, 0, 0, 0, 1};
  for (int i = 0; i < 9; ++i) CHECK(m[static_cast<std::size_t>(i)] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("Permuted keeps the row multiset and is never the identity") {
  Rng rng(3);
  const auto w = random_window(101, 6, rng);  // uneven slices
  auto base = rows_of(w);
  std::sort(base.begin(), base.end());
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto p = apply_transform(w, TransformKind::Permuted, TransformParams{}, seed);
    CHECK_FALSE(p == w);
    auto rows = rows_of(p);
    std::sort(rows.begin(), rows.end());
    CHECK(rows == base);
  }
}

TEST_CASE("ChannelShuffled permutes axes within each sensor") {
  Rng rng(4);
  const auto w = random_window(50, 6, rng);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = apply_transform(w, TransformKind::ChannelShuffled, TransformParams{}, seed);
    CHECK_FALSE(s == w);
    for (std::size_t i = 0; i < 50; ++i) {
      for (std::size_t g = 0; g < 6; g += 3) {
        std::vector<float> a(w.row(i).begin() + g, w.row(i).begin() + g + 3);
        std::vector<float> b(s.row(i).begin() + g, s.row(i).begin() + g + 3);
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        CHECK(a == b);
      }
    }
  }
}

TEST_CASE("Noised with zero std is the identity; Scaled keeps zero crossings") {
  Rng rng(5);
  const auto w = random_window(80, 6, rng);
  TransformParams p;
  p.noise_std = 0.0;
  CHECK(apply_transform(w, TransformKind::Noised, p, 1) == w);
  p.noise_std = 0.05;
  CHECK_FALSE(apply_transform(w, TransformKind::Noised, p, 1) == w);

  const auto s = apply_transform(w, TransformKind::Scaled, TransformParams{}, 2);
  for (std::size_t i = 0; i < w.size(); ++i) {
    CHECK((w.values()[i] > 0) == (s.values()[i] > 0));
    const double ratio = s.values()[i] / w.values()[i];
    CHECK(ratio >= 0.7 - 1e-6);
    CHECK(ratio <= 1.3 + 1e-6);
  }
}

TEST_CASE("time warp positions are strictly increasing with fixed endpoints") {
  Rng rng(6);
  TransformParams p;
  p.timewarp_sigma = 0.6;
  for (int k = 0; k < 200; ++k) {
    const auto pos = time_warp_positions(100, p, rng);
    REQUIRE(pos.size() == 100);
    CHECK(pos.front() == 0.0);
    CHECK(pos.back() == doctest::Approx(99.0));
    for (std::size_t i = 1; i < pos.size(); ++i) CHECK(pos[i] > pos[i - 1]);
  }
  Rng r2(7);
  const auto w = random_window(100, 6, r2);
  const auto tw = apply_transform(w, TransformKind::TimeWarped, TransformParams{}, 3);
  CHECK(tw.rows() == 100);
  CHECK(tw(0, 0) == w(0, 0));
  CHECK(tw(99, 0) == doctest::Approx(w(99, 0)));
}

TEST_CASE("transforms are pure in (input, params, seed)") {
  Rng rng(8);
  const auto w = random_window(100, 6, rng);
  for (int k = 0; k < kTransformCount; ++k) {
    const auto kind = static_cast<TransformKind>(k);
    CHECK(apply_transform(w, kind, TransformParams{}, 11) == apply_transform(w, kind, TransformParams{}, 11));
    CHECK(apply_transform(w, kind, TransformParams{}, 11).rows() == 100);
  }
}

TEST_CASE("transform parameter validation") {
  TransformParams p;
  p.scale_low = 0.0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = TransformParams{};
  p.permute_slices = 1;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = TransformParams{};
  p.timewarp_knots = 1;
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("mixup weight distribution") {
  Rng rng(9);
  const MixupConfig cfg{0.2};
  double mean = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const double a = sample_mixup_weight(cfg, rng);
    CHECK(a >= 0.5);
    CHECK(a <= 1.0);
    mean += a;
  }
  mean /= n;
  const double oracle = folded_beta_mean(0.2);
  CHECK(mean > 0.8);
  CHECK(mean == doctest::Approx(oracle).epsilon(0.01));
}

TEST_CASE("mixup pairs") {
  Rng rng(10);
  const auto x1 = random_window(40, 6, rng), x2 = random_window(40, 6, rng);
  const auto same = mixup_pair(x1, x1, MixupConfig{}, 3);
  for (std::size_t i = 0; i < x1.size(); ++i) CHECK(same.mixed.values()[i] == doctest::Approx(x1.values()[i]));

  const auto forced = mixup_with_factor(x1, x2, 0.3);
  CHECK(forced.weight == doctest::Approx(0.7));
  for (std::size_t i = 0; i < x1.size(); ++i) {
    CHECK(forced.mixed.values()[i] == doctest::Approx(0.7 * x1.values()[i] + 0.3 * x2.values()[i]).epsilon(1e-6));
  }

  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto m = mixup_pair(x1, x2, MixupConfig{}, seed);
    CHECK(m.weight >= 0.5);
    for (std::size_t i = 0; i < x1.size(); ++i) {
      const float lo = std::min(x1.values()[i], x2.values()[i]), hi = std::max(x1.values()[i], x2.values()[i]);
      CHECK(m.mixed.values()[i] >= lo - 1e-6f);
      CHECK(m.mixed.values()[i] <= hi + 1e-6f);
    }
  }
  CHECK_THROWS_AS(mixup_pair(x1, random_window(39, 6, rng), MixupConfig{}, 1), ConfigError);
}

TEST_CASE("pretext batch layout") {
  Rng rng(11);
  std::vector<Matrix<float>> windows;
  for (int i = 0; i < 10; ++i) windows.push_back(random_window(60, 6, rng));
  const auto b = sample_pretext_batch(windows, TransformParams{}, 5);
  CHECK(b.inputs.size() == 90);
  std::array<int, kTransformCount> per_kind{};
  int untouched = 0;
  for (std::size_t i = 0; i < b.inputs.size(); ++i) {
    float sum = 0.0f;
    for (int k = 0; k < kTransformCount; ++k) {
      sum += b.labels[i][static_cast<std::size_t>(k)];
      per_kind[static_cast<std::size_t>(k)] += b.labels[i][static_cast<std::size_t>(k)] > 0.5f ? 1 : 0;
    }
    if (b.kind[i] < 0) {
      ++untouched;
      CHECK(sum == 0.0f);
      CHECK(b.inputs[i] == windows[b.source[i]]);
    } else {
      CHECK(sum == 1.0f);
      CHECK(b.labels[i][static_cast<std::size_t>(b.kind[i])] == 1.0f);
    }
  }
  CHECK(untouched == 10);
  for (int c : per_kind) CHECK(c == 10);
  const auto again = sample_pretext_batch(windows, TransformParams{}, 5);
  CHECK(again.inputs == b.inputs);
  CHECK(again.kind == b.kind);
}
