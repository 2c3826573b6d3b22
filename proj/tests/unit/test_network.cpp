#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "support.hpp"
#include "valerian/checkpoint.hpp"
#include "valerian/network.hpp"

using namespace valerian;
using namespace valerian::testing;

namespace {

std::vector<const Matrix<float>*> pointers(const std::vector<Matrix<float>>& v) {
  std::vector<const Matrix<float>*> out;
  for (const auto& x : v) out.push_back(&x);
  return out;
}

std::vector<Matrix<float>> windows_for(const ExtractorConfig& cfg, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Matrix<float>> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(random_window(static_cast<std::size_t>(cfg.input_steps), static_cast<std::size_t>(cfg.input_channels), rng));
  }
  return out;
}

}  // namespace

TEST_CASE("parameter counts fall in the expected bands") {
  const auto full = ExtractorConfig::full();
  const auto reduced = ExtractorConfig::reduced();
  CHECK(full.conv_output_steps() == 84);
  const double f = static_cast<double>(full.parameter_count());
  const double r = static_cast<double>(reduced.parameter_count());
  CHECK(f > 296000 * 0.9);
  CHECK(f < 296000 * 1.1);
  CHECK(r > 56000 * 0.9);
  CHECK(r < 56000 * 1.1);

  // Hand count of the full variant: conv (k * in * out + out) and LSTM 4H(in + H + 1).
  std::size_t expect = 5 * 6 * 64 + 64 + 3 * (5 * 64 * 64 + 64);
  expect += 4 * 128 * (64 + 128 + 1) + 4 * 128 * (128 + 128 + 1);
  CHECK(full.parameter_count() == expect);
}

TEST_CASE("extractor config validation") {
  auto c = ExtractorConfig::full();
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ExtractorConfig::full();
  c.lstm_layers = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ExtractorConfig::full();
  c.input_steps = 16;  // no steps left after four kernel-5 convolutions
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("init is deterministic and shapes heads per subject") {
  std::vector<std::vector<int>> classes(13, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  classes[4] = {0, 2, 5};
  const auto a = init_model<float>(ExtractorConfig::reduced(), classes, 9);
  const auto b = init_model<float>(ExtractorConfig::reduced(), classes, 9);
  CHECK(a == b);
  CHECK(a.heads.size() == 13);
  CHECK(a.heads[0].out() == 10);
  CHECK(a.heads[0].in == 64);
  CHECK(a.heads[4].out() == 3);
  CHECK(a.heads[4].local_index(5) == 2);
  CHECK(a.heads[4].local_index(1) == -1);
  for (float v : a.heads[0].bias()) CHECK(v == 0.0f);
  CHECK(a.pretext.out() == 8);
  const auto c = init_model<float>(ExtractorConfig::reduced(), classes, 10);
  CHECK_FALSE(a.theta == c.theta);
}

TEST_CASE("forward: simplex rows, determinism, zero head, dropout") {
  auto cfg = gradcheck_config();
  cfg.dropout = 0.5;
  auto m = init_model<double>(cfg, {{0, 1, 2}}, 4);
  const auto ws = windows_for(cfg, 9, 1);
  const auto xs = pointers(ws);
  const auto p1 = forward(m, 0, xs, Mode::Eval);
  const auto p2 = forward(m, 0, xs, Mode::Eval);
  CHECK(p1.p == p2.p);
  CHECK(p1.z.rows() == 9);
  CHECK(p1.z.cols() == 8);
  for (std::size_t i = 0; i < 9; ++i) {
    double s = 0.0;
    for (double v : p1.p.row(i)) {
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-5);
  }
  Rng drop(1);
  const auto t = forward(m, 0, xs, Mode::Train, &drop);
  CHECK_FALSE(t.p == p1.p);
  CHECK(t.z == p1.z);  // features are reported before dropout
  CHECK_THROWS_AS(forward(m, 0, xs, Mode::Train), ConfigError);

  std::fill(m.heads[0].params.begin(), m.heads[0].params.end(), 0.0);
  const auto u = forward(m, 0, xs, Mode::Eval);
  for (double v : u.p.values()) CHECK(v == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("features: finite, deterministic, chunked consistently") {
  const auto cfg = gradcheck_config();
  const auto m = init_model<float>(cfg, {{0, 1}}, 5);
  const auto ws = windows_for(cfg, 300, 2);  // spans more than one inference chunk
  const auto xs = pointers(ws);
  const auto z = features(m, xs);
  CHECK(z.rows() == 300);
  for (double v : z.values()) CHECK(std::isfinite(v));
  const auto single = features(m, std::span<const Matrix<float>* const>(xs.data() + 280, 1));
  for (std::size_t j = 0; j < z.cols(); ++j) CHECK(single(0, j) == z(280, j));

  Matrix<float> wrong(cfg.input_steps + 1, cfg.input_channels);
  const Matrix<float>* bad[] = {&wrong};
  CHECK_THROWS_AS(features(m, bad), ConfigError);
  CHECK_THROWS_AS(forward(m, 3, xs, Mode::Eval), ConfigError);
}

TEST_CASE("float and double paths agree") {
  const auto cfg = gradcheck_config();
  const auto mf = init_model<float>(cfg, {{0, 1, 2}}, 6);
  const auto md = convert_model<double>(mf);
  const auto ws = windows_for(cfg, 5, 3);
  const auto xs = pointers(ws);
  const auto pf = forward(mf, 0, xs, Mode::Eval);
  const auto pd = forward(md, 0, xs, Mode::Eval);
  for (std::size_t i = 0; i < pf.p.size(); ++i) CHECK(pf.p.values()[i] == doctest::Approx(pd.p.values()[i]).epsilon(1e-4));
  CHECK(convert_model<float>(md) == mf);
}

TEST_CASE("dropout mask statistics") {
  Rng rng(7);
  const auto mask = dropout_mask<double>(100000, 0.25, rng);
  std::size_t zeros = 0;
  for (double v : mask) {
    if (v == 0.0) {
      ++zeros;
    } else {
      CHECK(v == doctest::Approx(1.0 / 0.75));
    }
  }
  CHECK(std::abs(static_cast<double>(zeros) / 100000.0 - 0.25) < 0.01);
}

TEST_CASE("gradient check on the small extractor") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto out = gradcheck_batch(seed);
    CHECK(out.parameters > 1000);
    CHECK(out.max_relative_error < 1e-4);
  }
}

TEST_CASE("gradient check with strided convolutions and stacked LSTMs") {
  auto cfg = gradcheck_config();
  cfg.input_steps = 31;
  cfg.conv_layers = 3;
  cfg.conv_channels = 5;
  cfg.kernel_size = 3;
  cfg.stride = 2;
  cfg.lstm_layers = 2;
  cfg.lstm_hidden = 6;
  const auto out = gradcheck_batch(21, cfg);
  CHECK(out.max_relative_error < 1e-4);
}

TEST_CASE("checkpoint round-trip and corruption") {
  const auto dir = std::filesystem::temp_directory_path() / "valerian-test-checkpoint";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  auto m = init_model<float>(gradcheck_config(), {{0, 1, 2}, {1, 3}}, 8);
  m.head_subjects = {"S1", "S2"};
  NormalizationStats stats;
  stats.center = {1, 2, 3, 4, 5, 6};
  stats.scale = {1, 1, 2, 2, 3, 3};
  stats.clamped = {false, false, true, false, false, false};
  m.normalization = stats;
  save_model(m, dir / "m.valm", {"valerian", 25, 77});
  CheckpointMeta meta;
  CHECK(load_model(dir / "m.valm", &meta) == m);
  CHECK(meta == CheckpointMeta{"valerian", 25, 77});

  {
    std::ofstream f(dir / "bad.valm", std::ios::binary);
    f << "VALD";
  }
  CHECK_THROWS_AS(load_model(dir / "bad.valm"), FormatError);
  std::filesystem::copy_file(dir / "m.valm", dir / "short.valm");
  std::filesystem::resize_file(dir / "short.valm", 40);
  CHECK_THROWS_AS(load_model(dir / "short.valm"), FormatError);
}
