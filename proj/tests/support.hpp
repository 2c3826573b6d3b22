#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "valerian/dataset.hpp"
#include "valerian/losses.hpp"
#include "valerian/network.hpp"
#include "valerian/noise.hpp"
#include "valerian/preprocess.hpp"
#include "valerian/training.hpp"

namespace valerian::testing {

inline Matrix<float> random_window(std::size_t steps, std::size_t channels, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix<float> w(steps, channels);
  for (auto& v : w.values()) v = static_cast<float>(n(rng));
  return w;
}

/// Random point on the probability simplex of width c.
inline std::vector<double> random_simplex(std::size_t c, Rng& rng) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> p(c);
  double s = 0.0;
  for (auto& v : p) s += (v = e(rng));
  for (auto& v : p) v /= s;
  return p;
}

inline Matrix<double> random_simplex_rows(std::size_t n, std::size_t c, Rng& rng) {
  Matrix<double> m(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = random_simplex(c, rng);
    std::copy(p.begin(), p.end(), m.row(i).begin());
  }
  return m;
}

/// The small extractor used for finite-difference checks: 2 conv layers, one 8-unit LSTM.
inline ExtractorConfig gradcheck_config() {
  ExtractorConfig c;
  c.input_steps = 20;
  c.input_channels = 6;
  c.conv_layers = 2;
  c.conv_channels = 8;
  c.kernel_size = 5;
  c.stride = 1;
  c.lstm_layers = 1;
  c.lstm_hidden = 8;
  c.dropout = 0.0;
  return c;
}

/// A small multi-task problem with a warmed-up ensemble: 2 tasks with heads
/// over {0,1,2} and {0,1,2,3}, 3 and 4 windows, head weights kept away from 0.
struct RandomProblem {
  Model<double> model;
  std::vector<Matrix<float>> storage;
  std::vector<TaskBatch> tasks;
  EnsembleState ensemble{0.7};
  std::vector<std::vector<std::int64_t>> registered;  // ids per ensemble domain, in table order
};

inline RandomProblem random_problem(std::uint64_t seed, const ExtractorConfig& cfg = gradcheck_config(),
                                    std::size_t extra_rows = 0) {
  Rng rng(seed);
  RandomProblem rp;
  rp.model = init_model<double>(cfg, {{0, 1, 2}, {0, 1, 2, 3}}, seed);
  // Keep |.| differentiable at the probe points.
  std::uniform_real_distribution<double> u(0.05, 0.4);
  std::bernoulli_distribution sign(0.5);
  for (auto& h : rp.model.heads) {
    for (auto& v : h.params) v = sign(rng) ? u(rng) : -u(rng);
  }
  rp.storage.reserve(16);
  rp.tasks.resize(2);
  for (std::size_t k = 0; k < 2; ++k) {
    const std::size_t n = 3 + k;
    const auto c = rp.model.heads[k].out();
    std::vector<std::int64_t> all;
    for (std::size_t i = 0; i < n + extra_rows; ++i) all.push_back(static_cast<std::int64_t>(100 * k + 7 * i + 1));
    const auto d = rp.ensemble.add_domain("S" + std::to_string(k), all, c);
    rp.registered.push_back(all);
    rp.ensemble.update(d, all, random_simplex_rows(all.size(), c, rng));
    rp.ensemble.update(d, all, random_simplex_rows(all.size(), c, rng));
    auto& t = rp.tasks[k];
    t.head = k;
    t.ensemble_domain = d;
    std::vector<std::int64_t> pick = all;
    std::shuffle(pick.begin(), pick.end(), rng);
    t.ids.assign(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(n));
    for (std::size_t i = 0; i < n; ++i) {
      rp.storage.push_back(random_window(static_cast<std::size_t>(cfg.input_steps),
                                         static_cast<std::size_t>(cfg.input_channels), rng));
      t.windows.push_back(&rp.storage.back());
      t.labels.push_back(static_cast<int>(rng() % c));
    }
  }
  return rp;
}

// ---------------------------------------------------------------------------
// Brute-force oracles, written without the library's loss code.

inline double oracle_cross_entropy(const Matrix<double>& p, const std::vector<int>& y) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i) s += -std::log(std::max(p(i, static_cast<std::size_t>(y[i])), 1e-12));
  return s / static_cast<double>(p.rows());
}

inline double oracle_elr(const Matrix<double>& p, const Matrix<double>& t) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < p.cols(); ++j) dot += p(i, j) * t(i, j);
    s += std::log(1.0 - std::min(dot, 1.0 - 1e-6));
  }
  return s / static_cast<double>(p.rows());
}

/// Head probabilities from extractor features, with the affine map and softmax done by hand.
inline Matrix<double> oracle_probs(const Model<double>& m, const TaskBatch& t) {
  const auto z = features(m, t.windows);
  const auto& h = m.heads[t.head];
  Matrix<double> p(z.rows(), h.out());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < h.out(); ++j) {
      double a = h.params[h.out() * h.in + j];
      for (std::size_t q = 0; q < h.in; ++q) a += h.params[j * h.in + q] * z(i, q);
      p(i, j) = a;
      mx = std::max(mx, a);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < h.out(); ++j) s += (p(i, j) = std::exp(p(i, j) - mx));
    for (std::size_t j = 0; j < h.out(); ++j) p(i, j) /= s;
  }
  return p;
}

inline Matrix<double> oracle_rows(const RandomProblem& rp, const TaskBatch& t) {
  const auto& table = rp.ensemble.table(t.ensemble_domain);
  const auto& reg = rp.registered[t.ensemble_domain];
  Matrix<double> out(t.ids.size(), table.cols());
  for (std::size_t i = 0; i < t.ids.size(); ++i) {
    const auto r = static_cast<std::size_t>(std::find(reg.begin(), reg.end(), t.ids[i]) - reg.begin());
    for (std::size_t j = 0; j < table.cols(); ++j) out(i, j) = table(r, j);
  }
  return out;
}

/// sum_k CE_k + mu * sum over l1_heads |phi|_1 + lambda * mean over all samples of log(1 - <p, t>).
inline double oracle_objective(const RandomProblem& rp, const std::vector<std::size_t>& task_ids,
                               const std::vector<std::size_t>& l1_heads, const LossWeights& w) {
  double ce = 0.0, elr_sum = 0.0, l1 = 0.0;
  std::size_t total = 0;
  for (std::size_t k : task_ids) {
    const auto& t = rp.tasks[k];
    const auto p = oracle_probs(rp.model, t);
    std::vector<int> local;
    for (int y : t.labels) local.push_back(rp.model.heads[t.head].local_index(y));
    ce += oracle_cross_entropy(p, local);
    elr_sum += oracle_elr(p, oracle_rows(rp, t)) * static_cast<double>(t.ids.size());
    total += t.ids.size();
  }
  for (std::size_t k : l1_heads) {
    for (double v : rp.model.heads[k].params) l1 += std::abs(v);
  }
  return ce + w.mu * l1 + w.lambda * elr_sum / static_cast<double>(total);
}

struct GradcheckOutcome {
  double max_relative_error = 0.0;
  std::size_t parameters = 0;
};

/// Compares analytic gradients of the full objective (CE + L1 + ELR over two
/// tasks) against central differences over every extractor and head parameter.
inline GradcheckOutcome gradcheck_batch(std::uint64_t seed, const ExtractorConfig& cfg = gradcheck_config(),
                                        double step = 1e-5) {
  auto rp = random_problem(seed, cfg);
  auto& m = rp.model;
  ObjectiveOptions opt;
  opt.weights = LossWeights{0.4, 3.0, 0.7};
  opt.l1_heads = {0, 1};
  opt.grad_theta = true;
  opt.grad_heads = true;
  auto grad = Gradients<double>::zeros_like(m);
  supervised_objective<double>(m, rp.tasks, &rp.ensemble, opt, &grad);

  ObjectiveOptions value_only = opt;
  value_only.grad_theta = value_only.grad_heads = false;
  const auto loss = [&]() { return supervised_objective<double>(m, rp.tasks, &rp.ensemble, value_only, nullptr).total; };

  GradcheckOutcome out;
  const auto check = [&](std::vector<double>& params, const std::vector<double>& analytic) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double keep = params[i];
      params[i] = keep + step;
      const double up = loss();
      params[i] = keep - step;
      const double down = loss();
      params[i] = keep;
      const double numeric = (up - down) / (2.0 * step);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6});
      out.max_relative_error = std::max(out.max_relative_error, std::abs(numeric - analytic[i]) / denom);
      ++out.parameters;
    }
  };
  check(m.theta, grad.theta);
  for (std::size_t k = 0; k < m.heads.size(); ++k) check(m.heads[k].params, grad.heads[k]);
  return out;
}

/// A few seconds of preprocessed synthetic data: 1-s windows at 50 Hz, 50% overlap.
inline MultiSubjectDataset tiny_dataset(std::uint64_t seed, int subjects = 3, int classes = 3, int trials = 2) {
  auto spec = SyntheticSpec::defaults(subjects, classes);
  spec.trials_per_class = trials;
  spec.trial_seconds = 4.0;
  PreprocessConfig pc;
  pc.window_seconds = 1.0;
  pc.overlap_fraction = 0.5;
  return preprocess_dataset(generate_synthetic(spec, seed), pc).dataset;
}

inline ExtractorConfig tiny_extractor(const MultiSubjectDataset& data) {
  ExtractorConfig e;
  e.conv_layers = 1;
  e.conv_channels = 4;
  e.kernel_size = 5;
  e.lstm_layers = 1;
  e.lstm_hidden = 4;
  return fit_extractor(e, data);
}

inline TrainConfig tiny_train_config(int epochs = 2) {
  TrainConfig c;
  c.optimizer = OptimizerConfig::adam(1e-3);
  c.batch_size = 8;
  c.epochs = epochs;
  c.si_epochs = epochs;
  c.stl_iterations = 5;
  c.pretrain.epochs = 1;
  c.pretrain.batch_size = 8;
  c.pretrain.max_windows = 20;
  c.checkpoint_every = 0;
  c.seed = 5;
  return c;
}

}  // namespace valerian::testing
