// Acceptance runner: one PASS/FAIL line per criterion, SKIP for the ones that
// need external data. Exit status is non-zero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "support.hpp"
#include "valerian/evaluation.hpp"
#include "valerian/loso.hpp"
#include "valerian/transforms.hpp"

using namespace valerian;
using namespace valerian::testing;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

std::string fmt(double v, int digits = 3) {
  std::ostringstream s;
  s.precision(digits);
  s << std::fixed << v;
  return s.str();
}

std::string sci(double v) {
  std::ostringstream s;
  s.precision(2);
  s << std::scientific << v;
  return s.str();
}

// ---------------------------------------------------------------------------

Outcome formula_oracles() {
  Outcome o;
  Rng rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 12, c = 2 + rng() % 6;
    auto p = random_simplex_rows(n, c, rng);
    const auto t = random_simplex_rows(n, c, rng);
    std::vector<int> y(n);
    for (auto& v : y) v = static_cast<int>(rng() % c);
    if (trial % 10 == 0) p(0, static_cast<std::size_t>(y[0])) = 0.0;  // exercises the probability floor
    worst = std::max(worst, std::abs(cross_entropy(p, y) - oracle_cross_entropy(p, y)));
    worst = std::max(worst, std::abs(elr_loss(p, t) - oracle_elr(p, t)));

    // Ensemble: t <- beta t + (1 - beta) p on a random subset, other rows untouched.
    const double beta = std::uniform_real_distribution<double>(0.0, 0.99)(rng);
    EnsembleState ens(beta);
    std::vector<std::int64_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<std::int64_t>(3 * i + 1);
    const auto d = ens.add_domain("S", ids, c);
    Matrix<double> expect(n, c);
    for (int step = 0; step < 3; ++step) {
      std::vector<std::int64_t> some;
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < n; ++i) {
        if (rng() % 2) {
          some.push_back(ids[i]);
          rows.push_back(i);
        }
      }
      if (some.empty()) continue;
      const auto q = random_simplex_rows(some.size(), c, rng);
      ens.update(d, some, q);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t j = 0; j < c; ++j) expect(rows[r], j) = beta * expect(rows[r], j) + (1.0 - beta) * q(r, j);
      }
    }
    for (std::size_t i = 0; i < expect.size(); ++i) {
      worst = std::max(worst, std::abs(ens.table(d).values()[i] - expect.values()[i]));
    }

    auto rp = random_problem(1000 + static_cast<std::uint64_t>(trial));
    const LossWeights w{std::uniform_real_distribution<double>(0.0, 1.0)(rng),
                        std::uniform_real_distribution<double>(0.0, 5.0)(rng), 0.7};
    for (std::size_t k = 0; k < 2; ++k) {
      worst = std::max(worst, std::abs(head_loss(rp.model, rp.tasks[k], rp.ensemble, w) - oracle_objective(rp, {k}, {k}, w)));
    }
    worst = std::max(worst, std::abs(extractor_loss(rp.model, rp.tasks, rp.ensemble, w) -
                                     oracle_objective(rp, {0, 1}, {0, 1}, w)));
  }
  o.require(worst <= 1e-10, "max deviation " + sci(worst));
  if (o.pass) o.detail = "100 inputs, max deviation " + sci(worst);
  return o;
}

Outcome gradient_check() {
  Outcome o;
  double worst = 0.0;
  std::size_t params = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto r = gradcheck_batch(500 + seed);
    worst = std::max(worst, r.max_relative_error);
    params = r.parameters;
  }
  o.require(worst < 1e-4, "max relative error " + sci(worst));
  if (o.pass) o.detail = "5 batches x " + std::to_string(params) + " parameters, max relative error " + sci(worst);
  return o;
}

SubjectDomain labelled_domain(int classes, int per_class) {
  SubjectDomain d;
  d.subject_id = "S";
  d.num_classes = classes;
  std::int64_t id = 0;
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      SensorWindow w;
      w.values = Matrix<float>(1, 1);
      w.subject_id = "S";
      w.clean_label = c;
      w.window_id = id++;
      d.windows.push_back(std::move(w));
    }
  }
  return d;
}

bool row_stochastic_exact(const NoiseTransitionMatrix& t) {
  for (std::size_t i = 0; i < t.matrix.rows(); ++i) {
    double s = 0.0;
    for (double v : t.matrix.row(i)) {
      if (v < 0.0) return false;
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-12) return false;
  }
  return true;
}

Outcome noise_suite() {
  Outcome o;
  for (int c = 2; c <= 12; ++c) {
    for (double tau : {0.0, 0.1, 0.4, 0.8}) {
      ConfusionPairs pairs;
      for (int i = 0; i < c; ++i) pairs[i] = (i + 1 + i % 2) % c == i ? (i + 1) % c : (i + 1 + i % 2) % c;
      o.require(row_stochastic_exact(symmetric_matrix(c, tau)), "symmetric C=" + std::to_string(c));
      o.require(row_stochastic_exact(asymmetric_matrix(c, tau, pairs)), "asymmetric C=" + std::to_string(c));
    }
  }

  double worst_rate = 0.0;
  const auto dom = labelled_domain(4, 10000);
  for (const auto& t : {symmetric_matrix(4, 0.4), asymmetric_matrix(4, 0.4, {{0, 1}, {1, 2}, {2, 3}, {3, 0}})}) {
    const auto r = inject(dom, t, 21);
    std::vector<int> flips(4, 0);
    for (const auto& rec : r.records) flips[static_cast<std::size_t>(rec.original)] += rec.flipped ? 1 : 0;
    for (int f : flips) worst_rate = std::max(worst_rate, std::abs(f / 10000.0 - 0.4));
  }
  o.require(worst_rate <= 0.015, "flip rate off by " + fmt(worst_rate, 4));

  const auto big = labelled_domain(5, 20000);
  double worst_t = 0.0;
  for (const auto& t : {symmetric_matrix(5, 0.4), asymmetric_matrix(5, 0.4, {{0, 2}, {1, 0}, {2, 4}, {3, 1}, {4, 3}})}) {
    const auto r = inject(big, t, 99);
    std::vector<int> clean, noisy;
    for (const auto& rec : r.records) {
      clean.push_back(rec.original);
      noisy.push_back(rec.assigned);
    }
    const auto e = empirical_transition(clean, noisy, 5);
    for (std::size_t i = 0; i < e.matrix.size(); ++i) {
      worst_t = std::max(worst_t, std::abs(e.matrix.values()[i] - t.matrix.values()[i]));
    }
  }
  o.require(worst_t < 0.01, "empirical T off by " + fmt(worst_t, 4));
  if (o.pass) o.detail = "flip-rate error " + fmt(worst_rate, 4) + ", transition error " + fmt(worst_t, 4);
  return o;
}

Outcome transform_suite() {
  Outcome o;
  Rng rng(7);
  const TransformParams params;
  double worst_norm = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto w = random_window(100 + seed % 7, 6, rng);
    for (auto kind : {TransformKind::Reversed, TransformKind::Negated}) {
      const auto once = apply_transform(w, kind, params, seed);
      o.require(!(once == w) && apply_transform(once, kind, params, seed + 1) == w, "involution");
    }
    const auto r = apply_transform(w, TransformKind::Rotated, params, seed);
    for (std::size_t i = 0; i < w.rows(); ++i) {
      for (std::size_t g = 0; g < 6; g += 3) {
        double a = 0.0, b = 0.0;
        for (std::size_t j = g; j < g + 3; ++j) {
          a += static_cast<double>(w(i, j)) * w(i, j);
          b += static_cast<double>(r(i, j)) * r(i, j);
        }
        worst_norm = std::max(worst_norm, std::abs(std::sqrt(a) - std::sqrt(b)));
      }
    }
    const auto rows_sorted = [](const Matrix<float>& m) {
      std::vector<std::vector<float>> rows;
      for (std::size_t i = 0; i < m.rows(); ++i) rows.emplace_back(m.row(i).begin(), m.row(i).end());
      std::sort(rows.begin(), rows.end());
      return rows;
    };
    o.require(rows_sorted(apply_transform(w, TransformKind::Permuted, params, seed)) == rows_sorted(w),
              "permuted row multiset");
  }
  o.require(worst_norm <= 1e-5, "rotation norm error " + sci(worst_norm));

  const MixupConfig mix;
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double a = sample_mixup_weight(mix, rng);
    lo = std::min(lo, a);
    hi = std::max(hi, a);
  }
  o.require(lo >= 0.5 && hi <= 1.0, "mixup weight outside [0.5, 1]");
  bool contained = true;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto x1 = random_window(50, 6, rng), x2 = random_window(50, 6, rng);
    const auto m = mixup_pair(x1, x2, mix, seed);
    for (std::size_t i = 0; i < x1.size(); ++i) {
      const float a = x1.values()[i], b = x2.values()[i];
      contained = contained && m.mixed.values()[i] >= std::min(a, b) - 1e-6f && m.mixed.values()[i] <= std::max(a, b) + 1e-6f;
    }
  }
  o.require(contained, "mixup envelope");
  if (o.pass) o.detail = "rotation norm error " + sci(worst_norm) + ", mixup weights in [" + fmt(lo) + ", " + fmt(hi) + "]";
  return o;
}

Outcome training_invariants() {
  Outcome o;
  const auto data = inject_dataset(tiny_dataset(31), NoiseSpec{}.matrix(3), 32);
  const auto ecfg = tiny_extractor(data);
  auto cfg = tiny_train_config(3);
  int heads_calls = 0, extractor_calls = 0;
  bool theta_kept = true, heads_kept = true;
  Model<float> before;
  cfg.observer = [&](Phase phase, bool after, int, const Model<float>& m) {
    if (!after) {
      before = m;
      return;
    }
    if (phase == Phase::Heads) {
      ++heads_calls;
      theta_kept = theta_kept && m.theta == before.theta;
    } else {
      ++extractor_calls;
      for (std::size_t k = 0; k < m.heads.size(); ++k) heads_kept = heads_kept && m.heads[k].params == before.heads[k].params;
    }
  };
  const auto a = train_valerian(data, cfg, ecfg);
  o.require(heads_calls == 3 && extractor_calls == 3, "observer not called once per phase");
  o.require(theta_kept, "head phase moved the extractor");
  o.require(heads_kept, "extractor phase moved a head");

  cfg.observer = nullptr;
  const auto b = train_valerian(data, cfg, ecfg);
  double worst = 0.0;
  bool same_shape = a.report.epochs.size() == b.report.epochs.size();
  for (std::size_t e = 0; same_shape && e < a.report.epochs.size(); ++e) {
    const auto& x = a.report.epochs[e];
    const auto& y = b.report.epochs[e];
    same_shape = x.task_loss.size() == y.task_loss.size();
    worst = std::max(worst, std::abs(x.extractor_loss - y.extractor_loss));
    for (std::size_t k = 0; same_shape && k < x.task_loss.size(); ++k) worst = std::max(worst, std::abs(x.task_loss[k] - y.task_loss[k]));
  }
  o.require(same_shape && worst <= 1e-6, "reruns differ by " + sci(worst));

  const auto split = split_loso(data, data.domains[0].subject_id);
  auto tc = tiny_train_config(1);
  tc.use_pretrain = false;
  auto trained = train_valerian(split.source, tc, tiny_extractor(data));
  const auto kept = trained.model;
  AdaptConfig ac;
  ac.epochs = 10;
  ac.batch_size = 4;
  adapt_to_target(trained.model, sample_clean_shots(split.target, 2, 9).support, ac, split.target.subject_id);
  bool frozen = trained.model.theta == kept.theta;
  for (std::size_t k = 0; k < kept.heads.size(); ++k) frozen = frozen && trained.model.heads[k].params == kept.heads[k].params;
  o.require(frozen, "adaptation moved the extractor or a source head");
  if (o.pass) o.detail = "phases, adaptation and reruns bit-stable";
  return o;
}

// ---------------------------------------------------------------------------
// Seeded synthetic benchmark: 4 subjects, 4 classes, 50 Hz.

constexpr int kBenchTrials = 20;
constexpr double kBenchTrialSeconds = 6.0;
constexpr int kBenchEpochs = 40;
constexpr int kBenchSeeds = 5;

MultiSubjectDataset bench_dataset() {
  auto spec = SyntheticSpec::defaults(4, 4, 1.0);
  spec.trials_per_class = kBenchTrials;
  spec.trial_seconds = kBenchTrialSeconds;
  PreprocessConfig pc;
  pc.overlap_fraction = 0.5;
  return preprocess_dataset(generate_synthetic(spec, 7), pc).dataset;
}

LosoConfig bench_config(const MultiSubjectDataset& data) {
  LosoConfig lc;
  lc.methods = {Method::Valerian, Method::Bmtl};
  ExtractorConfig e;
  e.conv_layers = 2;
  e.conv_channels = 32;
  e.lstm_layers = 1;
  e.lstm_hidden = 32;
  lc.network = fit_extractor(e, data);
  auto& tc = lc.train;
  tc.optimizer = OptimizerConfig::adam(1e-3);
  tc.batch_size = 16;
  tc.epochs = kBenchEpochs;
  tc.si_epochs = kBenchEpochs;
  tc.weights.mu = 0.0;
  tc.weights.lambda = 1.0;
  tc.pretrain.epochs = 5;
  tc.pretrain.max_windows = 200;
  tc.checkpoint_every = 0;
  tc.report_every = kBenchEpochs;
  tc.seed = 3;
  lc.noise = NoiseSpec{NoisePattern::Asymmetric, 0.4, {}};
  lc.adapt.shots = 5;
  lc.seed = 3;
  return lc;
}

Outcome synthetic_benchmark() {
  Outcome o;
  const auto data = bench_dataset();
  const auto lc = bench_config(data);
  std::string detail;

  // (a) flags-off trainer on clean labels.
  const Monitor clean_monitor(data);
  const auto clean = train_valerian(data, TrainConfig::bmtl(lc.train), lc.network, &clean_monitor);
  const double clean_acc = clean.report.epochs.back().clean_accuracy.value_or(0.0);
  o.require(clean_acc >= 0.95, "(a) source accuracy " + fmt(clean_acc));
  detail += "(a) source accuracy " + fmt(clean_acc);

  // (b), (d) label correction and memorization over all four noisy subjects.
  const auto noisy = inject_dataset(data, lc.noise.matrix(4), 11);
  const Monitor monitor(noisy);
  const auto v = train_valerian(noisy, lc.train, lc.network, &monitor);
  const auto si = train_si(noisy, lc.train, lc.network, false, &monitor);
  const double vr = correct_labels(v.model, noisy).recall.value_or(0.0);
  const double sr = correct_labels(si.model, noisy).recall.value_or(0.0);
  const double vm = memorization_breakdown(v.model, noisy).noisy_memorized;
  const double sm = memorization_breakdown(si.model, noisy).noisy_memorized;
  o.require(vr >= 0.6 && vr - sr >= 0.10, "(b) recall " + fmt(vr) + " vs SI " + fmt(sr));
  o.require(vm < sm, "(d) memorized " + fmt(vm) + " vs SI " + fmt(sm));
  detail += "; (b) recall " + fmt(vr) + " vs SI " + fmt(sr) + "; (d) memorized " + fmt(vm) + " vs SI " + fmt(sm);

  // (c) paired seeds on the fold holding out the first subject.
  std::vector<double> v_acc, b_acc;
  const auto target = data.domains.front().subject_id;
  for (int r = 0; r < kBenchSeeds; ++r) {
    v_acc.push_back(run_fold(data, lc, target, r, Method::Valerian).front().accuracy.value_or(0.0));
    b_acc.push_back(run_fold(data, lc, target, r, Method::Bmtl).front().accuracy.value_or(0.0));
  }
  const double va = mean_std(v_acc).first, ba = mean_std(b_acc).first;
  o.require(va > ba, "(c) target accuracy " + fmt(va) + " vs BMTL " + fmt(ba));
  detail += "; (c) target accuracy " + fmt(va) + " vs BMTL " + fmt(ba);
  o.detail = detail + (o.pass ? "" : "; failed: " + o.detail);
  return o;
}

std::vector<double> two_clusters(std::size_t a, std::size_t b, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> lo(0.1, 0.02), hi(0.9, 0.02);
  std::vector<double> x;
  for (std::size_t i = 0; i < a; ++i) x.push_back(lo(rng));
  for (std::size_t i = 0; i < b; ++i) x.push_back(hi(rng));
  return x;
}

Outcome diagnostics() {
  Outcome o;
  double worst_mean = 0.0, worst_assign = 1.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t a = 200 + 50 * seed, b = 700 - 40 * seed;
    const auto x = two_clusters(a, b, seed);
    const auto g = gmm_loss_split(x);
    const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
    const double range = *hi - *lo;
    worst_mean = std::max({worst_mean, std::abs(g.mean[0] * range + *lo - 0.1), std::abs(g.mean[1] * range + *lo - 0.9)});
    std::size_t right = 0;
    for (std::size_t i = 0; i < x.size(); ++i) right += g.clean[i] == (i < a) ? 1 : 0;
    worst_assign = std::min(worst_assign, static_cast<double>(right) / static_cast<double>(x.size()));
    for (std::size_t i = 1; i < g.log_likelihood.size(); ++i) {
      o.require(g.log_likelihood[i] >= g.log_likelihood[i - 1] - 1e-9, "log-likelihood decreased");
    }
  }
  o.require(worst_mean <= 0.02, "mean error " + fmt(worst_mean, 4));
  o.require(worst_assign >= 0.99, "assignment accuracy " + fmt(worst_assign, 4));

  Rng rng(5);
  double worst_sum = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 200;
    const int c = 2 + static_cast<int>(rng() % 6);
    std::vector<int> pred(n), clean(n), noisy(n);
    std::vector<bool> flipped(n);
    for (std::size_t i = 0; i < n; ++i) {
      clean[i] = static_cast<int>(rng() % c);
      flipped[i] = rng() % 3 == 0;
      noisy[i] = flipped[i] ? (clean[i] + 1 + static_cast<int>(rng() % (c - 1))) % c : clean[i];
      pred[i] = static_cast<int>(rng() % c);
    }
    worst_sum = std::max(worst_sum, std::abs(memorization_breakdown(pred, clean, noisy, flipped).total() - 1.0));
  }
  o.require(worst_sum <= 1e-12, "memorization partition sums off by " + sci(worst_sum));
  if (o.pass) o.detail = "mean error " + fmt(worst_mean, 4) + ", assignment " + fmt(worst_assign, 4);
  return o;
}

struct Criterion {
  int id;
  std::string name;
  double limit_seconds;
  std::function<Outcome()> run;
};

}  // namespace

/// With arguments, runs only the listed criterion ids.
int main(int argc, char** argv) {
  set_warnings_enabled(false);
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  const std::vector<Criterion> criteria{
      {1, "formula oracles", 10.0, formula_oracles},
      {2, "gradient check", 120.0, gradient_check},
      {3, "noise suite", 30.0, noise_suite},
      {4, "transform suite", 30.0, transform_suite},
      {5, "training invariants", 300.0, training_invariants},
      {6, "synthetic benchmark", 1200.0, synthetic_benchmark},
      {7, "diagnostics", 10.0, diagnostics},
  };
  bool all = true;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.require(false, std::string("threw: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    o.require(secs <= c.limit_seconds, "took " + fmt(secs, 1) + " s, limit " + fmt(c.limit_seconds, 0) + " s");
    all = all && o.pass;
    std::printf("criterion %d %s: %s (%s; %.1f s)\n", c.id, c.name.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("criterion 8 reference-dataset ordering: SKIP (needs the external recordings)\n");
  return all ? 0 : 1;
}
