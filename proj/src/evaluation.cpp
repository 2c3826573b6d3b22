#include "valerian/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

#include "valerian/losses.hpp"

namespace valerian {

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

Metrics evaluate_predictions(std::span<const int> truth, std::span<const int> predicted, int num_classes) {
  if (truth.size() != predicted.size()) throw ConfigError("evaluate: prediction count mismatch");
  if (truth.empty()) throw ConfigError("evaluate: empty test set");
  const auto c = static_cast<std::size_t>(num_classes);
  Metrics m;
  m.count = truth.size();
  m.confusion = Matrix<long>(c, c, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= num_classes || predicted[i] < 0 || predicted[i] >= num_classes) {
      throw ConfigError("evaluate: class index out of range");
    }
    ++m.confusion(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(predicted[i]));
    if (truth[i] == predicted[i]) ++correct;
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
  double f1_sum = 0.0;
  int present = 0;
  m.per_class_f1.assign(c, std::nullopt);
  for (std::size_t k = 0; k < c; ++k) {
    long tp = m.confusion(k, k), support = 0, predicted_k = 0;
    for (std::size_t j = 0; j < c; ++j) {
      support += m.confusion(k, j);
      predicted_k += m.confusion(j, k);
    }
    if (support == 0 && predicted_k == 0) continue;
    const double f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(support + predicted_k);
    m.per_class_f1[k] = f1;
    f1_sum += f1;
    ++present;
  }
  m.macro_f1 = f1_sum / present;
  return m;
}

template <class Real>
std::optional<std::size_t> head_for_subject(const Model<Real>& m, const std::string& subject) {
  for (std::size_t k = 0; k < m.head_subjects.size(); ++k) {
    if (m.head_subjects[k] == subject) return k;
  }
  if (m.heads.size() == 1) return 0;
  return std::nullopt;
}

namespace {

std::vector<const Matrix<float>*> window_values(std::span<const SensorWindow> windows) {
  std::vector<const Matrix<float>*> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back(&w.values);
  return out;
}

template <class Real>
Matrix<double> probabilities(const Model<Real>& m, std::size_t head, std::span<const SensorWindow> windows) {
  const auto values = window_values(windows);
  return forward<Real>(m, head, values, Mode::Eval).p;
}

}  // namespace

template <class Real>
std::vector<int> predict(const Model<Real>& m, std::size_t head, std::span<const SensorWindow> windows) {
  std::vector<int> out(windows.size());
  if (windows.empty()) return out;
  const auto p = probabilities(m, head, windows);
  for (std::size_t i = 0; i < windows.size(); ++i) out[i] = m.heads[head].classes[argmax(p.row(i))];
  return out;
}

template <class Real>
Metrics evaluate(const Model<Real>& m, std::size_t head, std::span<const SensorWindow> windows, int num_classes) {
  if (windows.empty()) throw ConfigError("evaluate: empty test set");
  std::vector<int> truth;
  truth.reserve(windows.size());
  for (const auto& w : windows) {
    if (!w.clean_label) throw ConfigError("evaluate: window without a clean label");
    truth.push_back(*w.clean_label);
  }
  const auto pred = predict(m, head, windows);
  return evaluate_predictions(truth, pred, num_classes);
}

MemorizationBreakdown memorization_breakdown(std::span<const int> predicted, std::span<const int> clean,
                                             std::span<const int> noisy, const std::vector<bool>& flipped) {
  const std::size_t n = predicted.size();
  if (clean.size() != n || noisy.size() != n) throw ConfigError("memorization: length mismatch");
  if (flipped.size() != n) throw ConfigError("memorization: missing flip masks");
  MemorizationBreakdown b;
  if (n == 0) return b;
  for (std::size_t i = 0; i < n; ++i) {
    if (!flipped[i]) {
      (predicted[i] == clean[i] ? b.clean_correct : b.clean_wrong) += 1.0;
    } else if (predicted[i] == clean[i]) {
      b.noisy_correct += 1.0;
    } else if (predicted[i] == noisy[i]) {
      b.noisy_memorized += 1.0;
    } else {
      b.noisy_other += 1.0;
    }
  }
  const double d = static_cast<double>(n);
  for (double* v : {&b.clean_correct, &b.clean_wrong, &b.noisy_correct, &b.noisy_memorized, &b.noisy_other}) {
    *v /= d;
  }
  return b;
}

template <class Real>
MemorizationBreakdown memorization_breakdown(const Model<Real>& m, const MultiSubjectDataset& source) {
  std::vector<int> pred, clean, noisy;
  std::vector<bool> flipped;
  for (const auto& d : source.domains) {
    if (d.flip_mask.size() != d.windows.size()) {
      throw ConfigError("memorization: subject '" + d.subject_id + "' has no flip mask");
    }
    const auto head = head_for_subject(m, d.subject_id);
    if (!head) throw ConfigError("memorization: no head for subject '" + d.subject_id + "'");
    const auto p = predict(m, *head, d.windows);
    pred.insert(pred.end(), p.begin(), p.end());
    for (std::size_t i = 0; i < d.windows.size(); ++i) {
      const auto& w = d.windows[i];
      if (!w.clean_label || !w.noisy_label) throw ConfigError("memorization: clean and noisy labels required");
      clean.push_back(*w.clean_label);
      noisy.push_back(*w.noisy_label);
      flipped.push_back(d.flip_mask[i]);
    }
  }
  return memorization_breakdown(pred, clean, noisy, flipped);
}

GmmSplit gmm_loss_split(std::span<const double> losses, int max_iterations, double tolerance) {
  const std::size_t n = losses.size();
  if (n < 10) throw ConfigError("gmm: at least 10 samples are required");
  GmmSplit g;
  const auto [lo, hi] = std::minmax_element(losses.begin(), losses.end());
  const double range = *hi - *lo;
  g.normalized.resize(n);
  if (!(range > 1e-12)) {
    warn("gmm: all losses are equal; split is degenerate");
    g.degenerate = true;
    g.mean = {0.0, 0.0};
    g.variance = {kGmmVarianceFloor, kGmmVarianceFloor};
    g.weight = {0.5, 0.5};
    g.clean_posterior.assign(n, 0.5);
    g.clean.assign(n, false);
    return g;
  }
  for (std::size_t i = 0; i < n; ++i) g.normalized[i] = (losses[i] - *lo) / range;
  const auto& x = g.normalized;

  std::vector<double> sorted = x;
  std::sort(sorted.begin(), sorted.end());
  const auto quantile = [&](double q) { return sorted[static_cast<std::size_t>(q * static_cast<double>(n - 1))]; };
  std::array<double, 2> mu{quantile(0.25), quantile(0.75)};
  if (mu[1] - mu[0] < 1e-6) mu = {sorted.front(), sorted.back()};
  const double mean_all = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  double var_all = 0.0;
  for (double v : x) var_all += (v - mean_all) * (v - mean_all);
  var_all = std::max(var_all / static_cast<double>(n), kGmmVarianceFloor);
  std::array<double, 2> var{var_all, var_all}, pi{0.5, 0.5};

  std::vector<double> r(n);  // responsibility of component 0
  const auto log_normal = [](double v, double m, double s2) {
    return -0.5 * std::log(2.0 * std::numbers::pi * s2) - (v - m) * (v - m) / (2.0 * s2);
  };
  const auto e_step = [&]() {
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double a = std::log(pi[0]) + log_normal(x[i], mu[0], var[0]);
      const double b = std::log(pi[1]) + log_normal(x[i], mu[1], var[1]);
      const double mx = std::max(a, b);
      const double lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
      r[i] = std::exp(a - lse);
      ll += lse;
    }
    return ll;
  };

  double ll = e_step();
  g.log_likelihood.push_back(ll);
  for (int it = 0; it < max_iterations; ++it) {
    std::array<double, 2> nk{0.0, 0.0}, sx{0.0, 0.0};
    for (std::size_t i = 0; i < n; ++i) {
      nk[0] += r[i];
      nk[1] += 1.0 - r[i];
      sx[0] += r[i] * x[i];
      sx[1] += (1.0 - r[i]) * x[i];
    }
    for (int k = 0; k < 2; ++k) {
      if (nk[k] < 1e-12) continue;  // empty component keeps its parameters
      mu[k] = sx[k] / nk[k];
    }
    std::array<double, 2> sv{0.0, 0.0};
    for (std::size_t i = 0; i < n; ++i) {
      sv[0] += r[i] * (x[i] - mu[0]) * (x[i] - mu[0]);
      sv[1] += (1.0 - r[i]) * (x[i] - mu[1]) * (x[i] - mu[1]);
    }
    for (int k = 0; k < 2; ++k) {
      if (nk[k] >= 1e-12) var[k] = std::max(sv[k] / nk[k], kGmmVarianceFloor);
      pi[k] = std::clamp(nk[k] / static_cast<double>(n), 1e-12, 1.0);
    }
    const double next = e_step();
    g.log_likelihood.push_back(next);
    g.iterations = it + 1;
    const bool converged = std::abs(next - ll) < tolerance;
    ll = next;
    if (converged) break;
  }

  const std::size_t c = mu[0] <= mu[1] ? 0 : 1;
  g.mean = {mu[c], mu[1 - c]};
  g.variance = {var[c], var[1 - c]};
  const double total = pi[0] + pi[1];
  g.weight = {pi[c] / total, pi[1 - c] / total};
  g.clean_posterior.resize(n);
  g.clean.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    g.clean_posterior[i] = c == 0 ? r[i] : 1.0 - r[i];
    g.clean[i] = g.clean_posterior[i] > 0.5;
  }
  return g;
}

template <class Real>
std::vector<double> per_sample_losses(const Model<Real>& m, std::size_t head, std::span<const SensorWindow> windows) {
  std::vector<double> out(windows.size());
  if (windows.empty()) return out;
  const auto p = probabilities(m, head, windows);
  const auto& h = m.heads[head];
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const auto y = windows[i].observed_label();
    if (!y) throw ConfigError("losses: window without a label");
    const int j = h.local_index(*y);
    out[i] = -std::log(std::max(j < 0 ? 0.0 : p(i, static_cast<std::size_t>(j)), kProbabilityFloor));
  }
  return out;
}

template <class Real>
CorrectionReport correct_labels(const Model<Real>& m, const MultiSubjectDataset& source) {
  CorrectionReport rep;
  rep.relabeled = source;
  const auto c = static_cast<std::size_t>(source.schema.num_classes());
  rep.confusion = Matrix<long>(c, c, 0);
  std::size_t scored = 0, agree = 0;
  for (auto& d : rep.relabeled.domains) {
    const auto head = head_for_subject(m, d.subject_id);
    if (!head) throw ConfigError("correct_labels: no head for subject '" + d.subject_id + "'");
    const auto pred = predict(m, *head, d.windows);
    SubjectCorrection sc;
    sc.subject_id = d.subject_id;
    sc.windows = d.windows.size();
    std::size_t sub_scored = 0, sub_agree = 0;
    for (std::size_t i = 0; i < d.windows.size(); ++i) {
      auto& w = d.windows[i];
      w.corrected_label = pred[i];
      if (!w.clean_label) continue;
      ++sub_scored;
      if (pred[i] == *w.clean_label) ++sub_agree;
      ++rep.confusion(static_cast<std::size_t>(*w.clean_label), static_cast<std::size_t>(pred[i]));
      if (i < d.flip_mask.size() && d.flip_mask[i]) {
        ++sc.flipped;
        if (pred[i] == *w.clean_label) ++sc.recovered;
      }
    }
    if (sc.flipped > 0) sc.recall = static_cast<double>(sc.recovered) / static_cast<double>(sc.flipped);
    if (sub_scored > 0) sc.clean_accuracy = static_cast<double>(sub_agree) / static_cast<double>(sub_scored);
    rep.flipped += sc.flipped;
    rep.recovered += sc.recovered;
    scored += sub_scored;
    agree += sub_agree;
    rep.subjects.push_back(sc);
  }
  if (rep.flipped > 0) rep.recall = static_cast<double>(rep.recovered) / static_cast<double>(rep.flipped);
  if (scored > 0) rep.clean_accuracy = static_cast<double>(agree) / static_cast<double>(scored);
  return rep;
}

void AdaptConfig::validate() const {
  if (shots < 1) throw ConfigError("adapt: shots must be >= 1");
  if (epochs < 0) throw ConfigError("adapt: epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("adapt: batch_size must be >= 1");
  optimizer.validate();
}

template <class Real>
AdaptResult adapt_to_target(Model<Real>& m, std::span<const SensorWindow> support, const AdaptConfig& cfg,
                            const std::string& target_subject) {
  cfg.validate();
  if (support.empty()) throw ConfigError("adapt: empty support set");
  std::set<int> needed;
  for (const auto& w : support) {
    if (!w.clean_label) throw ConfigError("adapt: support window without a clean label");
    needed.insert(*w.clean_label);
  }
  Rng rng(mix_seed(cfg.seed, "adapt"));
  AdaptResult res;
  res.shots_used = support.size();
  res.epochs = cfg.epochs;

  const auto f = static_cast<std::size_t>(m.config.feature_dim());
  Head<Real> head;
  std::vector<std::size_t> source_heads;
  for (std::size_t k = 0; k < m.heads.size(); ++k) {
    if (k < m.head_subjects.size() && m.head_subjects[k].rfind("target:", 0) == 0) continue;
    source_heads.push_back(k);
  }
  if (cfg.head_init == HeadInit::ReuseRandomSourceHead && !source_heads.empty()) {
    const std::size_t pick = source_heads[std::uniform_int_distribution<std::size_t>(0, source_heads.size() - 1)(rng)];
    const auto& candidate = m.heads[pick];
    const bool covers = std::all_of(needed.begin(), needed.end(),
                                    [&](int c) { return candidate.local_index(c) >= 0; });
    if (covers) {
      head = candidate;
      res.reused = true;
      res.source_head = pick;
    } else {
      warn("adapt: source head " + std::to_string(pick) + " does not cover the support classes; using a fresh head");
    }
  }
  if (!res.reused) head = init_head<Real>(std::vector<int>(needed.begin(), needed.end()), f, mix_seed(cfg.seed, "fresh-head"));

  m.heads.push_back(std::move(head));
  m.head_subjects.resize(m.heads.size() - 1);
  m.head_subjects.push_back("target:" + target_subject);
  res.head = m.heads.size() - 1;

  const auto values = window_values(support);
  const auto z = features(m, values);
  const std::size_t n = support.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Optimizer opt(cfg.optimizer, m.heads[res.head].params.size());
  ObjectiveOptions oo;
  oo.weights.mu = 0.0;
  oo.weights.lambda = 0.0;
  oo.grad_heads = true;
  auto grad = Gradients<Real>::zeros_like(m);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < n; s += bs) {
      const std::size_t end = std::min(n, s + bs);
      TaskBatch tb;
      tb.head = res.head;
      std::vector<double> cached;
      cached.reserve((end - s) * f);
      for (std::size_t i = s; i < end; ++i) {
        tb.windows.push_back(values[order[i]]);
        tb.labels.push_back(*support[order[i]].clean_label);
        const auto row = z.row(order[i]);
        cached.insert(cached.end(), row.begin(), row.end());
      }
      oo.cached_features = cached;
      auto& g = grad.heads[res.head];
      std::fill(g.begin(), g.end(), Real(0));
      supervised_objective<Real>(m, std::span<const TaskBatch>(&tb, 1), nullptr, oo, &grad);
      opt.step<Real>(m.heads[res.head].params, g);
    }
  }
  return res;
}

template <class Real>
void export_embeddings(const Model<Real>& m, std::span<const SensorWindow> windows,
                       const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write embeddings to '" + path.string() + "'");
  const auto f = static_cast<std::size_t>(m.config.feature_dim());
  out << "window_id,subject_id,clean_label";
  for (std::size_t j = 0; j < f; ++j) out << ",f" << j;
  out << '\n';
  if (!windows.empty()) {
    const auto z = features(m, window_values(windows));
    char buf[32];
    for (std::size_t i = 0; i < windows.size(); ++i) {
      const auto& w = windows[i];
      out << w.window_id << ',' << w.subject_id << ',';
      if (w.clean_label) out << *w.clean_label;
      for (std::size_t j = 0; j < f; ++j) {
        std::snprintf(buf, sizeof buf, ",%.9g", z(i, j));
        out << buf;
      }
      out << '\n';
    }
  }
  if (!out) throw Error("failed writing embeddings to '" + path.string() + "'");
}

#define VALERIAN_EVAL_INSTANTIATE(Real)                                                                        \
  template std::optional<std::size_t> head_for_subject<Real>(const Model<Real>&, const std::string&);          \
  template std::vector<int> predict<Real>(const Model<Real>&, std::size_t, std::span<const SensorWindow>);     \
  template Metrics evaluate<Real>(const Model<Real>&, std::size_t, std::span<const SensorWindow>, int);        \
  template MemorizationBreakdown memorization_breakdown<Real>(const Model<Real>&, const MultiSubjectDataset&); \
  template std::vector<double> per_sample_losses<Real>(const Model<Real>&, std::size_t,                        \
                                                       std::span<const SensorWindow>);                         \
  template CorrectionReport correct_labels<Real>(const Model<Real>&, const MultiSubjectDataset&);              \
  template AdaptResult adapt_to_target<Real>(Model<Real>&, std::span<const SensorWindow>, const AdaptConfig&,  \
                                             const std::string&);                                              \
  template void export_embeddings<Real>(const Model<Real>&, std::span<const SensorWindow>,                     \
                                        const std::filesystem::path&);

VALERIAN_EVAL_INSTANTIATE(float)
VALERIAN_EVAL_INSTANTIATE(double)
#undef VALERIAN_EVAL_INSTANTIATE

}  // namespace valerian
