#include "valerian/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "valerian/checkpoint.hpp"

namespace valerian {

std::string method_name(Method m) {
  switch (m) {
    case Method::Valerian: return "valerian";
    case Method::Bmtl: return "bmtl";
    case Method::Stl: return "stl";
    case Method::Si: return "si";
    case Method::SiElr: return "si-elr";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::Valerian, Method::Bmtl, Method::Stl, Method::Si, Method::SiElr}) {
    if (method_name(m) == name) return m;
  }
  throw ConfigError("unknown method '" + name + "' (expected valerian, bmtl, stl, si or si-elr)");
}

bool method_uses_shots(Method m) { return m == Method::Valerian || m == Method::Bmtl || m == Method::Stl; }

void PretrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("pretrain: epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("pretrain: batch_size must be >= 1");
  if (!(validation_fraction >= 0 && validation_fraction < 1)) {
    throw ConfigError("pretrain: validation_fraction must be in [0, 1)");
  }
  if (max_windows < 0) throw ConfigError("pretrain: max_windows must be >= 0");
  optimizer.validate();
  transforms.validate();
}

TrainConfig TrainConfig::bmtl(TrainConfig base) {
  base.use_pretrain = false;
  base.use_elr = false;
  base.use_mixup = false;
  return base;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (si_epochs < 0) throw ConfigError("train: si_epochs must be >= 0");
  if (stl_iterations < 0) throw ConfigError("train: stl_iterations must be >= 0");
  if (!(validation_fraction >= 0 && validation_fraction < 1)) {
    throw ConfigError("train: validation_fraction must be in [0, 1)");
  }
  if (checkpoint_every < 0 || report_every < 0) throw ConfigError("train: checkpoint_every/report_every must be >= 0");
  if (!(mixup.alpha > 0)) throw ConfigError("train: mixup alpha must be > 0");
  optimizer.validate();
  stl_optimizer.validate();
  weights.validate();
  if (use_pretrain) pretrain.validate();
}

Monitor::Monitor(const MultiSubjectDataset& source) {
  has_clean_ = true;
  has_masks_ = true;
  for (const auto& d : source.domains) {
    auto& c = clean_.emplace_back();
    auto& o = observed_.emplace_back();
    for (const auto& w : d.windows) {
      if (!w.clean_label) has_clean_ = false;
      c.push_back(w.clean_label.value_or(-1));
      o.push_back(w.observed_label().value_or(-1));
    }
    if (d.flip_mask.size() != d.windows.size()) has_masks_ = false;
    flipped_.push_back(d.flip_mask);
  }
}

// ---------------------------------------------------------------------------

void TrainReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write training report to '" + path.string() + "'");
  std::size_t tasks = 0;
  for (const auto& e : epochs) tasks = std::max(tasks, e.task_loss.size());
  out << "epoch,extractor_loss";
  for (std::size_t k = 0; k < tasks; ++k) out << ",task_loss_" << k;
  out << ",noisy_accuracy,clean_accuracy,clean_correct,clean_wrong,noisy_correct,noisy_memorized,noisy_other,"
         "validation_accuracy,seconds\n";
  char buf[64];
  const auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  const auto opt = [&](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  for (const auto& e : epochs) {
    out << e.epoch << ',' << num(e.extractor_loss);
    for (std::size_t k = 0; k < tasks; ++k) out << ',' << (k < e.task_loss.size() ? num(e.task_loss[k]) : "");
    out << ',' << (e.monitored ? num(e.noisy_accuracy) : "") << ',' << opt(e.clean_accuracy);
    if (e.memorization) {
      const auto& m = *e.memorization;
      out << ',' << num(m.clean_correct) << ',' << num(m.clean_wrong) << ',' << num(m.noisy_correct) << ','
          << num(m.noisy_memorized) << ',' << num(m.noisy_other);
    } else {
      out << ",,,,,";
    }
    out << ',' << opt(e.validation_accuracy) << ',' << num(e.seconds) << '\n';
  }
  if (!out) throw Error("failed writing training report to '" + path.string() + "'");
}

std::string TrainReport::summary_json() const {
  nlohmann::ordered_json j;
  j["method"] = method;
  j["epochs"] = epochs.size();
  j["wall_seconds"] = wall_seconds;
  j["checkpoint"] = checkpoint.string();
  j["degenerate"] = degenerate;
  if (best_epoch) j["best_epoch"] = *best_epoch;
  if (best_validation_accuracy) j["best_validation_accuracy"] = *best_validation_accuracy;
  if (!pretext_auc.empty()) j["pretext_auc"] = pretext_auc;
  if (!epochs.empty()) {
    const auto& e = epochs.back();
    j["final_task_loss"] = e.task_loss;
    j["final_extractor_loss"] = e.extractor_loss;
    if (e.monitored) j["final_noisy_accuracy"] = e.noisy_accuracy;
    if (e.clean_accuracy) j["final_clean_accuracy"] = *e.clean_accuracy;
    if (e.memorization) j["final_noisy_memorized"] = e.memorization->noisy_memorized;
  }
  return j.dump(2);
}

// ---------------------------------------------------------------------------

double roc_auc(std::span<const double> scores, std::span<const int> positive) {
  if (scores.size() != positive.size()) throw ConfigError("auc: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Average ranks over ties, then Mann-Whitney U.
  std::vector<double> rank(scores.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  double pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (positive[i]) {
      pos += 1.0;
      rank_sum += rank[i];
    }
  }
  const double neg = static_cast<double>(scores.size()) - pos;
  if (pos == 0.0 || neg == 0.0) return 0.5;
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

/// Optimizer that either steps every minibatch or averages the epoch's
/// gradients into a single step.
class Stepper {
 public:
  Stepper(const OptimizerConfig& cfg, std::size_t size, UpdateSchedule schedule)
      : opt_(cfg, size), per_epoch_(schedule == UpdateSchedule::PerEpoch) {
    if (per_epoch_) acc_.assign(size, 0.0f);
  }

  void apply(std::span<float> params, std::span<const float> grad) {
    if (!per_epoch_) {
      opt_.step<float>(params, grad);
      return;
    }
    for (std::size_t i = 0; i < grad.size(); ++i) acc_[i] += grad[i];
    ++pending_;
  }

  void flush(std::span<float> params) {
    if (!per_epoch_ || pending_ == 0) return;
    for (auto& g : acc_) g /= static_cast<float>(pending_);
    opt_.step<float>(params, acc_);
    std::fill(acc_.begin(), acc_.end(), 0.0f);
    pending_ = 0;
  }

 private:
  Optimizer opt_;
  bool per_epoch_;
  std::vector<float> acc_;
  std::size_t pending_ = 0;
};

std::vector<const Matrix<float>*> values_of(std::span<const SensorWindow> windows) {
  std::vector<const Matrix<float>*> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back(&w.values);
  return out;
}

int observed_or_throw(const SensorWindow& w) {
  const auto y = w.observed_label();
  if (!y) throw ConfigError("train: window " + std::to_string(w.window_id) + " of subject '" + w.subject_id +
                            "' has no label");
  return *y;
}

std::vector<int> observed_classes(std::span<const SensorWindow> windows) {
  std::set<int> s;
  for (const auto& w : windows) s.insert(observed_or_throw(w));
  return {s.begin(), s.end()};
}

std::vector<std::int64_t> ids_of(std::span<const SensorWindow> windows) {
  std::vector<std::int64_t> ids;
  ids.reserve(windows.size());
  for (const auto& w : windows) ids.push_back(w.window_id);
  return ids;
}

/// Predicted global classes from cached features (eval mode).
std::vector<int> predict_cached(const Head<float>& h, const Matrix<double>& z) {
  const std::size_t n = z.rows(), c = h.out();
  std::vector<int> out(n);
  if (n == 0) return out;
  std::vector<float> zf(z.values().begin(), z.values().end()), logits(n * c);
  head_forward<float>(h, zf, n, logits);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (logits[i * c + j] > logits[i * c + best]) best = j;
    }
    out[i] = h.classes[best];
  }
  return out;
}

void gather_rows(const Matrix<double>& z, std::span<const std::size_t> rows, std::vector<double>& out) {
  for (std::size_t r : rows) {
    const auto row = z.row(r);
    out.insert(out.end(), row.begin(), row.end());
  }
}

void maybe_checkpoint(const TrainConfig& cfg, const Model<float>& m, const std::string& method, int epoch) {
  if (cfg.checkpoint_dir.empty() || cfg.checkpoint_every <= 0 || epoch % cfg.checkpoint_every != 0) return;
  std::filesystem::create_directories(cfg.checkpoint_dir);
  char name[64];
  std::snprintf(name, sizeof name, "%s_epoch_%04d.valm", method.c_str(), epoch);
  save_model(m, cfg.checkpoint_dir / name, {method, epoch, cfg.seed});
}

void finish_checkpoint(const TrainConfig& cfg, const Model<float>& m, TrainReport& report) {
  if (cfg.checkpoint_dir.empty()) return;
  std::filesystem::create_directories(cfg.checkpoint_dir);
  report.checkpoint = cfg.checkpoint_dir / (report.method + "_final.valm");
  save_model(m, report.checkpoint, {report.method, static_cast<int>(report.epochs.size()), cfg.seed});
}

[[noreturn]] void diverged(const TrainConfig& cfg, const Model<float>& last_finite, const std::string& method,
                           int epoch, const std::string& where) {
  std::string msg = method + ": non-finite loss in " + where + " at epoch " + std::to_string(epoch);
  if (!cfg.checkpoint_dir.empty()) {
    std::filesystem::create_directories(cfg.checkpoint_dir);
    const auto path = cfg.checkpoint_dir / (method + "_diverged.valm");
    save_model(last_finite, path, {method, epoch, cfg.seed});
    msg += "; last finite model saved to '" + path.string() + "'";
  }
  throw DivergenceError(msg);
}

void log_epoch(const TrainConfig& cfg, const std::string& method, const EpochRecord& e) {
  if (!cfg.verbose) return;
  double task = 0.0;
  for (double v : e.task_loss) task += v;
  if (!e.task_loss.empty()) task /= static_cast<double>(e.task_loss.size());
  std::fprintf(stderr, "[%s] epoch %d task %.4f extractor %.4f", method.c_str(), e.epoch, task, e.extractor_loss);
  if (e.monitored) std::fprintf(stderr, " acc(noisy) %.3f", e.noisy_accuracy);
  if (e.clean_accuracy) std::fprintf(stderr, " acc(clean) %.3f", *e.clean_accuracy);
  if (e.memorization) std::fprintf(stderr, " memorized %.3f", e.memorization->noisy_memorized);
  if (e.validation_accuracy) std::fprintf(stderr, " val %.3f", *e.validation_accuracy);
  std::fprintf(stderr, " (%.1fs)\n", e.seconds);
}

bool report_epoch(const TrainConfig& cfg, int epoch, int last) {
  return epoch == last || (cfg.report_every > 0 && epoch % cfg.report_every == 0);
}

/// Fills accuracy / memorization fields of an epoch record from per-domain predictions.
void monitor_epoch(EpochRecord& rec, const std::vector<std::vector<int>>& pred,
                   const std::vector<std::vector<int>>& observed, const Monitor* monitor,
                   const std::vector<std::vector<std::size_t>>* rows = nullptr) {
  std::size_t n = 0, agree = 0, clean_agree = 0;
  std::vector<int> all_pred, all_clean, all_noisy;
  std::vector<bool> all_flip;
  const bool clean = monitor && monitor->has_clean();
  const bool masks = clean && monitor->has_masks();
  for (std::size_t k = 0; k < pred.size(); ++k) {
    for (std::size_t i = 0; i < pred[k].size(); ++i) {
      const std::size_t src = rows ? (*rows)[k][i] : i;
      ++n;
      if (pred[k][i] == observed[k][i]) ++agree;
      if (!clean) continue;
      const int c = monitor->clean(k)[src];
      if (pred[k][i] == c) ++clean_agree;
      if (masks) {
        all_pred.push_back(pred[k][i]);
        all_clean.push_back(c);
        all_noisy.push_back(monitor->observed(k)[src]);
        all_flip.push_back(monitor->flipped(k)[src]);
      }
    }
  }
  if (n == 0) return;
  rec.monitored = true;
  rec.noisy_accuracy = static_cast<double>(agree) / static_cast<double>(n);
  if (clean) rec.clean_accuracy = static_cast<double>(clean_agree) / static_cast<double>(n);
  if (masks) rec.memorization = memorization_breakdown(all_pred, all_clean, all_noisy, all_flip);
}

/// Same-label windows of other subjects, for cross-subject MixUp partners.
class PartnerIndex {
 public:
  explicit PartnerIndex(const std::vector<std::vector<int>>& labels) {
    for (std::size_t k = 0; k < labels.size(); ++k) {
      for (std::size_t i = 0; i < labels[k].size(); ++i) {
        pool_[labels[k][i]].push_back({k, i});
      }
    }
  }

  /// Uniform draw among same-label windows of other subjects; nullopt if none.
  std::optional<std::pair<std::size_t, std::size_t>> draw(int label, std::size_t domain, Rng& rng) const {
    const auto it = pool_.find(label);
    if (it == pool_.end()) return std::nullopt;
    const auto& v = it->second;
    // Entries are grouped by domain, so the own-domain block is contiguous.
    const auto lo = std::lower_bound(v.begin(), v.end(), std::pair<std::size_t, std::size_t>{domain, 0});
    const auto hi = std::lower_bound(v.begin(), v.end(), std::pair<std::size_t, std::size_t>{domain + 1, 0});
    const auto own = static_cast<std::size_t>(hi - lo);
    const std::size_t others = v.size() - own;
    if (others == 0) return std::nullopt;
    std::size_t r = std::uniform_int_distribution<std::size_t>(0, others - 1)(rng);
    const auto before = static_cast<std::size_t>(lo - v.begin());
    if (r >= before) r += own;
    return v[r];
  }

 private:
  std::map<int, std::vector<std::pair<std::size_t, std::size_t>>> pool_;
};

}  // namespace

// ---------------------------------------------------------------------------

PretrainResult pretrain_self_supervised(Model<float>& m, std::span<const SensorWindow> windows,
                                        const PretrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  PretrainResult res;
  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(mix_seed(seed, "pretrain-split"));
  std::shuffle(order.begin(), order.end(), split_rng);
  const auto n_val = static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(windows.size())));
  std::vector<Matrix<float>> train, val;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_val ? val : train).push_back(windows[order[i]].values);

  Optimizer opt_theta(cfg.optimizer, m.theta.size());
  Optimizer opt_head(cfg.optimizer, m.pretext.params.size());
  Rng drop(mix_seed(seed, "pretrain-dropout"));
  Rng pick(mix_seed(seed, "pretrain-subsample"));
  auto grad = Gradients<float>::zeros_like(m);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int e = 0; e < cfg.epochs && !train.empty(); ++e) {
    std::vector<Matrix<float>> subset;
    std::span<const Matrix<float>> epoch_windows = train;
    if (cfg.max_windows > 0 && train.size() > static_cast<std::size_t>(cfg.max_windows)) {
      std::vector<std::size_t> idx(train.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), pick);
      for (int i = 0; i < cfg.max_windows; ++i) subset.push_back(train[idx[static_cast<std::size_t>(i)]]);
      epoch_windows = subset;
    }
    const auto batch = sample_pretext_batch(epoch_windows, cfg.transforms, mix_seed(seed, static_cast<std::uint64_t>(e)));
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t s = 0; s < batch.inputs.size(); s += bs) {
      const std::size_t end = std::min(batch.inputs.size(), s + bs);
      std::vector<const Matrix<float>*> xs;
      for (std::size_t i = s; i < end; ++i) xs.push_back(&batch.inputs[i]);
      std::fill(grad.theta.begin(), grad.theta.end(), 0.0f);
      std::fill(grad.pretext.begin(), grad.pretext.end(), 0.0f);
      loss_sum += pretext_objective<float>(m, xs, std::span(batch.labels).subspan(s, end - s), Mode::Train, &drop,
                                           &grad);
      opt_theta.step<float>(m.theta, grad.theta);
      opt_head.step<float>(m.pretext.params, grad.pretext);
      ++steps;
    }
    res.epoch_loss.push_back(loss_sum / static_cast<double>(std::max<std::size_t>(steps, 1)));
  }

  res.auc.fill(0.5);
  if (!val.empty()) {
    const auto vb = sample_pretext_batch(val, cfg.transforms, mix_seed(seed, "pretrain-validation"));
    std::vector<const Matrix<float>*> xs;
    for (const auto& x : vb.inputs) xs.push_back(&x);
    Matrix<double> scores;
    pretext_objective<float>(m, xs, vb.labels, Mode::Eval, nullptr, nullptr, &scores);
    for (int k = 0; k < kTransformCount; ++k) {
      std::vector<double> s(xs.size());
      std::vector<int> pos(xs.size());
      for (std::size_t i = 0; i < xs.size(); ++i) {
        s[i] = scores(i, static_cast<std::size_t>(k));
        pos[i] = vb.kind[i] == k ? 1 : 0;
      }
      res.auc[static_cast<std::size_t>(k)] = roc_auc(s, pos);
    }
  }
  res.theta = m.theta;
  res.pretext = m.pretext;
  return res;
}

ExtractorConfig fit_extractor(ExtractorConfig cfg, const MultiSubjectDataset& data) {
  for (const auto& d : data.domains) {
    if (!d.windows.empty()) {
      cfg.input_steps = static_cast<int>(d.windows.front().values.rows());
      cfg.input_channels = static_cast<int>(d.windows.front().values.cols());
      break;
    }
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------

TrainResult train_valerian(const MultiSubjectDataset& source, const TrainConfig& cfg, const ExtractorConfig& ecfg,
                           const Monitor* monitor, const std::vector<float>* pretrained) {
  cfg.validate();
  ecfg.validate();
  const auto t0 = Clock::now();
  const std::size_t K = source.domains.size();
  if (K == 0) throw ConfigError("train: no source subjects");
  const std::string method = (cfg.use_pretrain || cfg.use_elr || cfg.use_mixup) ? "valerian" : "bmtl";

  std::vector<std::vector<int>> classes, labels;
  for (const auto& d : source.domains) {
    if (d.windows.empty()) throw ConfigError("train: subject '" + d.subject_id + "' has no windows");
    classes.push_back(observed_classes(d.windows));
    auto& l = labels.emplace_back();
    for (const auto& w : d.windows) l.push_back(observed_or_throw(w));
  }
  TrainResult result;
  auto& m = result.model;
  m = init_model<float>(ecfg, classes, mix_seed(cfg.seed, "init"));
  m.head_subjects.clear();
  for (const auto& d : source.domains) m.head_subjects.push_back(d.subject_id);
  result.report.method = method;

  if (cfg.use_pretrain) {
    if (pretrained) {
      if (pretrained->size() != m.theta.size()) throw ConfigError("train: pretrained extractor has the wrong size");
      m.theta = *pretrained;
    } else {
      std::vector<SensorWindow> all;
      for (const auto& d : source.domains) all.insert(all.end(), d.windows.begin(), d.windows.end());
      const auto pre = pretrain_self_supervised(m, all, cfg.pretrain, mix_seed(cfg.seed, "pretrain"));
      result.report.pretext_auc.assign(pre.auc.begin(), pre.auc.end());
    }
  }

  LossWeights w = cfg.weights;
  if (!cfg.use_elr) w.lambda = 0.0;
  EnsembleState ensemble(w.beta);
  std::vector<std::vector<std::int64_t>> ids;
  std::vector<std::vector<const Matrix<float>*>> values;
  for (std::size_t k = 0; k < K; ++k) {
    ids.push_back(ids_of(source.domains[k].windows));
    values.push_back(values_of(source.domains[k].windows));
    ensemble.add_domain(source.domains[k].subject_id, ids[k], m.heads[k].out());
  }
  const PartnerIndex partners(labels);

  Stepper theta_step(cfg.optimizer, m.theta.size(), cfg.updates);
  Rng shuffle_rng(mix_seed(cfg.seed, "shuffle"));
  Rng drop_rng(mix_seed(cfg.seed, "dropout"));
  Rng mix_rng(mix_seed(cfg.seed, "mixup"));
  auto grad = Gradients<float>::zeros_like(m);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  std::vector<std::size_t> all_heads(K);
  std::iota(all_heads.begin(), all_heads.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto te = Clock::now();
    EpochRecord rec;
    rec.epoch = epoch;

    // Phase A: heads one at a time on cached features, extractor frozen.
    if (cfg.observer) cfg.observer(Phase::Heads, false, epoch, m);
    std::vector<Matrix<double>> z(K);
    for (std::size_t k = 0; k < K; ++k) z[k] = features(m, values[k]);
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t n = values[k].size();
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      Stepper head_step(cfg.optimizer, m.heads[k].params.size(), cfg.updates);
      ObjectiveOptions oo;
      oo.weights = w;
      oo.l1_heads = {k};
      oo.mode = Mode::Train;
      oo.dropout_rng = &drop_rng;
      oo.update_ensemble = true;
      oo.grad_heads = true;
      double loss = 0.0;
      std::size_t steps = 0;
      for (std::size_t s = 0; s < n; s += bs) {
        const std::size_t end = std::min(n, s + bs);
        const std::span<const std::size_t> rows(order.data() + s, end - s);
        TaskBatch tb;
        tb.head = k;
        tb.ensemble_domain = k;
        for (std::size_t r : rows) {
          tb.windows.push_back(values[k][r]);
          tb.labels.push_back(labels[k][r]);
          tb.ids.push_back(ids[k][r]);
        }
        std::vector<double> cached;
        cached.reserve(rows.size() * z[k].cols());
        gather_rows(z[k], rows, cached);
        oo.cached_features = cached;
        auto& g = grad.heads[k];
        std::fill(g.begin(), g.end(), 0.0f);
        try {
          loss += supervised_objective<float>(m, std::span<const TaskBatch>(&tb, 1), &ensemble, oo, &grad).total;
        } catch (const DivergenceError&) {
          diverged(cfg, m, method, epoch, "head " + std::to_string(k));
        }
        head_step.apply(m.heads[k].params, g);
        ++steps;
      }
      head_step.flush(m.heads[k].params);
      rec.task_loss.push_back(loss / static_cast<double>(std::max<std::size_t>(steps, 1)));
    }
    if (cfg.observer) cfg.observer(Phase::Heads, true, epoch, m);
    if (report_epoch(cfg, epoch, cfg.epochs)) {
      std::vector<std::vector<int>> pred;
      for (std::size_t k = 0; k < K; ++k) pred.push_back(predict_cached(m.heads[k], z[k]));
      monitor_epoch(rec, pred, labels, monitor);
    }

    // Phase B: shared extractor on combined, cross-subject mixed batches, heads frozen.
    if (cfg.observer) cfg.observer(Phase::Extractor, false, epoch, m);
    std::vector<std::vector<std::size_t>> order(K);
    std::size_t steps = 0;
    for (std::size_t k = 0; k < K; ++k) {
      order[k].resize(values[k].size());
      std::iota(order[k].begin(), order[k].end(), 0);
      std::shuffle(order[k].begin(), order[k].end(), shuffle_rng);
      steps = std::max(steps, (order[k].size() + bs - 1) / bs);
    }
    ObjectiveOptions ob;
    ob.weights = w;
    ob.l1_heads = all_heads;
    ob.mode = Mode::Train;
    ob.dropout_rng = &drop_rng;
    ob.update_ensemble = true;
    ob.grad_theta = true;
    double ext_loss = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<TaskBatch> tasks;
      std::vector<Matrix<float>> mixed;
      mixed.reserve(K * bs);
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t begin = s * bs;
        if (begin >= order[k].size()) continue;
        const std::size_t end = std::min(order[k].size(), begin + bs);
        TaskBatch tb;
        tb.head = k;
        tb.ensemble_domain = k;
        for (std::size_t i = begin; i < end; ++i) {
          const std::size_t r = order[k][i];
          const Matrix<float>* x = values[k][r];
          if (cfg.use_mixup) {
            if (const auto partner = partners.draw(labels[k][r], k, mix_rng)) {
              const double a = sample_mixup_weight(cfg.mixup, mix_rng);
              mixed.push_back(mixup_with_factor(*x, *values[partner->first][partner->second], a).mixed);
              x = &mixed.back();
            }
          }
          tb.windows.push_back(x);
          tb.labels.push_back(labels[k][r]);
          tb.ids.push_back(ids[k][r]);
        }
        tasks.push_back(std::move(tb));
      }
      std::fill(grad.theta.begin(), grad.theta.end(), 0.0f);
      try {
        ext_loss += supervised_objective<float>(m, tasks, &ensemble, ob, &grad).total;
      } catch (const DivergenceError&) {
        diverged(cfg, m, method, epoch, "extractor update");
      }
      theta_step.apply(m.theta, grad.theta);
    }
    theta_step.flush(m.theta);
    if (cfg.observer) cfg.observer(Phase::Extractor, true, epoch, m);
    rec.extractor_loss = ext_loss / static_cast<double>(std::max<std::size_t>(steps, 1));
    rec.seconds = seconds_since(te);
    log_epoch(cfg, method, rec);
    result.report.epochs.push_back(std::move(rec));
    maybe_checkpoint(cfg, m, method, epoch);
  }
  result.ensemble = std::move(ensemble);
  result.report.wall_seconds = seconds_since(t0);
  finish_checkpoint(cfg, m, result.report);
  return result;
}

// ---------------------------------------------------------------------------

TrainResult train_stl(std::span<const SensorWindow> support, int num_classes, const TrainConfig& cfg,
                      const ExtractorConfig& ecfg) {
  cfg.validate();
  ecfg.validate();
  const auto t0 = Clock::now();
  if (support.empty()) throw ConfigError("stl: empty support set");
  std::set<int> present;
  std::vector<int> labels;
  for (const auto& w : support) {
    if (!w.clean_label) throw ConfigError("stl: support window without a clean label");
    if (*w.clean_label < 0 || *w.clean_label >= num_classes) throw ConfigError("stl: label out of range");
    present.insert(*w.clean_label);
    labels.push_back(*w.clean_label);
  }
  TrainResult result;
  result.report.method = "stl";
  if (present.size() < 2) {
    warn("stl: support has a single class; the model is degenerate");
    result.report.degenerate = true;
  }
  auto& m = result.model;
  m = init_model<float>(ecfg, {std::vector<int>(present.begin(), present.end())}, mix_seed(cfg.seed, "stl-init"));
  m.head_subjects = {""};

  const auto values = values_of(support);
  const std::size_t n = support.size();
  const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), n);
  Stepper theta_step(cfg.stl_optimizer, m.theta.size(), UpdateSchedule::PerBatch);
  Stepper head_step(cfg.stl_optimizer, m.heads[0].params.size(), UpdateSchedule::PerBatch);
  Rng shuffle_rng(mix_seed(cfg.seed, "stl-shuffle"));
  Rng drop_rng(mix_seed(cfg.seed, "stl-dropout"));
  auto grad = Gradients<float>::zeros_like(m);
  ObjectiveOptions oo;
  oo.weights.mu = 0.0;
  oo.weights.lambda = 0.0;
  oo.mode = Mode::Train;
  oo.dropout_rng = &drop_rng;
  oo.grad_theta = true;
  oo.grad_heads = true;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;
  int pass = 0;
  double pass_loss = 0.0;
  std::size_t pass_steps = 0;
  auto te = Clock::now();
  for (int it = 0; it < cfg.stl_iterations; ++it) {
    if (cursor >= n) {
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      cursor = 0;
    }
    const std::size_t end = std::min(n, cursor + bs);
    TaskBatch tb;
    for (std::size_t i = cursor; i < end; ++i) {
      tb.windows.push_back(values[order[i]]);
      tb.labels.push_back(labels[order[i]]);
      tb.ids.push_back(support[order[i]].window_id);
    }
    cursor = end;
    std::fill(grad.theta.begin(), grad.theta.end(), 0.0f);
    std::fill(grad.heads[0].begin(), grad.heads[0].end(), 0.0f);
    try {
      pass_loss += supervised_objective<float>(m, std::span<const TaskBatch>(&tb, 1), nullptr, oo, &grad).total;
    } catch (const DivergenceError&) {
      diverged(cfg, m, "stl", pass + 1, "iteration " + std::to_string(it));
    }
    theta_step.apply(m.theta, grad.theta);
    head_step.apply(m.heads[0].params, grad.heads[0]);
    ++pass_steps;
    if (cursor >= n || it + 1 == cfg.stl_iterations) {
      EpochRecord rec;
      rec.epoch = ++pass;
      rec.task_loss = {pass_loss / static_cast<double>(pass_steps)};
      rec.seconds = seconds_since(te);
      result.report.epochs.push_back(rec);
      pass_loss = 0.0;
      pass_steps = 0;
      te = Clock::now();
    }
  }
  if (!result.report.epochs.empty()) {
    const auto pred = predict(m, 0, support);
    auto& last = result.report.epochs.back();
    std::size_t agree = 0;
    for (std::size_t i = 0; i < n; ++i) agree += pred[i] == labels[i] ? 1 : 0;
    last.monitored = true;
    last.noisy_accuracy = static_cast<double>(agree) / static_cast<double>(n);
    last.clean_accuracy = last.noisy_accuracy;
  }
  result.report.wall_seconds = seconds_since(t0);
  finish_checkpoint(cfg, m, result.report);
  return result;
}

// ---------------------------------------------------------------------------

TrainResult train_si(const MultiSubjectDataset& source, const TrainConfig& cfg, const ExtractorConfig& ecfg,
                     bool use_elr, const Monitor* monitor) {
  cfg.validate();
  ecfg.validate();
  const auto t0 = Clock::now();
  const std::string method = use_elr ? "si-elr" : "si";
  const std::size_t K = source.domains.size();
  if (K == 0 || source.window_count() == 0) throw ConfigError("si: empty source");

  // Pooled index (domain, row); SI-ELR holds out a clean validation split.
  std::vector<std::pair<std::size_t, std::size_t>> pooled, held_out;
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < source.domains[k].windows.size(); ++i) pooled.push_back({k, i});
  }
  const bool select_best = use_elr && cfg.validation_fraction > 0.0 && monitor && monitor->has_clean();
  if (use_elr && cfg.validation_fraction > 0.0 && !select_best) {
    warn("si-elr: no clean labels available; best-checkpoint selection disabled");
  }
  if (select_best) {
    Rng split_rng(mix_seed(cfg.seed, "si-validation"));
    std::shuffle(pooled.begin(), pooled.end(), split_rng);
    const auto n_val = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(pooled.size()))));
    held_out.assign(pooled.begin(), pooled.begin() + static_cast<std::ptrdiff_t>(n_val));
    pooled.erase(pooled.begin(), pooled.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::sort(pooled.begin(), pooled.end());
    std::sort(held_out.begin(), held_out.end());
  }
  const std::size_t n = pooled.size();
  std::vector<const Matrix<float>*> values;
  std::vector<int> labels;
  std::set<int> present;
  for (const auto& [k, i] : pooled) {
    const auto& w = source.domains[k].windows[i];
    values.push_back(&w.values);
    labels.push_back(observed_or_throw(w));
    present.insert(labels.back());
  }

  TrainResult result;
  result.report.method = method;
  auto& m = result.model;
  m = init_model<float>(ecfg, {std::vector<int>(present.begin(), present.end())}, mix_seed(cfg.seed, "si-init"));
  m.head_subjects = {""};

  LossWeights w = cfg.weights;
  w.mu = 0.0;
  if (!use_elr) w.lambda = 0.0;
  EnsembleState ensemble(w.beta);
  std::vector<std::int64_t> pooled_ids(n);
  std::iota(pooled_ids.begin(), pooled_ids.end(), 0);
  ensemble.add_domain("pooled", pooled_ids, m.heads[0].out());

  Stepper theta_step(cfg.optimizer, m.theta.size(), cfg.updates);
  Stepper head_step(cfg.optimizer, m.heads[0].params.size(), cfg.updates);
  Rng shuffle_rng(mix_seed(cfg.seed, "si-shuffle"));
  Rng drop_rng(mix_seed(cfg.seed, "si-dropout"));
  auto grad = Gradients<float>::zeros_like(m);
  ObjectiveOptions oo;
  oo.weights = w;
  oo.mode = Mode::Train;
  oo.dropout_rng = &drop_rng;
  oo.update_ensemble = use_elr;
  oo.grad_theta = true;
  oo.grad_heads = true;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  std::vector<SensorWindow> validation;
  std::vector<int> validation_clean;
  for (const auto& [k, i] : held_out) {
    validation.push_back(source.domains[k].windows[i]);
    validation_clean.push_back(monitor->clean(k)[i]);
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= cfg.si_epochs; ++epoch) {
    const auto te = Clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss = 0.0;
    std::size_t steps = 0;
    for (std::size_t s = 0; s < n; s += bs) {
      const std::size_t end = std::min(n, s + bs);
      TaskBatch tb;
      for (std::size_t i = s; i < end; ++i) {
        tb.windows.push_back(values[order[i]]);
        tb.labels.push_back(labels[order[i]]);
        tb.ids.push_back(static_cast<std::int64_t>(order[i]));
      }
      std::fill(grad.theta.begin(), grad.theta.end(), 0.0f);
      std::fill(grad.heads[0].begin(), grad.heads[0].end(), 0.0f);
      try {
        loss += supervised_objective<float>(m, std::span<const TaskBatch>(&tb, 1), &ensemble, oo, &grad).total;
      } catch (const DivergenceError&) {
        diverged(cfg, m, method, epoch, "pooled update");
      }
      theta_step.apply(m.theta, grad.theta);
      head_step.apply(m.heads[0].params, grad.heads[0]);
      ++steps;
    }
    theta_step.flush(m.theta);
    head_step.flush(m.heads[0].params);
    rec.task_loss = {loss / static_cast<double>(std::max<std::size_t>(steps, 1))};

    if (report_epoch(cfg, epoch, cfg.si_epochs)) {
      std::vector<std::vector<int>> pred(K), observed(K);
      std::vector<std::vector<std::size_t>> rows(K);
      const auto z = features(m, values);
      const auto p = predict_cached(m.heads[0], z);
      for (std::size_t j = 0; j < n; ++j) {
        const auto [k, i] = pooled[j];
        pred[k].push_back(p[j]);
        observed[k].push_back(labels[j]);
        rows[k].push_back(i);
      }
      monitor_epoch(rec, pred, observed, monitor, &rows);
    }
    if (select_best) {
      const auto pred = predict(m, 0, validation);
      std::size_t agree = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) agree += pred[i] == validation_clean[i] ? 1 : 0;
      const double acc = static_cast<double>(agree) / static_cast<double>(pred.size());
      rec.validation_accuracy = acc;
      if (!result.report.best_validation_accuracy || acc > *result.report.best_validation_accuracy) {
        result.report.best_validation_accuracy = acc;
        result.report.best_epoch = epoch;
        result.best_model = m;
      }
    }
    rec.seconds = seconds_since(te);
    log_epoch(cfg, method, rec);
    result.report.epochs.push_back(std::move(rec));
    maybe_checkpoint(cfg, m, method, epoch);
  }
  if (select_best && !result.best_model) {
    result.best_model = m;
    result.report.best_epoch = 0;
  }
  result.ensemble = std::move(ensemble);
  result.report.wall_seconds = seconds_since(t0);
  finish_checkpoint(cfg, m, result.report);
  return result;
}

}  // namespace valerian
