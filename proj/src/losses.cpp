#include "valerian/losses.hpp"

#include <algorithm>
#include <cmath>

namespace valerian {

void LossWeights::validate() const {
  if (mu < 0 || lambda < 0) throw ConfigError("loss weights: mu and lambda must be >= 0");
  if (!(beta >= 0 && beta < 1)) throw ConfigError("loss weights: beta must be in [0, 1)");
}

double cross_entropy(const Matrix<double>& p, std::span<const int> labels) {
  if (labels.size() != p.rows()) throw ConfigError("cross_entropy: label count mismatch");
  if (p.rows() == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    sum -= std::log(std::max(p(i, static_cast<std::size_t>(labels[i])), kProbabilityFloor));
  }
  return sum / static_cast<double>(p.rows());
}

double elr_loss(const Matrix<double>& p, const Matrix<double>& t) {
  if (p.rows() != t.rows() || p.cols() != t.cols()) throw ConfigError("elr_loss: shape mismatch");
  if (p.rows() == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < p.cols(); ++j) dot += p(i, j) * t(i, j);
    sum += std::log(1.0 - std::min(dot, 1.0 - kElrMargin));
  }
  return sum / static_cast<double>(p.rows());
}

Matrix<double> elr_gradient(const Matrix<double>& p, const Matrix<double>& t) {
  if (p.rows() != t.rows() || p.cols() != t.cols()) throw ConfigError("elr_gradient: shape mismatch");
  Matrix<double> g(p.rows(), p.cols(), 0.0);
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < p.cols(); ++j) dot += p(i, j) * t(i, j);
    if (dot > 1.0 - kElrMargin) continue;
    for (std::size_t j = 0; j < p.cols(); ++j) g(i, j) = -t(i, j) / (1.0 - dot);
  }
  return g;
}

template <class Real>
double l1_norm(std::span<const Real> values) {
  double s = 0.0;
  for (Real v : values) s += std::abs(static_cast<double>(v));
  return s;
}

template double l1_norm<float>(std::span<const float>);
template double l1_norm<double>(std::span<const double>);

// ---------------------------------------------------------------------------

EnsembleState::EnsembleState(double beta) : beta_(beta) {
  if (!(beta >= 0 && beta < 1)) throw ConfigError("ensemble: beta must be in [0, 1)");
}

std::size_t EnsembleState::add_domain(const std::string& subject, std::span<const std::int64_t> window_ids,
                                      std::size_t width) {
  subjects_.push_back(subject);
  tables_.emplace_back(window_ids.size(), width, 0.0);
  auto& idx = index_.emplace_back();
  for (std::size_t i = 0; i < window_ids.size(); ++i) {
    if (!idx.emplace(window_ids[i], i).second) {
      throw ConfigError("ensemble: duplicate window id " + std::to_string(window_ids[i]) + " for subject '" +
                        subject + "'");
    }
  }
  return tables_.size() - 1;
}

std::size_t EnsembleState::row_of(std::size_t domain, std::int64_t id) const {
  const auto& idx = index_.at(domain);
  const auto it = idx.find(id);
  if (it == idx.end()) {
    throw ConfigError("ensemble: unknown window id " + std::to_string(id) + " for subject '" +
                      subjects_.at(domain) + "'");
  }
  return it->second;
}

void EnsembleState::update(std::size_t domain, std::span<const std::int64_t> ids, const Matrix<double>& p) {
  auto& table = tables_.at(domain);
  if (p.rows() != ids.size() || p.cols() != table.cols()) throw ConfigError("ensemble: update shape mismatch");
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto row = table.row(row_of(domain, ids[i]));
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = beta_ * row[j] + (1.0 - beta_) * p(i, j);
  }
}

Matrix<double> EnsembleState::rows(std::size_t domain, std::span<const std::int64_t> ids) const {
  const auto& table = tables_.at(domain);
  Matrix<double> out(ids.size(), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto row = table.row(row_of(domain, ids[i]));
    std::copy(row.begin(), row.end(), out.row(i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------

template <class Real>
Gradients<Real> Gradients<Real>::zeros_like(const Model<Real>& m) {
  Gradients g;
  g.theta.assign(m.theta.size(), Real(0));
  for (const auto& h : m.heads) g.heads.emplace_back(h.params.size(), Real(0));
  g.pretext.assign(m.pretext.params.size(), Real(0));
  return g;
}

template <class Real>
ObjectiveTerms supervised_objective(const Model<Real>& m, std::span<const TaskBatch> tasks,
                                    EnsembleState* ensemble, const ObjectiveOptions& options,
                                    Gradients<Real>* grad) {
  const auto& w = options.weights;
  const auto f = static_cast<std::size_t>(m.config.feature_dim());
  std::size_t total = 0;
  for (const auto& t : tasks) {
    if (t.head >= m.heads.size()) throw ConfigError("objective: head index out of range");
    if (t.labels.size() != t.windows.size()) throw ConfigError("objective: label count mismatch");
    total += t.windows.size();
  }
  if ((options.grad_theta || options.grad_heads) && !grad) throw ConfigError("objective: gradient sink missing");
  if (options.grad_theta && !options.cached_features.empty()) {
    throw ConfigError("objective: cannot differentiate the extractor through cached features");
  }
  const bool use_elr = w.lambda > 0.0;
  if ((use_elr || options.update_ensemble) && !ensemble) throw ConfigError("objective: ensemble state missing");

  // Extractor pass over the concatenated batch.
  std::vector<Real> z(total * f);
  ExtractorTape<Real> tape;
  if (!options.cached_features.empty()) {
    if (options.cached_features.size() != z.size()) throw ConfigError("objective: cached feature size mismatch");
    std::transform(options.cached_features.begin(), options.cached_features.end(), z.begin(),
                   [](double v) { return static_cast<Real>(v); });
  } else if (total > 0) {
    std::vector<const Matrix<float>*> all;
    all.reserve(total);
    for (const auto& t : tasks) all.insert(all.end(), t.windows.begin(), t.windows.end());
    const auto x = pack_windows<Real>(all);
    extract_features<Real>(m, x, total, z, options.grad_theta ? &tape : nullptr);
  }
  std::vector<Real> mask;
  std::vector<Real> zd = z;
  if (options.mode == Mode::Train && m.config.dropout > 0.0) {
    if (!options.dropout_rng) throw ConfigError("objective: train mode needs a dropout generator");
    mask = dropout_mask<Real>(z.size(), m.config.dropout, *options.dropout_rng);
    for (std::size_t i = 0; i < zd.size(); ++i) zd[i] *= mask[i];
  }

  ObjectiveTerms terms;
  std::vector<Real> dz(options.grad_theta ? z.size() : 0, Real(0));
  std::size_t offset = 0;
  for (const auto& t : tasks) {
    const auto& head = m.heads[t.head];
    const std::size_t n = t.windows.size(), c = head.out();
    const std::span<const Real> zt(zd.data() + offset * f, n * f);
    std::vector<Real> logits(n * c);
    head_forward<Real>(head, zt, n, logits);
    softmax_rows<Real>(logits, c);
    Matrix<double> p(n, c);
    std::copy(logits.begin(), logits.end(), p.data());

    std::vector<int> local(n);
    for (std::size_t i = 0; i < n; ++i) {
      local[i] = head.local_index(t.labels[i]);
      if (local[i] < 0) {
        throw ConfigError("objective: class " + std::to_string(t.labels[i]) + " is not an output of head " +
                          std::to_string(t.head));
      }
    }
    if (n > 0) terms.ce += cross_entropy(p, local);
    if (options.update_ensemble) ensemble->update(t.ensemble_domain, t.ids, p);

    // d(loss)/d(logits); CE is differentiated through the softmax in closed form.
    Matrix<double> dlog(n, c, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) dlog(i, j) = p(i, j) / static_cast<double>(n);
      dlog(i, static_cast<std::size_t>(local[i])) -= 1.0 / static_cast<double>(n);
    }
    if (use_elr && n > 0) {
      const auto tr = ensemble->rows(t.ensemble_domain, t.ids);
      terms.elr += w.lambda * elr_loss(p, tr) * static_cast<double>(n) / static_cast<double>(total);
      const auto gp = elr_gradient(p, tr);
      const double scale = w.lambda / static_cast<double>(total);
      for (std::size_t i = 0; i < n; ++i) {
        double inner = 0.0;
        for (std::size_t j = 0; j < c; ++j) inner += gp(i, j) * p(i, j);
        for (std::size_t j = 0; j < c; ++j) dlog(i, j) += scale * p(i, j) * (gp(i, j) - inner);
      }
    }
    if (grad && (options.grad_heads || options.grad_theta) && n > 0) {
      std::vector<Real> dl(dlog.values().begin(), dlog.values().end());
      std::span<Real> dparams;
      if (options.grad_heads) dparams = grad->heads.at(t.head);
      std::span<Real> dzt;
      if (options.grad_theta) dzt = std::span<Real>(dz.data() + offset * f, n * f);
      head_backward<Real>(head, zt, dl, n, dparams, dzt);
    }
    terms.probs.push_back(std::move(p));
    if (options.keep_features) {
      Matrix<double> zf(n, f);
      for (std::size_t i = 0; i < n * f; ++i) zf.values()[i] = static_cast<double>(z[offset * f + i]);
      terms.features.push_back(std::move(zf));
    }
    offset += n;
  }

  for (std::size_t k : options.l1_heads) {
    const auto& params = m.heads.at(k).params;
    terms.l1 += w.mu * l1_norm<Real>(params);
    if (grad && options.grad_heads && w.mu > 0.0) {
      auto& g = grad->heads.at(k);
      for (std::size_t i = 0; i < params.size(); ++i) {
        const Real v = params[i];
        g[i] += static_cast<Real>(w.mu) * static_cast<Real>((v > Real(0)) - (v < Real(0)));
      }
    }
  }
  terms.total = terms.ce + terms.l1 + terms.elr;
  if (!std::isfinite(terms.total)) throw DivergenceError("objective: non-finite loss");

  if (options.grad_theta && total > 0) {
    if (!mask.empty()) {
      for (std::size_t i = 0; i < dz.size(); ++i) dz[i] *= mask[i];
    }
    extract_backward<Real>(m, tape, dz, grad->theta);
  }
  return terms;
}

template <class Real>
double head_loss(const Model<Real>& m, const TaskBatch& batch, const EnsembleState& ensemble,
                 const LossWeights& w) {
  ObjectiveOptions opt;
  opt.weights = w;
  opt.l1_heads = {batch.head};
  return supervised_objective<Real>(m, std::span<const TaskBatch>(&batch, 1),
                                    const_cast<EnsembleState*>(&ensemble), opt, nullptr)
      .total;
}

template <class Real>
double extractor_loss(const Model<Real>& m, std::span<const TaskBatch> tasks, const EnsembleState& ensemble,
                      const LossWeights& w) {
  ObjectiveOptions opt;
  opt.weights = w;
  for (std::size_t k = 0; k < m.heads.size(); ++k) opt.l1_heads.push_back(k);
  return supervised_objective<Real>(m, tasks, const_cast<EnsembleState*>(&ensemble), opt, nullptr).total;
}

template <class Real>
double pretext_objective(const Model<Real>& m, std::span<const Matrix<float>* const> windows,
                         std::span<const std::array<float, 8>> labels, Mode mode, Rng* dropout_rng,
                         Gradients<Real>* grad, Matrix<double>* scores) {
  const std::size_t n = windows.size();
  if (labels.size() != n) throw ConfigError("pretext: label count mismatch");
  if (n == 0) return 0.0;
  const auto f = static_cast<std::size_t>(m.config.feature_dim());
  const auto x = pack_windows<Real>(windows);
  std::vector<Real> z(n * f);
  ExtractorTape<Real> tape;
  extract_features<Real>(m, x, n, z, grad ? &tape : nullptr);
  std::vector<Real> mask;
  if (mode == Mode::Train && m.config.dropout > 0.0) {
    if (!dropout_rng) throw ConfigError("pretext: train mode needs a dropout generator");
    mask = dropout_mask<Real>(z.size(), m.config.dropout, *dropout_rng);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] *= mask[i];
  }
  const std::size_t h = m.pretext.out();
  std::vector<Real> logits(n * h);
  head_forward<Real>(m.pretext, z, n, logits);
  double loss = 0.0;
  std::vector<Real> dlog(n * h);
  if (scores) *scores = Matrix<double>(n, h);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < h; ++j) {
      const double l = logits[i * h + j];
      const double y = labels[i][j];
      // log(1 + e^l) - y l, stable for both signs.
      loss += std::max(l, 0.0) + std::log1p(std::exp(-std::abs(l))) - y * l;
      const double s = 1.0 / (1.0 + std::exp(-l));
      dlog[i * h + j] = static_cast<Real>((s - y) / static_cast<double>(n));
      if (scores) (*scores)(i, j) = s;
    }
  }
  loss /= static_cast<double>(n);
  if (!std::isfinite(loss)) throw DivergenceError("pretext: non-finite loss");
  if (grad) {
    std::vector<Real> dz(n * f);
    head_backward<Real>(m.pretext, z, dlog, n, grad->pretext, dz);
    if (!mask.empty()) {
      for (std::size_t i = 0; i < dz.size(); ++i) dz[i] *= mask[i];
    }
    extract_backward<Real>(m, tape, dz, grad->theta);
  }
  return loss;
}

#define VALERIAN_LOSSES_INSTANTIATE(Real)                                                                 \
  template struct Gradients<Real>;                                                                        \
  template ObjectiveTerms supervised_objective<Real>(const Model<Real>&, std::span<const TaskBatch>,       \
                                                     EnsembleState*, const ObjectiveOptions&,              \
                                                     Gradients<Real>*);                                    \
  template double head_loss<Real>(const Model<Real>&, const TaskBatch&, const EnsembleState&,              \
                                  const LossWeights&);                                                    \
  template double extractor_loss<Real>(const Model<Real>&, std::span<const TaskBatch>,                     \
                                       const EnsembleState&, const LossWeights&);                         \
  template double pretext_objective<Real>(const Model<Real>&, std::span<const Matrix<float>* const>,       \
                                          std::span<const std::array<float, 8>>, Mode, Rng*,              \
                                          Gradients<Real>*, Matrix<double>*);

VALERIAN_LOSSES_INSTANTIATE(float)
VALERIAN_LOSSES_INSTANTIATE(double)
#undef VALERIAN_LOSSES_INSTANTIATE

}  // namespace valerian
