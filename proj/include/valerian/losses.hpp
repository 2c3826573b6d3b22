#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "valerian/common.hpp"
#include "valerian/network.hpp"

namespace valerian {

inline constexpr double kProbabilityFloor = 1e-12;
inline constexpr double kElrMargin = 1e-6;  // 1 - <p, t> is kept >= this

struct LossWeights {
  double mu = 0.4;      // L1 weight on head parameters
  double lambda = 3.0;  // ELR weight
  double beta = 0.7;    // temporal-ensemble momentum

  void validate() const;
};

/// Mean over rows of -log(max(p[y], 1e-12)).
double cross_entropy(const Matrix<double>& p, std::span<const int> labels);

/// Mean over rows of log(1 - <p_i, t_i>), the inner product capped at 1 - 1e-6.
double elr_loss(const Matrix<double>& p, const Matrix<double>& t);

/// Per-sample derivative of log(1 - <p, t>) w.r.t. p: -t / (1 - <p, t>);
/// zero where the cap is active.
Matrix<double> elr_gradient(const Matrix<double>& p, const Matrix<double>& t);

template <class Real>
double l1_norm(std::span<const Real> values);

/// Per-window exponential moving averages of predictions, one table per subject,
/// rows addressed by the subject's stable window ids.
class EnsembleState {
 public:
  explicit EnsembleState(double beta = 0.7);

  /// Registers a subject; returns its domain index. Rows start at zero.
  std::size_t add_domain(const std::string& subject, std::span<const std::int64_t> window_ids,
                         std::size_t width);

  /// t_i <- beta t_i + (1 - beta) p_i for the listed ids.
  void update(std::size_t domain, std::span<const std::int64_t> ids, const Matrix<double>& p);
  Matrix<double> rows(std::size_t domain, std::span<const std::int64_t> ids) const;

  const Matrix<double>& table(std::size_t domain) const { return tables_.at(domain); }
  const std::string& subject(std::size_t domain) const { return subjects_.at(domain); }
  std::size_t domain_count() const { return tables_.size(); }
  double beta() const { return beta_; }

 private:
  std::size_t row_of(std::size_t domain, std::int64_t id) const;

  double beta_;
  std::vector<std::string> subjects_;
  std::vector<Matrix<double>> tables_;
  std::vector<std::unordered_map<std::int64_t, std::size_t>> index_;
};

/// One task's slice of a (possibly multi-task) minibatch.
struct TaskBatch {
  std::size_t head = 0;
  std::vector<const Matrix<float>*> windows;
  std::vector<int> labels;          // global class ids
  std::vector<std::int64_t> ids;    // ensemble keys; for mixed samples the first constituent
  std::size_t ensemble_domain = 0;
};

template <class Real>
struct Gradients {
  std::vector<Real> theta;
  std::vector<std::vector<Real>> heads;
  std::vector<Real> pretext;

  static Gradients zeros_like(const Model<Real>& m);
};

struct ObjectiveTerms {
  double total = 0.0;
  double ce = 0.0;   // sum over tasks of the task-mean cross-entropy
  double l1 = 0.0;   // mu * sum of |params| over the L1 heads
  double elr = 0.0;  // lambda * mean over all samples of log(1 - <p, t>)
  std::vector<Matrix<double>> probs;  // per task
  std::vector<Matrix<double>> features;  // per task, pre-dropout
};

struct ObjectiveOptions {
  LossWeights weights;
  std::vector<std::size_t> l1_heads;
  Mode mode = Mode::Eval;
  Rng* dropout_rng = nullptr;
  bool update_ensemble = false;  // write t_i <- beta t_i + (1 - beta) p_i before the ELR term
  bool grad_theta = false;
  bool grad_heads = false;
  bool keep_features = false;
  /// Optional extractor output for all samples (concatenated task order); skips
  /// the extractor forward pass. Incompatible with grad_theta.
  std::span<const double> cached_features;
};

/// CE + mu |phi|_1 + lambda ELR for a combined batch; gradients are
/// accumulated only for the requested parameter groups.
template <class Real>
ObjectiveTerms supervised_objective(const Model<Real>& m, std::span<const TaskBatch> tasks,
                                    EnsembleState* ensemble, const ObjectiveOptions& options,
                                    Gradients<Real>* grad);

/// Head-only objective for subject k: CE + mu |phi^k|_1 + lambda ELR. Reads
/// (does not update) ensemble rows. Eval-mode forward.
template <class Real>
double head_loss(const Model<Real>& m, const TaskBatch& batch, const EnsembleState& ensemble,
                 const LossWeights& w);

/// Extractor objective over all tasks: sum_k CE_k + mu |phi|_1 + lambda ELR.
template <class Real>
double extractor_loss(const Model<Real>& m, std::span<const TaskBatch> tasks, const EnsembleState& ensemble,
                      const LossWeights& w);

/// Summed binary cross-entropy of the pretext heads, mean over the batch.
template <class Real>
double pretext_objective(const Model<Real>& m, std::span<const Matrix<float>* const> windows,
                         std::span<const std::array<float, 8>> labels, Mode mode, Rng* dropout_rng,
                         Gradients<Real>* grad, Matrix<double>* scores = nullptr);

}  // namespace valerian
