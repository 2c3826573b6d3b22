#include "valerian/noise.hpp"

#include <cmath>
#include <random>

namespace valerian {

void NoiseTransitionMatrix::validate() const {
  if (matrix.rows() != matrix.cols() || matrix.rows() < 2) {
    throw ConfigError("noise matrix must be square with C >= 2");
  }
  for (std::size_t i = 0; i < matrix.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < matrix.cols(); ++j) {
      if (!(matrix(i, j) >= 0.0)) throw ConfigError("noise matrix has a negative entry");
      s += matrix(i, j);
    }
    if (std::abs(s - 1.0) > 1e-9) {
      throw ConfigError("noise matrix row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
  }
}

namespace {
void check_tau(int num_classes, double tau) {
  if (num_classes < 2) throw ConfigError("noise: need at least 2 classes");
  if (!(tau >= 0.0) || tau >= 1.0) throw ConfigError("noise: tau must be in [0, 1)");
}
}  // namespace

NoiseTransitionMatrix symmetric_matrix(int num_classes, double tau) {
  check_tau(num_classes, tau);
  const auto c = static_cast<std::size_t>(num_classes);
  NoiseTransitionMatrix t{Matrix<double>(c, c, tau / (num_classes - 1)), NoisePattern::Symmetric, tau};
  for (std::size_t i = 0; i < c; ++i) t.matrix(i, i) = 1.0 - tau;
  return t;
}

NoiseTransitionMatrix asymmetric_matrix(int num_classes, double tau, const ConfusionPairs& pairs) {
  check_tau(num_classes, tau);
  const auto c = static_cast<std::size_t>(num_classes);
  NoiseTransitionMatrix t{Matrix<double>(c, c, 0.0), NoisePattern::Asymmetric, tau};
  for (int i = 0; i < num_classes; ++i) {
    const auto it = pairs.find(i);
    if (it == pairs.end()) throw ConfigError("noise: class " + std::to_string(i) + " has no confusion pair");
    const int j = it->second;
    if (j == i) throw ConfigError("noise: class " + std::to_string(i) + " is paired with itself");
    if (j < 0 || j >= num_classes) throw ConfigError("noise: confusion pair target out of range");
    t.matrix(static_cast<std::size_t>(i), static_cast<std::size_t>(i)) = 1.0 - tau;
    t.matrix(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) += tau;
  }
  return t;
}

ConfusionPairs derive_confusion_pairs(const Matrix<double>& confusion) {
  if (confusion.rows() != confusion.cols() || confusion.rows() < 2) {
    throw ConfigError("confusion matrix must be square with C >= 2");
  }
  const int c = static_cast<int>(confusion.rows());
  ConfusionPairs pairs;
  for (int i = 0; i < c; ++i) {
    int best = -1;
    double best_v = 0.0;
    for (int j = 0; j < c; ++j) {
      if (j == i) continue;
      const double v = confusion(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
      if (v > best_v) {
        best_v = v;
        best = j;
      }
    }
    if (best < 0) {
      best = (i + 1) % c;
      warn("confusion row " + std::to_string(i) + " has no off-diagonal mass; pairing with " +
           std::to_string(best));
    }
    pairs[i] = best;
  }
  return pairs;
}

InjectionResult inject(const SubjectDomain& domain, const NoiseTransitionMatrix& t, std::uint64_t seed) {
  t.validate();
  InjectionResult res;
  res.domain = domain;
  res.domain.flip_mask.assign(domain.windows.size(), false);
  res.records.reserve(domain.windows.size());
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int c = t.num_classes();
  for (std::size_t i = 0; i < domain.windows.size(); ++i) {
    auto& w = res.domain.windows[i];
    if (!w.clean_label) {
      throw ConfigError("inject: window " + std::to_string(w.window_id) + " of subject '" +
                        domain.subject_id + "' has no clean label");
    }
    const int y = *w.clean_label;
    if (y < 0 || y >= c) throw ConfigError("inject: label " + std::to_string(y) + " outside [0, C)");
    // Inverse-CDF draw over the row; always consumes exactly one uniform.
    const double u = unit(rng);
    int assigned = c - 1;
    double cum = 0.0;
    for (int j = 0; j < c; ++j) {
      const double p = t.matrix(static_cast<std::size_t>(y), static_cast<std::size_t>(j));
      cum += p;
      if (u < cum && p > 0.0) {
        assigned = j;
        break;
      }
    }
    while (t.matrix(static_cast<std::size_t>(y), static_cast<std::size_t>(assigned)) <= 0.0) --assigned;
    w.noisy_label = assigned;
    res.domain.flip_mask[i] = assigned != y;
    res.records.push_back({assigned != y, y, assigned});
  }
  return res;
}

MultiSubjectDataset inject_dataset(const MultiSubjectDataset& dataset, const NoiseTransitionMatrix& t,
                                   std::uint64_t seed) {
  MultiSubjectDataset out = dataset;
  for (auto& d : out.domains) d = inject(d, t, mix_seed(seed, "inject/" + d.subject_id)).domain;
  return out;
}

EmpiricalTransition empirical_transition(std::span<const int> clean, std::span<const int> noisy,
                                         int num_classes) {
  if (clean.size() != noisy.size()) throw ConfigError("empirical_transition: length mismatch");
  const auto c = static_cast<std::size_t>(num_classes);
  EmpiricalTransition out{Matrix<double>(c, c, 0.0), std::vector<bool>(c, false)};
  std::vector<double> row_count(c, 0.0);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const auto a = static_cast<std::size_t>(clean[i]);
    const auto b = static_cast<std::size_t>(noisy[i]);
    if (a >= c || b >= c) throw ConfigError("empirical_transition: label out of range");
    out.matrix(a, b) += 1.0;
    row_count[a] += 1.0;
  }
  for (std::size_t i = 0; i < c; ++i) {
    if (row_count[i] == 0.0) {
      out.empty_rows[i] = true;
      for (std::size_t j = 0; j < c; ++j) out.matrix(i, j) = 1.0 / static_cast<double>(c);
      continue;
    }
    for (std::size_t j = 0; j < c; ++j) out.matrix(i, j) /= row_count[i];
  }
  return out;
}

}  // namespace valerian
