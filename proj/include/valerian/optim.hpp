#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace valerian {

enum class OptimizerKind { Adam, RmsProp };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;  // Adam second-moment decay
  double rho = 0.9;      // RMSProp decay
  double eps = 1e-8;

  static OptimizerConfig adam(double lr = 1e-4);
  static OptimizerConfig rmsprop(double lr = 1e-3);
  void validate() const;
};

std::string optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

/// First-order optimizer over one flat parameter vector. Moments are kept in double.
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& config, std::size_t size);

  template <class Real>
  void step(std::span<Real> params, std::span<const Real> grad);

  void reset();
  std::size_t steps() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }

 private:
  OptimizerConfig config_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::size_t steps_ = 0;
};

}  // namespace valerian
