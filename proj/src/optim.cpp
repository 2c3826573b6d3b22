#include "valerian/optim.hpp"

#include <algorithm>
#include <cmath>

#include "valerian/common.hpp"

namespace valerian {

OptimizerConfig OptimizerConfig::adam(double lr) {
  OptimizerConfig c;
  c.kind = OptimizerKind::Adam;
  c.lr = lr;
  return c;
}

OptimizerConfig OptimizerConfig::rmsprop(double lr) {
  OptimizerConfig c;
  c.kind = OptimizerKind::RmsProp;
  c.lr = lr;
  c.eps = 1e-7;
  return c;
}

void OptimizerConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("optimizer: lr must be > 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    throw ConfigError("optimizer: Adam betas must be in [0, 1)");
  }
  if (!(rho >= 0 && rho < 1)) throw ConfigError("optimizer: RMSProp decay must be in [0, 1)");
  if (!(eps > 0)) throw ConfigError("optimizer: eps must be > 0");
}

std::string optimizer_name(OptimizerKind kind) { return kind == OptimizerKind::Adam ? "adam" : "rmsprop"; }

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "rmsprop") return OptimizerKind::RmsProp;
  throw ConfigError("unknown optimizer '" + name + "' (expected adam or rmsprop)");
}

Optimizer::Optimizer(const OptimizerConfig& config, std::size_t size)
    : config_(config), m_(size, 0.0), v_(size, 0.0) {
  config_.validate();
}

void Optimizer::reset() {
  std::fill(m_.begin(), m_.end(), 0.0);
  std::fill(v_.begin(), v_.end(), 0.0);
  steps_ = 0;
}

template <class Real>
void Optimizer::step(std::span<Real> params, std::span<const Real> grad) {
  if (params.size() != m_.size() || grad.size() != m_.size()) throw ConfigError("optimizer: size mismatch");
  ++steps_;
  const auto& c = config_;
  if (c.kind == OptimizerKind::Adam) {
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grad[i];
      m_[i] = c.beta1 * m_[i] + (1.0 - c.beta1) * g;
      v_[i] = c.beta2 * v_[i] + (1.0 - c.beta2) * g * g;
      const double mh = m_[i] / bc1, vh = v_[i] / bc2;
      params[i] = static_cast<Real>(params[i] - c.lr * mh / (std::sqrt(vh) + c.eps));
    }
  } else {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grad[i];
      v_[i] = c.rho * v_[i] + (1.0 - c.rho) * g * g;
      params[i] = static_cast<Real>(params[i] - c.lr * g / (std::sqrt(v_[i]) + c.eps));
    }
  }
}

template void Optimizer::step<float>(std::span<float>, std::span<const float>);
template void Optimizer::step<double>(std::span<double>, std::span<const double>);

}  // namespace valerian
