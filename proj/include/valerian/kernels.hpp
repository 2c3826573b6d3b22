#pragma once

// Dense compute kernels behind the network. Each kernel exists twice:
// `serial` is the plain reference loop nest kept for testing, `parallel` is
// the OpenMP version used in training. Parallel loops partition the OUTPUT
// elements, so every output is reduced in a fixed order on one thread and
// results do not depend on the thread count.

#include <cstddef>
#include <span>

namespace valerian::kernels {

/// y[B x M] = x[B x N] * W^T + b, W stored [M x N].
struct AffineShape {
  std::size_t batch = 0;
  std::size_t in = 0;
  std::size_t out = 0;
};

/// Valid 1-D convolution over time; channels-last layout.
/// x [batch x steps_in x ch_in], W [ch_out x (kernel * ch_in)], y [batch x steps_out x ch_out].
struct ConvShape {
  std::size_t batch = 0;
  std::size_t steps_in = 0;
  std::size_t ch_in = 0;
  std::size_t ch_out = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;

  std::size_t steps_out() const {
    return steps_in < kernel ? 0 : (steps_in - kernel) / stride + 1;
  }
};

#define VALERIAN_KERNEL_DECLS                                                              \
  template <class Real>                                                                    \
  void affine_forward(const AffineShape& s, std::span<const Real> x, std::span<const Real> w, \
                      std::span<const Real> b, std::span<Real> y);                         \
  /* dx = dy * W (overwrites dx) */                                                        \
  template <class Real>                                                                    \
  void affine_backward_input(const AffineShape& s, std::span<const Real> dy,               \
                             std::span<const Real> w, std::span<Real> dx);                 \
  /* dW += dy^T x, db += colsum(dy) */                                                     \
  template <class Real>                                                                    \
  void affine_backward_params(const AffineShape& s, std::span<const Real> x,               \
                              std::span<const Real> dy, std::span<Real> dw,                \
                              std::span<Real> db);                                         \
  template <class Real>                                                                    \
  void conv1d_forward(const ConvShape& s, std::span<const Real> x, std::span<const Real> w, \
                      std::span<const Real> b, std::span<Real> y);                         \
  /* overwrites dx */                                                                      \
  template <class Real>                                                                    \
  void conv1d_backward_input(const ConvShape& s, std::span<const Real> dy,                 \
                             std::span<const Real> w, std::span<Real> dx);                 \
  /* accumulates into dw, db */                                                            \
  template <class Real>                                                                    \
  void conv1d_backward_params(const ConvShape& s, std::span<const Real> x,                 \
                              std::span<const Real> dy, std::span<Real> dw,                \
                              std::span<Real> db);

namespace serial {
VALERIAN_KERNEL_DECLS
}  // namespace serial

namespace parallel {
VALERIAN_KERNEL_DECLS
}  // namespace parallel

#undef VALERIAN_KERNEL_DECLS

/// Number of OpenMP threads the parallel kernels will use.
int max_threads();

}  // namespace valerian::kernels
