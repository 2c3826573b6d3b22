#include "valerian/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cstdint>

namespace valerian::kernels {

int max_threads() { return omp_get_max_threads(); }

namespace serial {

template <class Real>
void affine_forward(const AffineShape& s, std::span<const Real> x, std::span<const Real> w,
                    std::span<const Real> b, std::span<Real> y) {
  for (std::size_t r = 0; r < s.batch; ++r) {
    for (std::size_t m = 0; m < s.out; ++m) {
      Real acc = b.empty() ? Real(0) : b[m];
      for (std::size_t n = 0; n < s.in; ++n) acc += w[m * s.in + n] * x[r * s.in + n];
      y[r * s.out + m] = acc;
    }
  }
}

template <class Real>
void affine_backward_input(const AffineShape& s, std::span<const Real> dy,
                           std::span<const Real> w, std::span<Real> dx) {
  for (std::size_t r = 0; r < s.batch; ++r) {
    for (std::size_t n = 0; n < s.in; ++n) {
      Real acc = 0;
      for (std::size_t m = 0; m < s.out; ++m) acc += dy[r * s.out + m] * w[m * s.in + n];
      dx[r * s.in + n] = acc;
    }
  }
}

template <class Real>
void affine_backward_params(const AffineShape& s, std::span<const Real> x,
                            std::span<const Real> dy, std::span<Real> dw, std::span<Real> db) {
  for (std::size_t m = 0; m < s.out; ++m) {
    for (std::size_t r = 0; r < s.batch; ++r) {
      const Real g = dy[r * s.out + m];
      if (!db.empty()) db[m] += g;
      for (std::size_t n = 0; n < s.in; ++n) dw[m * s.in + n] += g * x[r * s.in + n];
    }
  }
}

template <class Real>
void conv1d_forward(const ConvShape& s, std::span<const Real> x, std::span<const Real> w,
                    std::span<const Real> b, std::span<Real> y) {
  const std::size_t t_out = s.steps_out();
  for (std::size_t bi = 0; bi < s.batch; ++bi) {
    for (std::size_t t = 0; t < t_out; ++t) {
      for (std::size_t o = 0; o < s.ch_out; ++o) {
        Real acc = b[o];
        for (std::size_t k = 0; k < s.kernel; ++k) {
          for (std::size_t i = 0; i < s.ch_in; ++i) {
            acc += w[(o * s.kernel + k) * s.ch_in + i] *
                   x[(bi * s.steps_in + t * s.stride + k) * s.ch_in + i];
          }
        }
        y[(bi * t_out + t) * s.ch_out + o] = acc;
      }
    }
  }
}

template <class Real>
void conv1d_backward_input(const ConvShape& s, std::span<const Real> dy,
                           std::span<const Real> w, std::span<Real> dx) {
  const std::size_t t_out = s.steps_out();
  std::fill(dx.begin(), dx.begin() + s.batch * s.steps_in * s.ch_in, Real(0));
  for (std::size_t bi = 0; bi < s.batch; ++bi) {
    for (std::size_t t = 0; t < t_out; ++t) {
      for (std::size_t o = 0; o < s.ch_out; ++o) {
        const Real g = dy[(bi * t_out + t) * s.ch_out + o];
        for (std::size_t k = 0; k < s.kernel; ++k) {
          for (std::size_t i = 0; i < s.ch_in; ++i) {
            dx[(bi * s.steps_in + t * s.stride + k) * s.ch_in + i] +=
                g * w[(o * s.kernel + k) * s.ch_in + i];
          }
        }
      }
    }
  }
}

template <class Real>
void conv1d_backward_params(const ConvShape& s, std::span<const Real> x,
                            std::span<const Real> dy, std::span<Real> dw, std::span<Real> db) {
  const std::size_t t_out = s.steps_out();
  for (std::size_t o = 0; o < s.ch_out; ++o) {
    for (std::size_t bi = 0; bi < s.batch; ++bi) {
      for (std::size_t t = 0; t < t_out; ++t) {
        const Real g = dy[(bi * t_out + t) * s.ch_out + o];
        db[o] += g;
        for (std::size_t k = 0; k < s.kernel; ++k) {
          for (std::size_t i = 0; i < s.ch_in; ++i) {
            dw[(o * s.kernel + k) * s.ch_in + i] +=
                g * x[(bi * s.steps_in + t * s.stride + k) * s.ch_in + i];
          }
        }
      }
    }
  }
}

}  // namespace serial

namespace parallel {

namespace {
// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 14;

template <class Real>
inline Real dot(const Real* __restrict a, const Real* __restrict b, std::size_t n) {
  Real acc = 0;
#pragma omp simd reduction(+ : acc)
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <class Real>
inline void axpy(Real alpha, const Real* __restrict x, Real* __restrict y, std::size_t n) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}
}  // namespace

template <class Real>
void affine_forward(const AffineShape& s, std::span<const Real> x, std::span<const Real> w,
                    std::span<const Real> b, std::span<Real> y) {
  const auto rows = static_cast<std::int64_t>(s.batch);
  const bool par = s.batch * s.in * s.out >= kParallelWork;
#pragma omp parallel for if (par) schedule(static)
  for (std::int64_t r = 0; r < rows; ++r) {
    const Real* xr = x.data() + r * s.in;
    Real* yr = y.data() + r * s.out;
    for (std::size_t m = 0; m < s.out; ++m) {
      yr[m] = (b.empty() ? Real(0) : b[m]) + dot(w.data() + m * s.in, xr, s.in);
    }
  }
}

template <class Real>
void affine_backward_input(const AffineShape& s, std::span<const Real> dy,
                           std::span<const Real> w, std::span<Real> dx) {
  const auto rows = static_cast<std::int64_t>(s.batch);
  const bool par = s.batch * s.in * s.out >= kParallelWork;
#pragma omp parallel for if (par) schedule(static)
  for (std::int64_t r = 0; r < rows; ++r) {
    Real* dxr = dx.data() + r * s.in;
    std::fill(dxr, dxr + s.in, Real(0));
    const Real* dyr = dy.data() + r * s.out;
    for (std::size_t m = 0; m < s.out; ++m) {
      if (dyr[m] != Real(0)) axpy(dyr[m], w.data() + m * s.in, dxr, s.in);
    }
  }
}

template <class Real>
void affine_backward_params(const AffineShape& s, std::span<const Real> x,
                            std::span<const Real> dy, std::span<Real> dw, std::span<Real> db) {
  const auto outs = static_cast<std::int64_t>(s.out);
  const bool par = s.batch * s.in * s.out >= kParallelWork;
#pragma omp parallel for if (par) schedule(static)
  for (std::int64_t m = 0; m < outs; ++m) {
    Real* dwm = dw.data() + m * s.in;
    Real bias_acc = 0;
    for (std::size_t r = 0; r < s.batch; ++r) {
      const Real g = dy[r * s.out + m];
      if (g == Real(0)) continue;
      bias_acc += g;
      axpy(g, x.data() + r * s.in, dwm, s.in);
    }
    if (!db.empty()) db[m] += bias_acc;
  }
}

template <class Real>
void conv1d_forward(const ConvShape& s, std::span<const Real> x, std::span<const Real> w,
                    std::span<const Real> b, std::span<Real> y) {
  const std::size_t t_out = s.steps_out();
  const std::size_t span_len = s.kernel * s.ch_in;  // receptive field is contiguous
  const auto rows = static_cast<std::int64_t>(s.batch * t_out);
  const bool par = s.batch * t_out * span_len * s.ch_out >= kParallelWork;
#pragma omp parallel for if (par) schedule(static)
  for (std::int64_t row = 0; row < rows; ++row) {
    const std::size_t bi = static_cast<std::size_t>(row) / t_out;
    const std::size_t t = static_cast<std::size_t>(row) % t_out;
    const Real* xw = x.data() + (bi * s.steps_in + t * s.stride) * s.ch_in;
    Real* yr = y.data() + static_cast<std::size_t>(row) * s.ch_out;
    for (std::size_t o = 0; o < s.ch_out; ++o) {
      yr[o] = b[o] + dot(w.data() + o * span_len, xw, span_len);
    }
  }
}

template <class Real>
void conv1d_backward_input(const ConvShape& s, std::span<const Real> dy,
                           std::span<const Real> w, std::span<Real> dx) {
  const std::size_t t_out = s.steps_out();
  const std::size_t span_len = s.kernel * s.ch_in;
  const auto batches = static_cast<std::int64_t>(s.batch);
  const bool par = s.batch * t_out * span_len * s.ch_out >= kParallelWork;
#pragma omp parallel for if (par) schedule(static)
  for (std::int64_t bi = 0; bi < batches; ++bi) {
    Real* dxb = dx.data() + static_cast<std::size_t>(bi) * s.steps_in * s.ch_in;
    std::fill(dxb, dxb + s.steps_in * s.ch_in, Real(0));
    for (std::size_t t = 0; t < t_out; ++t) {
      const Real* dyr = dy.data() + (static_cast<std::size_t>(bi) * t_out + t) * s.ch_out;
      Real* dxw = dxb + t * s.stride * s.ch_in;
      for (std::size_t o = 0; o < s.ch_out; ++o) {
        if (dyr[o] != Real(0)) axpy(dyr[o], w.data() + o * span_len, dxw, span_len);
      }
    }
  }
}

template <class Real>
void conv1d_backward_params(const ConvShape& s, std::span<const Real> x,
                            std::span<const Real> dy, std::span<Real> dw, std::span<Real> db) {
  const std::size_t t_out = s.steps_out();
  const std::size_t span_len = s.kernel * s.ch_in;
  const auto outs = static_cast<std::int64_t>(s.ch_out);
  const bool par = s.batch * t_out * span_len * s.ch_out >= kParallelWork;
#pragma omp parallel for if (par) schedule(static)
  for (std::int64_t o = 0; o < outs; ++o) {
    Real* dwo = dw.data() + static_cast<std::size_t>(o) * span_len;
    Real bias_acc = 0;
    for (std::size_t bi = 0; bi < s.batch; ++bi) {
      for (std::size_t t = 0; t < t_out; ++t) {
        const Real g = dy[(bi * t_out + t) * s.ch_out + static_cast<std::size_t>(o)];
        if (g == Real(0)) continue;
        bias_acc += g;
        axpy(g, x.data() + (bi * s.steps_in + t * s.stride) * s.ch_in, dwo, span_len);
      }
    }
    db[static_cast<std::size_t>(o)] += bias_acc;
  }
}

}  // namespace parallel

#define VALERIAN_INSTANTIATE(NS, Real)                                                          \
  template void NS::affine_forward<Real>(const AffineShape&, std::span<const Real>,              \
                                         std::span<const Real>, std::span<const Real>,           \
                                         std::span<Real>);                                       \
  template void NS::affine_backward_input<Real>(const AffineShape&, std::span<const Real>,       \
                                                std::span<const Real>, std::span<Real>);         \
  template void NS::affine_backward_params<Real>(const AffineShape&, std::span<const Real>,      \
                                                 std::span<const Real>, std::span<Real>,         \
                                                 std::span<Real>);                               \
  template void NS::conv1d_forward<Real>(const ConvShape&, std::span<const Real>,                \
                                         std::span<const Real>, std::span<const Real>,           \
                                         std::span<Real>);                                       \
  template void NS::conv1d_backward_input<Real>(const ConvShape&, std::span<const Real>,         \
                                                std::span<const Real>, std::span<Real>);         \
  template void NS::conv1d_backward_params<Real>(const ConvShape&, std::span<const Real>,        \
                                                 std::span<const Real>, std::span<Real>,         \
                                                 std::span<Real>);

VALERIAN_INSTANTIATE(serial, float)
VALERIAN_INSTANTIATE(serial, double)
VALERIAN_INSTANTIATE(parallel, float)
VALERIAN_INSTANTIATE(parallel, double)

#undef VALERIAN_INSTANTIATE

}  // namespace valerian::kernels
