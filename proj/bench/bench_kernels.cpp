// Serial reference vs OpenMP kernels at the shapes the full network uses.
// Thread count follows OMP_NUM_THREADS.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "valerian/kernels.hpp"

namespace k = valerian::kernels;

namespace {

std::vector<float> random_values(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// batch 64, 128 LSTM hidden units: the gate affine map of one time step.
k::AffineShape affine_shape(const benchmark::State& state) {
  return {static_cast<std::size_t>(state.range(0)), 128, 512};
}

// batch 64, 2-s windows at 50 Hz, 64 filters of width 5.
k::ConvShape conv_shape(const benchmark::State& state) {
  return {static_cast<std::size_t>(state.range(0)), 100, 64, 64, 5, 1};
}

template <bool Parallel>
void affine_forward(benchmark::State& state) {
  const auto s = affine_shape(state);
  const auto x = random_values(s.batch * s.in, 1);
  const auto w = random_values(s.out * s.in, 2);
  const auto b = random_values(s.out, 3);
  std::vector<float> y(s.batch * s.out);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::affine_forward<float>(s, x, w, b, y);
    } else {
      k::serial::affine_forward<float>(s, x, w, b, y);
    }
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(s.batch * s.in * s.out));
}

template <bool Parallel>
void affine_backward(benchmark::State& state) {
  const auto s = affine_shape(state);
  const auto x = random_values(s.batch * s.in, 1);
  const auto w = random_values(s.out * s.in, 2);
  const auto dy = random_values(s.batch * s.out, 3);
  std::vector<float> dx(s.batch * s.in), dw(s.out * s.in), db(s.out);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::affine_backward_input<float>(s, dy, w, dx);
      k::parallel::affine_backward_params<float>(s, x, dy, dw, db);
    } else {
      k::serial::affine_backward_input<float>(s, dy, w, dx);
      k::serial::affine_backward_params<float>(s, x, dy, dw, db);
    }
    benchmark::DoNotOptimize(dx.data());
    benchmark::DoNotOptimize(dw.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(2 * s.batch * s.in * s.out));
}

template <bool Parallel>
void conv_forward(benchmark::State& state) {
  const auto s = conv_shape(state);
  const auto x = random_values(s.batch * s.steps_in * s.ch_in, 1);
  const auto w = random_values(s.ch_out * s.kernel * s.ch_in, 2);
  const auto b = random_values(s.ch_out, 3);
  std::vector<float> y(s.batch * s.steps_out() * s.ch_out);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::conv1d_forward<float>(s, x, w, b, y);
    } else {
      k::serial::conv1d_forward<float>(s, x, w, b, y);
    }
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() *
                          static_cast<long>(s.batch * s.steps_out() * s.ch_out * s.kernel * s.ch_in));
}

template <bool Parallel>
void conv_backward(benchmark::State& state) {
  const auto s = conv_shape(state);
  const auto x = random_values(s.batch * s.steps_in * s.ch_in, 1);
  const auto w = random_values(s.ch_out * s.kernel * s.ch_in, 2);
  const auto dy = random_values(s.batch * s.steps_out() * s.ch_out, 3);
  std::vector<float> dx(x.size()), dw(w.size()), db(s.ch_out);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::conv1d_backward_input<float>(s, dy, w, dx);
      k::parallel::conv1d_backward_params<float>(s, x, dy, dw, db);
    } else {
      k::serial::conv1d_backward_input<float>(s, dy, w, dx);
      k::serial::conv1d_backward_params<float>(s, x, dy, dw, db);
    }
    benchmark::DoNotOptimize(dx.data());
    benchmark::DoNotOptimize(dw.data());
  }
  state.SetItemsProcessed(state.iterations() *
                          static_cast<long>(2 * s.batch * s.steps_out() * s.ch_out * s.kernel * s.ch_in));
}

}  // namespace

BENCHMARK(affine_forward<false>)->Name("affine_forward/serial")->Arg(16)->Arg(64);
BENCHMARK(affine_forward<true>)->Name("affine_forward/parallel")->Arg(16)->Arg(64);
BENCHMARK(affine_backward<false>)->Name("affine_backward/serial")->Arg(16)->Arg(64);
BENCHMARK(affine_backward<true>)->Name("affine_backward/parallel")->Arg(16)->Arg(64);
BENCHMARK(conv_forward<false>)->Name("conv1d_forward/serial")->Arg(16)->Arg(64);
BENCHMARK(conv_forward<true>)->Name("conv1d_forward/parallel")->Arg(16)->Arg(64);
BENCHMARK(conv_backward<false>)->Name("conv1d_backward/serial")->Arg(16)->Arg(64);
BENCHMARK(conv_backward<true>)->Name("conv1d_backward/parallel")->Arg(16)->Arg(64);

BENCHMARK_MAIN();
