#include "valerian/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "valerian/kernels.hpp"

namespace valerian {

namespace kp = kernels::parallel;

ExtractorConfig ExtractorConfig::full() { return {}; }

ExtractorConfig ExtractorConfig::reduced() {
  ExtractorConfig c;
  c.conv_layers = 2;
  c.lstm_layers = 1;
  c.lstm_hidden = 64;
  return c;
}

void ExtractorConfig::validate() const {
  if (input_steps < 1 || input_channels < 1 || conv_layers < 0 || conv_channels < 1 ||
      kernel_size < 1 || stride < 1 || lstm_layers < 1 || lstm_hidden < 1) {
    throw ConfigError("extractor: sizes must be positive (conv_layers >= 0, lstm_layers >= 1)");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("extractor: dropout must be in [0, 1)");
  if (conv_output_steps() < 1) throw ConfigError("extractor: input too short for the conv stack");
}

int ExtractorConfig::conv_output_steps() const {
  int t = input_steps;
  for (int l = 0; l < conv_layers; ++l) {
    if (t < kernel_size) return 0;
    t = (t - kernel_size) / stride + 1;
  }
  return t;
}

std::vector<LayerLayout> extractor_layout(const ExtractorConfig& cfg) {
  std::vector<LayerLayout> layers;
  std::size_t offset = 0;
  std::size_t steps = static_cast<std::size_t>(cfg.input_steps);
  std::size_t width = static_cast<std::size_t>(cfg.input_channels);
  for (int l = 0; l < cfg.conv_layers; ++l) {
    LayerLayout L{LayerKind::Conv};
    L.in = width;
    L.out = static_cast<std::size_t>(cfg.conv_channels);
    L.kernel = static_cast<std::size_t>(cfg.kernel_size);
    L.stride = static_cast<std::size_t>(cfg.stride);
    L.steps_in = steps;
    L.steps_out = steps < L.kernel ? 0 : (steps - L.kernel) / L.stride + 1;
    L.weight_offset = offset;
    L.weight_count = L.out * L.kernel * L.in;
    L.bias_offset = offset + L.weight_count;
    L.bias_count = L.out;
    offset += L.weight_count + L.bias_count;
    steps = L.steps_out;
    width = L.out;
    layers.push_back(L);
  }
  for (int l = 0; l < cfg.lstm_layers; ++l) {
    LayerLayout L{LayerKind::Lstm};
    L.in = width;
    L.out = static_cast<std::size_t>(cfg.lstm_hidden);
    L.steps_in = L.steps_out = steps;
    L.weight_offset = offset;
    L.weight_count = 4 * L.out * (L.in + L.out);
    L.bias_offset = offset + L.weight_count;
    L.bias_count = 4 * L.out;
    offset += L.weight_count + L.bias_count;
    width = L.out;
    layers.push_back(L);
  }
  return layers;
}

std::size_t ExtractorConfig::parameter_count() const {
  const auto layers = extractor_layout(*this);
  return layers.empty() ? 0 : layers.back().bias_offset + layers.back().bias_count;
}

template <class Real>
int Head<Real>::local_index(int cls) const {
  const auto it = std::find(classes.begin(), classes.end(), cls);
  return it == classes.end() ? -1 : static_cast<int>(it - classes.begin());
}

// ---------------------------------------------------------------------------

template <class Real>
Head<Real> init_head(std::vector<int> classes, std::size_t in, std::uint64_t seed) {
  Head<Real> h;
  h.classes = std::move(classes);
  h.in = in;
  h.params.assign(h.out() * in + h.out(), Real(0));
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& w : h.weights()) w = static_cast<Real>(u(rng));
  return h;
}

template <class Real>
Model<Real> init_model(const ExtractorConfig& cfg, const std::vector<std::vector<int>>& classes_per_head,
                       std::uint64_t seed) {
  cfg.validate();
  Model<Real> m;
  m.config = cfg;
  m.theta.assign(cfg.parameter_count(), Real(0));
  Rng rng(mix_seed(seed, "extractor"));
  for (const auto& L : extractor_layout(cfg)) {
    double bound = 0.0;
    if (L.kind == LayerKind::Conv) {
      bound = std::sqrt(6.0 / static_cast<double>(L.kernel * L.in));  // He-uniform for ReLU
    } else {
      bound = 1.0 / std::sqrt(static_cast<double>(L.out));
    }
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t i = 0; i < L.weight_count; ++i) m.theta[L.weight_offset + i] = static_cast<Real>(u(rng));
    if (L.kind == LayerKind::Lstm) {
      for (std::size_t j = 0; j < L.out; ++j) m.theta[L.bias_offset + L.out + j] = Real(1);
    }
  }
  const auto f = static_cast<std::size_t>(cfg.feature_dim());
  for (std::size_t k = 0; k < classes_per_head.size(); ++k) {
    m.heads.push_back(init_head<Real>(classes_per_head[k], f, mix_seed(seed, "head/" + std::to_string(k))));
    m.head_subjects.emplace_back();
  }
  std::vector<int> kinds(8);
  for (int i = 0; i < 8; ++i) kinds[static_cast<std::size_t>(i)] = i;
  m.pretext = init_head<Real>(kinds, f, mix_seed(seed, "pretext"));
  // Each transformation labels 1 of 9 copies in a pretext batch; start at that prior.
  for (auto& b : m.pretext.bias()) b = static_cast<Real>(-std::log(8.0));
  return m;
}

template <class To, class From>
Model<To> convert_model(const Model<From>& m) {
  Model<To> out;
  out.config = m.config;
  out.theta.assign(m.theta.begin(), m.theta.end());
  auto conv_head = [](const Head<From>& h) {
    Head<To> r;
    r.classes = h.classes;
    r.in = h.in;
    r.params.assign(h.params.begin(), h.params.end());
    return r;
  };
  for (const auto& h : m.heads) out.heads.push_back(conv_head(h));
  out.head_subjects = m.head_subjects;
  out.pretext = conv_head(m.pretext);
  out.normalization = m.normalization;
  return out;
}

// ---------------------------------------------------------------------------

namespace {

template <class Real>
inline Real sigmoid(Real x) {
  return Real(1) / (Real(1) + std::exp(-x));
}

template <class Real>
void lstm_forward(const LayerLayout& L, std::span<const Real> theta, std::span<const Real> in,
                  std::size_t batch, std::span<Real> out, typename ExtractorTape<Real>::LstmCache& cache) {
  const std::size_t T = L.steps_in, D = L.in, H = L.out, W = D + H;
  const std::span<const Real> w = theta.subspan(L.weight_offset, L.weight_count);
  const std::span<const Real> b = theta.subspan(L.bias_offset, L.bias_count);
  cache.xh.assign(T * batch * W, Real(0));
  cache.gates.assign(T * batch * 4 * H, Real(0));
  cache.cell.assign((T + 1) * batch * H, Real(0));
  cache.tanh_cell.assign(T * batch * H, Real(0));
  std::vector<Real> pre(batch * 4 * H);
  const kernels::AffineShape shape{batch, W, 4 * H};
  for (std::size_t t = 0; t < T; ++t) {
    Real* xh = cache.xh.data() + t * batch * W;
    for (std::size_t r = 0; r < batch; ++r) {
      std::copy_n(in.data() + (r * T + t) * D, D, xh + r * W);
      if (t > 0) std::copy_n(out.data() + (r * T + t - 1) * H, H, xh + r * W + D);
    }
    kp::affine_forward<Real>(shape, {xh, batch * W}, w, b, pre);
    Real* gates = cache.gates.data() + t * batch * 4 * H;
    const Real* c_prev = cache.cell.data() + t * batch * H;
    Real* c_now = cache.cell.data() + (t + 1) * batch * H;
    Real* tc = cache.tanh_cell.data() + t * batch * H;
    for (std::size_t r = 0; r < batch; ++r) {
      const Real* a = pre.data() + r * 4 * H;
      Real* g = gates + r * 4 * H;
      for (std::size_t j = 0; j < H; ++j) {
        const Real i_g = sigmoid(a[j]);
        const Real f_g = sigmoid(a[H + j]);
        const Real c_g = std::tanh(a[2 * H + j]);
        const Real o_g = sigmoid(a[3 * H + j]);
        g[j] = i_g;
        g[H + j] = f_g;
        g[2 * H + j] = c_g;
        g[3 * H + j] = o_g;
        const Real c = f_g * c_prev[r * H + j] + i_g * c_g;
        c_now[r * H + j] = c;
        const Real th = std::tanh(c);
        tc[r * H + j] = th;
        out[(r * T + t) * H + j] = o_g * th;
      }
    }
  }
}

// dout: [B][T][H] gradient w.r.t. every hidden output; din may be empty.
template <class Real>
void lstm_backward(const LayerLayout& L, std::span<const Real> theta,
                   const typename ExtractorTape<Real>::LstmCache& cache, std::size_t batch,
                   std::span<const Real> dout, std::span<Real> din, std::span<Real> dtheta) {
  const std::size_t T = L.steps_in, D = L.in, H = L.out, W = D + H;
  const std::span<const Real> w = theta.subspan(L.weight_offset, L.weight_count);
  const std::span<Real> dw = dtheta.subspan(L.weight_offset, L.weight_count);
  const std::span<Real> db = dtheta.subspan(L.bias_offset, L.bias_count);
  std::vector<Real> dh_next(batch * H, Real(0)), dc_next(batch * H, Real(0));
  std::vector<Real> da(batch * 4 * H), dxh(batch * W);
  const kernels::AffineShape shape{batch, W, 4 * H};
  for (std::size_t t = T; t-- > 0;) {
    const Real* gates = cache.gates.data() + t * batch * 4 * H;
    const Real* c_prev = cache.cell.data() + t * batch * H;
    const Real* tc = cache.tanh_cell.data() + t * batch * H;
    for (std::size_t r = 0; r < batch; ++r) {
      const Real* g = gates + r * 4 * H;
      Real* d = da.data() + r * 4 * H;
      for (std::size_t j = 0; j < H; ++j) {
        const Real i_g = g[j], f_g = g[H + j], c_g = g[2 * H + j], o_g = g[3 * H + j];
        const Real th = tc[r * H + j];
        const Real dh = dout[(r * T + t) * H + j] + dh_next[r * H + j];
        const Real d_o = dh * th;
        const Real dc = dc_next[r * H + j] + dh * o_g * (Real(1) - th * th);
        dc_next[r * H + j] = dc * f_g;
        d[j] = dc * c_g * i_g * (Real(1) - i_g);
        d[H + j] = dc * c_prev[r * H + j] * f_g * (Real(1) - f_g);
        d[2 * H + j] = dc * i_g * (Real(1) - c_g * c_g);
        d[3 * H + j] = d_o * o_g * (Real(1) - o_g);
      }
    }
    const std::span<const Real> xh{cache.xh.data() + t * batch * W, batch * W};
    kp::affine_backward_params<Real>(shape, xh, da, dw, db);
    kp::affine_backward_input<Real>(shape, da, w, dxh);
    for (std::size_t r = 0; r < batch; ++r) {
      if (!din.empty()) std::copy_n(dxh.data() + r * W, D, din.data() + (r * T + t) * D);
      std::copy_n(dxh.data() + r * W + D, H, dh_next.data() + r * H);
    }
  }
}

}  // namespace

template <class Real>
void extract_features(const Model<Real>& m, std::span<const Real> x, std::size_t batch, std::span<Real> z,
                      ExtractorTape<Real>* tape) {
  const auto layers = extractor_layout(m.config);
  const std::size_t expect = batch * static_cast<std::size_t>(m.config.input_steps * m.config.input_channels);
  if (x.size() != expect) throw ConfigError("extract_features: input shape mismatch");
  const std::span<const Real> theta(m.theta);
  std::vector<Real> current(x.begin(), x.end());
  ExtractorTape<Real> local;
  ExtractorTape<Real>& tp = tape ? *tape : local;
  tp.batch = batch;
  tp.conv_out.clear();
  tp.lstm.clear();
  if (tape) tp.input.assign(x.begin(), x.end());

  for (const auto& L : layers) {
    if (L.kind == LayerKind::Conv) {
      const kernels::ConvShape s{batch, L.steps_in, L.in, L.out, L.kernel, L.stride};
      std::vector<Real> y(batch * L.steps_out * L.out);
      kp::conv1d_forward<Real>(s, current, theta.subspan(L.weight_offset, L.weight_count),
                               theta.subspan(L.bias_offset, L.bias_count), y);
      for (auto& v : y) v = std::max(v, Real(0));
      current = std::move(y);
      if (tape) tp.conv_out.push_back(current);
    } else {
      std::vector<Real> y(batch * L.steps_out * L.out);
      tp.lstm.emplace_back();
      lstm_forward<Real>(L, theta, current, batch, y, tp.lstm.back());
      current = std::move(y);
    }
  }
  if (!tape) tp.lstm.clear();
  const auto& top = layers.back();
  const std::size_t T = top.steps_out, H = top.out;
  if (z.size() != batch * H) throw ConfigError("extract_features: feature buffer mismatch");
  for (std::size_t r = 0; r < batch; ++r) std::copy_n(current.data() + (r * T + T - 1) * H, H, z.data() + r * H);
}

template <class Real>
void extract_backward(const Model<Real>& m, const ExtractorTape<Real>& tape, std::span<const Real> dz,
                      std::span<Real> dtheta) {
  const auto layers = extractor_layout(m.config);
  const std::size_t batch = tape.batch;
  const std::span<const Real> theta(m.theta);
  if (dtheta.size() != m.theta.size()) throw ConfigError("extract_backward: gradient size mismatch");

  const auto& top = layers.back();
  std::vector<Real> grad(batch * top.steps_out * top.out, Real(0));
  for (std::size_t r = 0; r < batch; ++r) {
    std::copy_n(dz.data() + r * top.out, top.out, grad.data() + (r * top.steps_out + top.steps_out - 1) * top.out);
  }
  std::size_t lstm_index = tape.lstm.size();
  std::size_t conv_index = tape.conv_out.size();
  for (std::size_t li = layers.size(); li-- > 0;) {
    const auto& L = layers[li];
    const bool need_input_grad = li > 0;
    std::vector<Real> din(need_input_grad ? batch * L.steps_in * L.in : 0);
    if (L.kind == LayerKind::Lstm) {
      --lstm_index;
      lstm_backward<Real>(L, theta, tape.lstm[lstm_index], batch, grad, din, dtheta);
    } else {
      --conv_index;
      const auto& out = tape.conv_out[conv_index];
      for (std::size_t i = 0; i < grad.size(); ++i) {
        if (!(out[i] > Real(0))) grad[i] = Real(0);
      }
      const std::span<const Real> input = conv_index == 0 ? std::span<const Real>(tape.input)
                                                          : std::span<const Real>(tape.conv_out[conv_index - 1]);
      const kernels::ConvShape s{batch, L.steps_in, L.in, L.out, L.kernel, L.stride};
      kp::conv1d_backward_params<Real>(s, input, grad, dtheta.subspan(L.weight_offset, L.weight_count),
                                       dtheta.subspan(L.bias_offset, L.bias_count));
      if (need_input_grad) {
        kp::conv1d_backward_input<Real>(s, grad, theta.subspan(L.weight_offset, L.weight_count), din);
      }
    }
    grad = std::move(din);
  }
}

template <class Real>
void head_forward(const Head<Real>& h, std::span<const Real> z, std::size_t batch, std::span<Real> logits) {
  kp::affine_forward<Real>({batch, h.in, h.out()}, z, h.weights(), h.bias(), logits);
}

template <class Real>
void head_backward(const Head<Real>& h, std::span<const Real> z, std::span<const Real> dlogits,
                   std::size_t batch, std::span<Real> dparams, std::span<Real> dz) {
  const kernels::AffineShape s{batch, h.in, h.out()};
  if (!dparams.empty()) {
    kp::affine_backward_params<Real>(s, z, dlogits, dparams.subspan(0, h.out() * h.in),
                                     dparams.subspan(h.out() * h.in, h.out()));
  }
  if (!dz.empty()) kp::affine_backward_input<Real>(s, dlogits, h.weights(), dz);
}

template <class Real>
void softmax_rows(std::span<Real> values, std::size_t width) {
  for (std::size_t r = 0; r * width < values.size(); ++r) {
    Real* v = values.data() + r * width;
    const Real mx = *std::max_element(v, v + width);
    Real sum = 0;
    for (std::size_t j = 0; j < width; ++j) {
      v[j] = std::exp(v[j] - mx);
      sum += v[j];
    }
    for (std::size_t j = 0; j < width; ++j) v[j] /= sum;
  }
}

template <class Real>
std::vector<Real> dropout_mask(std::size_t n, double rate, Rng& rng) {
  std::vector<Real> mask(n, Real(1));
  if (rate <= 0.0) return mask;
  std::bernoulli_distribution drop(rate);
  const Real keep = static_cast<Real>(1.0 / (1.0 - rate));
  for (auto& v : mask) v = drop(rng) ? Real(0) : keep;
  return mask;
}

template <class Real>
std::vector<Real> pack_windows(std::span<const Matrix<float>* const> windows) {
  std::vector<Real> out;
  if (windows.empty()) return out;
  const std::size_t per = windows.front()->size();
  out.reserve(per * windows.size());
  for (const auto* w : windows) {
    if (w->size() != per) throw ConfigError("pack_windows: windows differ in shape");
    out.insert(out.end(), w->values().begin(), w->values().end());
  }
  return out;
}

namespace {
constexpr std::size_t kInferenceChunk = 256;

template <class Real>
void check_window_shape(const Model<Real>& m, const Matrix<float>& w) {
  if (w.rows() != static_cast<std::size_t>(m.config.input_steps) ||
      w.cols() != static_cast<std::size_t>(m.config.input_channels)) {
    throw ConfigError("window shape " + std::to_string(w.rows()) + "x" + std::to_string(w.cols()) +
                      " does not match model input " + std::to_string(m.config.input_steps) + "x" +
                      std::to_string(m.config.input_channels));
  }
}
}  // namespace

template <class Real>
Matrix<double> features(const Model<Real>& m, std::span<const Matrix<float>* const> windows) {
  const auto f = static_cast<std::size_t>(m.config.feature_dim());
  Matrix<double> out(windows.size(), f);
  for (std::size_t start = 0; start < windows.size(); start += kInferenceChunk) {
    const std::size_t n = std::min(kInferenceChunk, windows.size() - start);
    const auto chunk = windows.subspan(start, n);
    for (const auto* w : chunk) check_window_shape(m, *w);
    const auto x = pack_windows<Real>(chunk);
    std::vector<Real> z(n * f);
    extract_features<Real>(m, x, n, z, nullptr);
    for (std::size_t i = 0; i < n * f; ++i) out.values()[start * f + i] = static_cast<double>(z[i]);
  }
  return out;
}

template <class Real>
Prediction forward(const Model<Real>& m, std::size_t head, std::span<const Matrix<float>* const> windows,
                   Mode mode, Rng* dropout_rng) {
  if (head >= m.heads.size()) throw ConfigError("forward: head index " + std::to_string(head) + " out of range");
  const auto& h = m.heads[head];
  Prediction pred;
  pred.z = features(m, windows);
  const std::size_t n = windows.size(), f = h.in, c = h.out();
  std::vector<Real> z(pred.z.values().begin(), pred.z.values().end());
  if (mode == Mode::Train && m.config.dropout > 0.0) {
    if (!dropout_rng) throw ConfigError("forward: train mode needs a dropout generator");
    const auto mask = dropout_mask<Real>(z.size(), m.config.dropout, *dropout_rng);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] *= mask[i];
  }
  std::vector<Real> logits(n * c);
  head_forward<Real>(h, z, n, logits);
  softmax_rows<Real>(logits, c);
  pred.p = Matrix<double>(n, c);
  std::copy(logits.begin(), logits.end(), pred.p.data());
  (void)f;
  return pred;
}

#define VALERIAN_NETWORK_INSTANTIATE(Real)                                                            \
  template struct Head<Real>;                                                                         \
  template Head<Real> init_head<Real>(std::vector<int>, std::size_t, std::uint64_t);                  \
  template Model<Real> init_model<Real>(const ExtractorConfig&, const std::vector<std::vector<int>>&,  \
                                        std::uint64_t);                                               \
  template void extract_features<Real>(const Model<Real>&, std::span<const Real>, std::size_t,         \
                                       std::span<Real>, ExtractorTape<Real>*);                        \
  template void extract_backward<Real>(const Model<Real>&, const ExtractorTape<Real>&,                 \
                                       std::span<const Real>, std::span<Real>);                       \
  template void head_forward<Real>(const Head<Real>&, std::span<const Real>, std::size_t,             \
                                   std::span<Real>);                                                  \
  template void head_backward<Real>(const Head<Real>&, std::span<const Real>, std::span<const Real>,  \
                                    std::size_t, std::span<Real>, std::span<Real>);                   \
  template void softmax_rows<Real>(std::span<Real>, std::size_t);                                     \
  template std::vector<Real> dropout_mask<Real>(std::size_t, double, Rng&);                           \
  template std::vector<Real> pack_windows<Real>(std::span<const Matrix<float>* const>);               \
  template Matrix<double> features<Real>(const Model<Real>&, std::span<const Matrix<float>* const>);  \
  template Prediction forward<Real>(const Model<Real>&, std::size_t, std::span<const Matrix<float>* const>, \
                                    Mode, Rng*);

VALERIAN_NETWORK_INSTANTIATE(float)
VALERIAN_NETWORK_INSTANTIATE(double)
#undef VALERIAN_NETWORK_INSTANTIATE

template Model<double> convert_model<double, float>(const Model<float>&);
template Model<float> convert_model<float, double>(const Model<double>&);
template Model<float> convert_model<float, float>(const Model<float>&);
template Model<double> convert_model<double, double>(const Model<double>&);

}  // namespace valerian
