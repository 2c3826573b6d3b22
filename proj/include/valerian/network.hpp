#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "valerian/common.hpp"
#include "valerian/preprocess.hpp"

namespace valerian {

/// DeepConvLSTM feature extractor: valid temporal convolutions with ReLU,
/// then stacked LSTMs; the feature is the last hidden state of the top LSTM.
struct ExtractorConfig {
  int input_steps = 100;
  int input_channels = 6;
  int conv_layers = 4;
  int conv_channels = 64;
  int kernel_size = 5;
  int stride = 1;
  int lstm_layers = 2;
  int lstm_hidden = 128;
  double dropout = 0.25;

  static ExtractorConfig full();
  /// Two conv layers and one 64-unit LSTM (about 56k parameters).
  static ExtractorConfig reduced();

  void validate() const;
  int conv_output_steps() const;
  int feature_dim() const { return lstm_hidden; }
  std::size_t parameter_count() const;

  bool operator==(const ExtractorConfig&) const = default;
};

enum class LayerKind { Conv, Lstm };

/// Where a layer's parameters live inside the flat extractor vector.
struct LayerLayout {
  LayerKind kind;
  std::size_t in = 0;       // input channels / LSTM input width
  std::size_t out = 0;      // conv channels / LSTM hidden
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t steps_in = 0;
  std::size_t steps_out = 0;
  std::size_t weight_offset = 0;
  std::size_t weight_count = 0;
  std::size_t bias_offset = 0;
  std::size_t bias_count = 0;
};

std::vector<LayerLayout> extractor_layout(const ExtractorConfig& cfg);

/// Affine map feature -> outputs. `classes[j]` is the global class id of output j.
template <class Real>
struct Head {
  std::vector<int> classes;
  std::size_t in = 0;
  std::vector<Real> params;  // W [out x in] then b [out]

  std::size_t out() const { return classes.size(); }
  std::span<Real> weights() { return {params.data(), out() * in}; }
  std::span<const Real> weights() const { return {params.data(), out() * in}; }
  std::span<Real> bias() { return {params.data() + out() * in, out()}; }
  std::span<const Real> bias() const { return {params.data() + out() * in, out()}; }
  /// Output index of a global class, or -1.
  int local_index(int cls) const;

  bool operator==(const Head&) const = default;
};

template <class Real>
struct Model {
  ExtractorConfig config;
  std::vector<Real> theta;
  std::vector<Head<Real>> heads;
  std::vector<std::string> head_subjects;  // subject id per head ("" for pooled heads)
  Head<Real> pretext;                      // one logistic output per transformation
  std::optional<NormalizationStats> normalization;

  bool operator==(const Model&) const = default;
};

/// Fan-in scaled uniform extractor weights, zero biases (LSTM forget gate at 1),
/// small uniform head weights with zero bias. Deterministic in `seed`.
template <class Real>
Model<Real> init_model(const ExtractorConfig& cfg, const std::vector<std::vector<int>>& classes_per_head,
                       std::uint64_t seed);

template <class Real>
Head<Real> init_head(std::vector<int> classes, std::size_t in, std::uint64_t seed);

template <class To, class From>
Model<To> convert_model(const Model<From>& m);

/// Activations kept from a forward pass for backpropagation.
template <class Real>
struct ExtractorTape {
  std::size_t batch = 0;
  std::vector<Real> input;
  std::vector<std::vector<Real>> conv_out;  // post-ReLU, per conv layer
  struct LstmCache {
    std::vector<Real> xh;     // [T][B][in + H]
    std::vector<Real> gates;  // [T][B][4H] activated i, f, g, o
    std::vector<Real> cell;   // [T + 1][B][H]
    std::vector<Real> tanh_cell;  // [T][B][H]
  };
  std::vector<LstmCache> lstm;
};

/// z [batch x feature_dim] = extractor(x), x packed [batch x steps x channels].
template <class Real>
void extract_features(const Model<Real>& m, std::span<const Real> x, std::size_t batch, std::span<Real> z,
                      ExtractorTape<Real>* tape);

/// Accumulates d(loss)/d(theta) into `dtheta` given d(loss)/dz.
template <class Real>
void extract_backward(const Model<Real>& m, const ExtractorTape<Real>& tape, std::span<const Real> dz,
                      std::span<Real> dtheta);

template <class Real>
void head_forward(const Head<Real>& h, std::span<const Real> z, std::size_t batch, std::span<Real> logits);

/// dparams += d/dparams, dz = d/dz (either span may be empty to skip it).
template <class Real>
void head_backward(const Head<Real>& h, std::span<const Real> z, std::span<const Real> dlogits,
                   std::size_t batch, std::span<Real> dparams, std::span<Real> dz);

/// In-place row softmax over `width` columns.
template <class Real>
void softmax_rows(std::span<Real> values, std::size_t width);

/// Inverted-dropout multipliers: 0 with probability `rate`, else 1 / (1 - rate).
template <class Real>
std::vector<Real> dropout_mask(std::size_t n, double rate, Rng& rng);

enum class Mode { Train, Eval };

struct Prediction {
  Matrix<double> p;  // [batch x head width], rows on the simplex
  Matrix<double> z;  // [batch x feature_dim]
};

/// Packs windows into a contiguous [batch x steps x channels] buffer.
template <class Real>
std::vector<Real> pack_windows(std::span<const Matrix<float>* const> windows);

template <class Real>
Prediction forward(const Model<Real>& m, std::size_t head, std::span<const Matrix<float>* const> windows,
                   Mode mode, Rng* dropout_rng = nullptr);

template <class Real>
Matrix<double> features(const Model<Real>& m, std::span<const Matrix<float>* const> windows);

}  // namespace valerian
