#include "valerian/checkpoint.hpp"

#include "binary_io.hpp"

namespace valerian {

namespace {

void put_head(io::Writer& w, const Head<float>& h) {
  w.put_array(h.classes);
  w.put<std::uint64_t>(h.in);
  w.put_array(h.params);
}

Head<float> get_head(io::Reader& r) {
  Head<float> h;
  h.classes = r.get_array<int>();
  h.in = static_cast<std::size_t>(r.get<std::uint64_t>());
  h.params = r.get_array<float>();
  if (h.params.size() != h.out() * h.in + h.out()) {
    throw FormatError("'" + r.path().string() + "': head parameter count does not match its shape");
  }
  return h;
}

}  // namespace

void save_model(const Model<float>& m, const std::filesystem::path& path, const CheckpointMeta& meta) {
  io::Writer w(path);
  w.magic("VALM");
  w.put<std::uint32_t>(kModelFormatVersion);
  const auto& c = m.config;
  for (int v : {c.input_steps, c.input_channels, c.conv_layers, c.conv_channels, c.kernel_size, c.stride,
                c.lstm_layers, c.lstm_hidden}) {
    w.put<std::int32_t>(v);
  }
  w.put<double>(c.dropout);
  w.put_array(m.theta);
  w.put<std::uint64_t>(m.heads.size());
  for (std::size_t k = 0; k < m.heads.size(); ++k) {
    w.put_string(k < m.head_subjects.size() ? m.head_subjects[k] : std::string());
    put_head(w, m.heads[k]);
  }
  put_head(w, m.pretext);
  w.put<std::uint8_t>(m.normalization ? 1 : 0);
  if (m.normalization) {
    const auto& s = *m.normalization;
    w.put<std::uint8_t>(static_cast<std::uint8_t>(s.kind));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(s.scope));
    w.put_array(s.center);
    w.put_array(s.scale);
    std::vector<std::uint8_t> clamped(s.clamped.begin(), s.clamped.end());
    w.put_array(clamped);
  }
  w.put_string(meta.method);
  w.put<std::int32_t>(meta.epoch);
  w.put<std::uint64_t>(meta.seed);
  w.finish();
}

Model<float> load_model(const std::filesystem::path& path, CheckpointMeta* meta) {
  io::Reader r(path);
  r.expect_magic("VALM");
  const auto version = r.get<std::uint32_t>();
  if (version != kModelFormatVersion) {
    throw FormatError("'" + path.string() + "': unsupported model format version " + std::to_string(version));
  }
  Model<float> m;
  auto& c = m.config;
  for (int* v : {&c.input_steps, &c.input_channels, &c.conv_layers, &c.conv_channels, &c.kernel_size, &c.stride,
                 &c.lstm_layers, &c.lstm_hidden}) {
    *v = r.get<std::int32_t>();
  }
  c.dropout = r.get<double>();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError("'" + path.string() + "': invalid extractor config (" + e.what() + ")");
  }
  m.theta = r.get_array<float>();
  if (m.theta.size() != c.parameter_count()) {
    throw FormatError("'" + path.string() + "': extractor parameter count does not match its config");
  }
  const auto heads = r.get<std::uint64_t>();
  if (heads > 1u << 20) throw FormatError("'" + path.string() + "': truncated or corrupt file");
  for (std::uint64_t k = 0; k < heads; ++k) {
    m.head_subjects.push_back(r.get_string());
    m.heads.push_back(get_head(r));
  }
  m.pretext = get_head(r);
  if (r.get<std::uint8_t>() != 0) {
    NormalizationStats s;
    s.kind = static_cast<NormalizationKind>(r.get<std::uint8_t>());
    s.scope = static_cast<FitScope>(r.get<std::uint8_t>());
    s.center = r.get_array<double>();
    s.scale = r.get_array<double>();
    const auto clamped = r.get_array<std::uint8_t>();
    s.clamped.assign(clamped.begin(), clamped.end());
    m.normalization = s;
  }
  CheckpointMeta stored;
  stored.method = r.get_string();
  stored.epoch = r.get<std::int32_t>();
  stored.seed = r.get<std::uint64_t>();
  if (meta) *meta = stored;
  return m;
}

}  // namespace valerian
