#include "valerian/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"

namespace valerian {

namespace fs = std::filesystem;

std::vector<int> SubjectDomain::classes_present() const {
  std::set<int> seen;
  for (const auto& w : windows) {
    if (auto l = w.clean_label ? w.clean_label : w.observed_label()) seen.insert(*l);
  }
  return {seen.begin(), seen.end()};
}

std::size_t MultiSubjectDataset::index_of(const std::string& subject_id) const {
  for (std::size_t i = 0; i < domains.size(); ++i) {
    if (domains[i].subject_id == subject_id) return i;
  }
  throw ConfigError("unknown subject id '" + subject_id + "'");
}

const SubjectDomain& MultiSubjectDataset::domain(const std::string& subject_id) const {
  return domains[index_of(subject_id)];
}

std::size_t MultiSubjectDataset::window_count() const {
  std::size_t n = 0;
  for (const auto& d : domains) n += d.windows.size();
  return n;
}

void MultiSubjectDataset::validate() const {
  if (domains.empty()) throw ConfigError("dataset has no subjects");
  const int c = schema.num_classes();
  std::set<std::string> ids;
  for (const auto& d : domains) {
    if (!ids.insert(d.subject_id).second) {
      throw ConfigError("duplicate subject id '" + d.subject_id + "'");
    }
    if (!d.flip_mask.empty() && d.flip_mask.size() != d.windows.size()) {
      throw ConfigError("subject '" + d.subject_id + "': flip mask length mismatch");
    }
    for (const auto& w : d.windows) {
      if (w.subject_id != d.subject_id) {
        throw ConfigError("window " + std::to_string(w.window_id) + " filed under subject '" +
                          d.subject_id + "' but tagged '" + w.subject_id + "'");
      }
      for (auto l : {w.clean_label, w.noisy_label}) {
        if (l && (*l < 0 || *l >= c)) {
          throw ConfigError("subject '" + d.subject_id + "': label out of range");
        }
      }
      if (w.values.cols() != schema.channels.size()) {
        throw ConfigError("subject '" + d.subject_id + "': channel count mismatch");
      }
    }
  }
}

std::vector<std::string> default_channel_names() {
  return {"acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z"};
}

// ---------------------------------------------------------------------------

std::array<double, 9> axis_angle_matrix(const std::array<double, 3>& axis, double angle) {
  const double n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
  if (n == 0.0) throw ConfigError("rotation axis must be nonzero");
  const double x = axis[0] / n, y = axis[1] / n, z = axis[2] / n;
  const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
  return {t * x * x + c,     t * x * y - s * z, t * x * z + s * y,
          t * x * y + s * z, t * y * y + c,     t * y * z - s * x,
          t * x * z - s * y, t * y * z + s * x, t * z * z + c};
}

SyntheticSpec SyntheticSpec::defaults(int num_subjects, int num_classes, double subject_gap) {
  SyntheticSpec spec;
  spec.num_subjects = num_subjects;
  spec.num_classes = num_classes;
  Rng rng(0x5EEDC1A55ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto random_axis = [&] {
    std::array<double, 3> a{};
    double n = 0.0;
    while (n < 1e-3) {
      for (auto& v : a) v = normal(rng);
      n = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
    }
    for (auto& v : a) v /= n;
    return a;
  };
  for (int c = 0; c < num_classes; ++c) {
    ClassPattern p;
    p.frequency_hz = 0.8 + 0.5 * c;
    p.amplitude = 1.0 + 0.3 * (c % 2);
    p.harmonic_ratio = 0.6;
    p.harmonic_phase = std::numbers::pi * 0.25 * c;
    p.accel_axis = random_axis();
    p.gyro_axis = random_axis();
    p.gyro_gain = 0.5 + 0.2 * c;
    spec.classes.push_back(p);
  }
  for (int k = 0; k < num_subjects; ++k) {
    SubjectOffset o;
    o.amplitude_scale = 1.0 + subject_gap * 0.3 * (2.0 * unit(rng) - 1.0);
    o.frequency_shift_hz = subject_gap * 0.25 * (2.0 * unit(rng) - 1.0);
    o.rotation_axis = random_axis();
    o.rotation_angle = subject_gap * std::numbers::pi * 0.5 * unit(rng);
    spec.subjects.push_back(o);
  }
  return spec;
}

void SyntheticSpec::validate() const {
  if (num_subjects < 2) throw ConfigError("synthetic dataset needs at least 2 subjects");
  if (num_classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (trials_per_class < 1) throw ConfigError("trials_per_class must be >= 1");
  if (sample_rate_hz <= 0 || trial_seconds <= 0) throw ConfigError("rates must be positive");
  if (static_cast<int>(classes.size()) != num_classes) {
    throw ConfigError("synthetic dataset: class pattern count != num_classes");
  }
  if (static_cast<int>(subjects.size()) != num_subjects) {
    throw ConfigError("synthetic dataset: subject offset count != num_subjects");
  }
  const double nyquist = sample_rate_hz / 2.0;
  for (const auto& c : classes) {
    for (const auto& s : subjects) {
      const double f = c.frequency_hz + s.frequency_shift_hz;
      if (f <= 0.0 || 2.0 * f >= nyquist) {
        throw ConfigError("synthetic dataset: frequency " + std::to_string(2.0 * f) +
                          " Hz is not below Nyquist " + std::to_string(nyquist) + " Hz");
      }
    }
  }
}

MultiSubjectDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  MultiSubjectDataset ds;
  ds.schema.sample_rate_hz = spec.sample_rate_hz;
  ds.schema.channels = default_channel_names();
  for (int c = 0; c < spec.num_classes; ++c) ds.schema.classes.push_back("class" + std::to_string(c));

  const auto n = static_cast<std::size_t>(std::llround(spec.trial_seconds * spec.sample_rate_hz));
  constexpr double two_pi = 2.0 * std::numbers::pi;

  for (int k = 0; k < spec.num_subjects; ++k) {
    const auto& subj = spec.subjects[static_cast<std::size_t>(k)];
    const auto rot = axis_angle_matrix(subj.rotation_axis, subj.rotation_angle);
    SubjectDomain dom;
    dom.subject_id = "S" + std::to_string(k + 1);
    dom.num_classes = spec.num_classes;
    Rng noise_rng(mix_seed(seed, "noise/" + dom.subject_id));
    std::normal_distribution<double> noise(0.0, 1.0);

    for (int c = 0; c < spec.num_classes; ++c) {
      const auto& cls = spec.classes[static_cast<std::size_t>(c)];
      const double f = cls.frequency_hz + subj.frequency_shift_hz;
      for (int trial = 0; trial < spec.trials_per_class; ++trial) {
        // Trial-level randomness depends on (class, trial) only so that subjects
        // with identical offsets produce identical recordings.
        Rng trial_rng(mix_seed(seed, static_cast<std::uint64_t>(c) * 1000003ULL + trial));
        std::uniform_real_distribution<double> phase_dist(0.0, two_pi);
        std::uniform_real_distribution<double> jitter_dist(1.0 - spec.amplitude_jitter,
                                                           1.0 + spec.amplitude_jitter);
        const double psi = phase_dist(trial_rng);
        const double amp = cls.amplitude * subj.amplitude_scale * jitter_dist(trial_rng);

        Trial tr;
        tr.label = c;
        tr.samples = Matrix<float>(n, 6);
        tr.timestamps.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
          const double t = static_cast<double>(i) / spec.sample_rate_hz;
          tr.timestamps[i] = t;
          const double arg = two_pi * f * t + psi;
          const double wave = std::sin(arg) + cls.harmonic_ratio * std::sin(2.0 * arg + cls.harmonic_phase);
          const double dwave = std::cos(arg) + cls.harmonic_ratio * std::cos(2.0 * arg + cls.harmonic_phase);
          std::array<double, 3> acc{}, gyr{};
          for (int a = 0; a < 3; ++a) {
            acc[a] = amp * wave * cls.accel_axis[a];
            gyr[a] = amp * cls.gyro_gain * dwave * cls.gyro_axis[a];
          }
          acc[2] += spec.gravity;
          for (int r = 0; r < 3; ++r) {
            double ra = 0.0, rg = 0.0;
            for (int a = 0; a < 3; ++a) {
              ra += rot[r * 3 + a] * acc[a];
              rg += rot[r * 3 + a] * gyr[a];
            }
            if (spec.noise_std > 0.0) {
              ra += spec.noise_std * noise(noise_rng);
              rg += spec.noise_std * noise(noise_rng);
            }
            tr.samples(i, r) = static_cast<float>(ra);
            tr.samples(i, 3 + r) = static_cast<float>(rg);
          }
        }
        dom.trials.push_back(std::move(tr));
      }
    }
    ds.domains.push_back(std::move(dom));
  }
  return ds;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& cell, const fs::path& file, std::size_t row) {
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite");
    return v;
  } catch (const std::exception&) {
    throw FormatError(file.string() + ":" + std::to_string(row) + ": invalid number '" + cell + "'");
  }
}

Trial read_trial_csv(const fs::path& file, std::size_t channels, int label) {
  std::ifstream in(file);
  if (!in) throw ConfigError("missing trial file '" + file.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw FormatError(file.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv_line(line);
  if (header.size() != channels + 1) {
    throw ConfigError(file.string() + ":1: expected " + std::to_string(channels) +
                      " channels after timestamp, header has " +
                      std::to_string(header.size() == 0 ? 0 : header.size() - 1));
  }
  std::vector<float> values;
  Trial tr;
  tr.label = label;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != channels + 1) {
      throw ConfigError(file.string() + ":" + std::to_string(row) + ": expected " +
                        std::to_string(channels + 1) + " columns, got " +
                        std::to_string(cells.size()));
    }
    const double ts = parse_number(cells[0], file, row);
    if (!tr.timestamps.empty() && ts <= tr.timestamps.back()) {
      throw ConfigError(file.string() + ":" + std::to_string(row) +
                        ": timestamps are not strictly increasing");
    }
    tr.timestamps.push_back(ts);
    for (std::size_t c = 1; c <= channels; ++c) {
      values.push_back(static_cast<float>(parse_number(cells[c], file, row)));
    }
  }
  tr.samples = Matrix<float>(tr.timestamps.size(), channels);
  std::copy(values.begin(), values.end(), tr.samples.data());
  return tr;
}

}  // namespace

MultiSubjectDataset load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("missing manifest '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  MultiSubjectDataset ds;
  try {
    ds.schema.sample_rate_hz = j.at("sample_rate_hz").get<double>();
    ds.schema.channels = j.at("channels").get<std::vector<std::string>>();
    ds.schema.classes = j.at("classes").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (ds.schema.sample_rate_hz <= 0) throw ConfigError(path.string() + ": sample_rate_hz must be > 0");
  const fs::path base = path.parent_path();
  const auto& subjects = j.at("subjects");
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    SubjectDomain dom;
    dom.subject_id = subjects[s].at("id").get<std::string>();
    dom.num_classes = ds.schema.num_classes();
    const auto& trials = subjects[s].at("trials");
    for (std::size_t t = 0; t < trials.size(); ++t) {
      const auto label_name = trials[t].at("label").get<std::string>();
      const auto it = std::find(ds.schema.classes.begin(), ds.schema.classes.end(), label_name);
      if (it == ds.schema.classes.end()) {
        throw ConfigError(path.string() + ": subject '" + dom.subject_id + "' trial " +
                          std::to_string(t) + ": unknown class '" + label_name + "'");
      }
      fs::path csv = trials[t].at("csv").get<std::string>();
      if (csv.is_relative()) csv = base / csv;
      dom.trials.push_back(read_trial_csv(csv, ds.schema.channels.size(),
                                          static_cast<int>(it - ds.schema.classes.begin())));
    }
    ds.domains.push_back(std::move(dom));
  }
  ds.validate();
  return ds;
}

LosoSplit split_loso(const MultiSubjectDataset& dataset, const std::string& target_subject) {
  const std::size_t idx = dataset.index_of(target_subject);
  LosoSplit split;
  split.source.schema = dataset.schema;
  for (std::size_t i = 0; i < dataset.domains.size(); ++i) {
    if (i == idx) {
      split.target = dataset.domains[i];
    } else {
      split.source.domains.push_back(dataset.domains[i]);
    }
  }
  return split;
}

ShotSample sample_clean_shots(const SubjectDomain& domain, int shots_per_class,
                              std::uint64_t seed) {
  ShotSample out;
  out.remainder = domain;
  out.remainder.windows.clear();
  out.remainder.flip_mask.clear();
  if (shots_per_class <= 0) {
    out.remainder = domain;
    return out;
  }
  Rng rng(mix_seed(seed, "shots/" + domain.subject_id));
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < domain.windows.size(); ++i) {
    if (domain.windows[i].clean_label) by_class[*domain.windows[i].clean_label].push_back(i);
  }
  std::vector<bool> chosen(domain.windows.size(), false);
  const auto overlaps = [&](const SensorWindow& a, const SensorWindow& b) {
    if (a.trial < 0 || b.trial < 0 || a.trial != b.trial) return false;
    const auto len = static_cast<std::int64_t>(a.values.rows());
    return std::llabs(a.offset - b.offset) < len;
  };
  for (auto& [cls, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::size_t> picked;
    // First pass keeps shots mutually disjoint in time; the second fills up if needed.
    for (int pass = 0; pass < 2 && static_cast<int>(picked.size()) < shots_per_class; ++pass) {
      for (std::size_t i : idx) {
        if (static_cast<int>(picked.size()) >= shots_per_class) break;
        if (chosen[i]) continue;
        bool clash = false;
        if (pass == 0) {
          for (std::size_t p : picked) clash = clash || overlaps(domain.windows[i], domain.windows[p]);
        }
        if (clash) continue;
        chosen[i] = true;
        picked.push_back(i);
      }
    }
    if (static_cast<int>(picked.size()) < shots_per_class) {
      out.shortfall[cls] = shots_per_class - static_cast<int>(picked.size());
      warn("subject '" + domain.subject_id + "': class " + std::to_string(cls) + " has only " +
           std::to_string(picked.size()) + " of " + std::to_string(shots_per_class) + " shots");
    }
    std::sort(picked.begin(), picked.end());
    for (std::size_t p : picked) out.support.push_back(domain.windows[p]);
  }
  for (std::size_t i = 0; i < domain.windows.size(); ++i) {
    if (chosen[i]) continue;
    out.remainder.windows.push_back(domain.windows[i]);
    if (!domain.flip_mask.empty()) out.remainder.flip_mask.push_back(domain.flip_mask[i]);
  }
  return out;
}

int shots_for_seconds(double seconds, double window_seconds) {
  if (window_seconds <= 0) throw ConfigError("window_seconds must be > 0");
  return static_cast<int>(std::ceil(seconds / window_seconds - 1e-9));
}

// ---------------------------------------------------------------------------

namespace {
constexpr char kDatasetMagic[5] = "VALD";

void put_label(io::Writer& w, const std::optional<int>& l) { w.put<std::int32_t>(l ? *l : -1); }

std::optional<int> get_label(io::Reader& r) {
  const auto v = r.get<std::int32_t>();
  if (v < -1) throw FormatError("'" + r.path().string() + "': invalid label");
  return v < 0 ? std::nullopt : std::optional<int>(v);
}

void put_matrix(io::Writer& w, const Matrix<float>& m) {
  w.put<std::uint64_t>(m.rows());
  w.put<std::uint64_t>(m.cols());
  w.put_array(m.values());
}

Matrix<float> get_matrix(io::Reader& r) {
  const auto rows = r.get<std::uint64_t>();
  const auto cols = r.get<std::uint64_t>();
  auto values = r.get_array<float>();
  if (values.size() != rows * cols) throw FormatError("'" + r.path().string() + "': matrix size mismatch");
  Matrix<float> m(rows, cols);
  m.values() = std::move(values);
  return m;
}
}  // namespace

void save_dataset(const MultiSubjectDataset& dataset, const fs::path& path) {
  io::Writer w(path);
  w.magic(kDatasetMagic);
  w.put<std::uint32_t>(kDatasetFormatVersion);
  w.put<double>(dataset.schema.sample_rate_hz);
  w.put<std::uint64_t>(dataset.schema.channels.size());
  for (const auto& c : dataset.schema.channels) w.put_string(c);
  w.put<std::uint64_t>(dataset.schema.classes.size());
  for (const auto& c : dataset.schema.classes) w.put_string(c);
  w.put<std::uint64_t>(dataset.domains.size());
  for (const auto& d : dataset.domains) {
    w.put_string(d.subject_id);
    w.put<std::int32_t>(d.num_classes);
    w.put<std::uint64_t>(d.trials.size());
    for (const auto& t : d.trials) {
      w.put<std::int32_t>(t.label);
      put_matrix(w, t.samples);
      w.put_array(t.timestamps);
    }
    w.put<std::uint64_t>(d.windows.size());
    for (const auto& win : d.windows) {
      w.put<std::int64_t>(win.window_id);
      w.put<std::int32_t>(win.trial);
      w.put<std::int64_t>(win.offset);
      put_label(w, win.clean_label);
      put_label(w, win.noisy_label);
      put_label(w, win.corrected_label);
      put_matrix(w, win.values);
    }
    std::vector<std::uint8_t> mask(d.flip_mask.begin(), d.flip_mask.end());
    w.put<std::uint8_t>(d.flip_mask.empty() ? 0 : 1);
    w.put_array(mask);
  }
  w.finish();
}

MultiSubjectDataset load_dataset(const fs::path& path) {
  io::Reader r(path);
  r.expect_magic(kDatasetMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != kDatasetFormatVersion) {
    throw FormatError("'" + path.string() + "': unsupported dataset format version " +
                      std::to_string(version));
  }
  MultiSubjectDataset ds;
  ds.schema.sample_rate_hz = r.get<double>();
  const auto nch = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < nch; ++i) ds.schema.channels.push_back(r.get_string());
  const auto ncls = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < ncls; ++i) ds.schema.classes.push_back(r.get_string());
  const auto ndom = r.get<std::uint64_t>();
  for (std::uint64_t di = 0; di < ndom; ++di) {
    SubjectDomain d;
    d.subject_id = r.get_string();
    d.num_classes = r.get<std::int32_t>();
    const auto ntr = r.get<std::uint64_t>();
    for (std::uint64_t ti = 0; ti < ntr; ++ti) {
      Trial t;
      t.label = r.get<std::int32_t>();
      t.samples = get_matrix(r);
      t.timestamps = r.get_array<double>();
      d.trials.push_back(std::move(t));
    }
    const auto nwin = r.get<std::uint64_t>();
    for (std::uint64_t wi = 0; wi < nwin; ++wi) {
      SensorWindow win;
      win.subject_id = d.subject_id;
      win.window_id = r.get<std::int64_t>();
      win.trial = r.get<std::int32_t>();
      win.offset = r.get<std::int64_t>();
      win.clean_label = get_label(r);
      win.noisy_label = get_label(r);
      win.corrected_label = get_label(r);
      win.values = get_matrix(r);
      d.windows.push_back(std::move(win));
    }
    const bool has_mask = r.get<std::uint8_t>() != 0;
    const auto mask = r.get_array<std::uint8_t>();
    if (has_mask) d.flip_mask.assign(mask.begin(), mask.end());
    ds.domains.push_back(std::move(d));
  }
  return ds;
}

}  // namespace valerian
