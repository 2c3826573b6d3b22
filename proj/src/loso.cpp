#include "valerian/loso.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

namespace valerian {

std::string noise_pattern_name(NoisePattern p) {
  switch (p) {
    case NoisePattern::Symmetric: return "symmetric";
    case NoisePattern::Asymmetric: return "asymmetric";
    case NoisePattern::Custom: return "custom";
  }
  return "custom";
}

NoisePattern parse_noise_pattern(const std::string& name) {
  if (name == "symmetric") return NoisePattern::Symmetric;
  if (name == "asymmetric") return NoisePattern::Asymmetric;
  throw ConfigError("unknown noise pattern '" + name + "' (expected symmetric or asymmetric)");
}

NoiseTransitionMatrix NoiseSpec::matrix(int num_classes) const {
  if (pattern == NoisePattern::Symmetric) return symmetric_matrix(num_classes, tau);
  if (pattern != NoisePattern::Asymmetric) throw ConfigError("noise: custom matrices are not configurable here");
  ConfusionPairs p = pairs;
  if (p.empty()) {
    for (int c = 0; c < num_classes; ++c) p[c] = (c + 1) % num_classes;
  }
  return asymmetric_matrix(num_classes, tau, p);
}

void LosoConfig::validate() const {
  if (methods.empty()) throw ConfigError("loso: no methods configured");
  if (repeats < 1) throw ConfigError("loso: repeats must be >= 1");
  if (!(noise.tau >= 0 && noise.tau <= 1)) throw ConfigError("loso: tau must be in [0, 1]");
  train.validate();
  network.validate();
  adapt.validate();
  if (refit) refit->validate();
}

std::pair<double, double> mean_std(const std::vector<double>& values) {
  if (values.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return {mean, std::sqrt(var / static_cast<double>(values.size()))};
}

std::uint64_t run_seed(std::uint64_t seed, const std::string& target, int repeat) {
  return mix_seed(mix_seed(seed, "fold/" + target), static_cast<std::uint64_t>(repeat));
}

std::vector<RunRecord> run_fold(const MultiSubjectDataset& dataset, const LosoConfig& cfg, const std::string& target,
                                int repeat, Method method) {
  cfg.validate();
  if (dataset.domains.size() < 2) throw ConfigError("loso: at least two subjects are required");
  const int C = dataset.schema.num_classes();
  auto split = split_loso(dataset, target);
  if (cfg.refit) {
    std::vector<SensorWindow> all;
    for (const auto& d : split.source.domains) all.insert(all.end(), d.windows.begin(), d.windows.end());
    const auto stats = fit_normalization(all, *cfg.refit);
    for (auto& d : split.source.domains) normalize_windows(d.windows, stats);
    normalize_windows(split.target.windows, stats);
  }
  const auto seed = run_seed(cfg.seed, target, repeat);
  const auto noisy = inject_dataset(split.source, cfg.noise.matrix(C), mix_seed(seed, "noise"));
  const Monitor monitor(noisy);
  const auto shots = sample_clean_shots(split.target, cfg.adapt.shots, mix_seed(seed, "shots"));
  const auto ecfg = fit_extractor(cfg.network, dataset);

  TrainConfig tc = method == Method::Bmtl ? TrainConfig::bmtl(cfg.train) : cfg.train;
  tc.seed = seed;
  if (!cfg.checkpoint_root.empty()) {
    tc.checkpoint_dir = cfg.checkpoint_root / target / ("repeat_" + std::to_string(repeat)) / method_name(method);
  } else {
    tc.checkpoint_dir.clear();
  }

  RunRecord base;
  base.method = method_name(method);
  base.dataset = cfg.dataset_name;
  base.noise_pattern = noise_pattern_name(cfg.noise.pattern);
  base.tau = cfg.noise.tau;
  base.shots = method_uses_shots(method) ? cfg.adapt.shots : 0;
  base.fold_subject = target;
  base.repeat = repeat;

  const auto& test = shots.remainder.windows;
  if (test.empty()) throw ConfigError("loso: target '" + target + "' has no windows left for testing");
  const auto score = [&](RunRecord& r, const Model<float>& m, std::size_t head) {
    const auto metrics = evaluate(m, head, test, C);
    r.accuracy = metrics.accuracy;
    r.macro_f1 = metrics.macro_f1;
  };

  std::vector<RunRecord> out;
  switch (method) {
    case Method::Valerian:
    case Method::Bmtl: {
      auto res = train_valerian(noisy, tc, ecfg, &monitor);
      RunRecord r = base;
      r.correction_recall = correct_labels(res.model, noisy).recall;
      if (!res.report.epochs.empty() && res.report.epochs.back().memorization) {
        r.noisy_memorized = res.report.epochs.back().memorization->noisy_memorized;
      }
      AdaptConfig ac = cfg.adapt;
      ac.seed = mix_seed(seed, "adapt");
      const auto adapted = adapt_to_target(res.model, shots.support, ac, target);
      score(r, res.model, adapted.head);
      out.push_back(r);
      break;
    }
    case Method::Stl: {
      const auto res = train_stl(shots.support, C, tc, ecfg);
      RunRecord r = base;
      score(r, res.model, 0);
      out.push_back(r);
      break;
    }
    case Method::Si:
    case Method::SiElr: {
      const bool elr = method == Method::SiElr;
      const auto res = train_si(noisy, tc, ecfg, elr, &monitor);
      RunRecord r = base;
      r.correction_recall = correct_labels(res.model, noisy).recall;
      r.noisy_memorized = memorization_breakdown(res.model, noisy).noisy_memorized;
      score(r, res.model, 0);
      out.push_back(r);
      if (elr && res.best_model) {
        RunRecord b = base;
        b.method = "si-elr-best";
        b.correction_recall = correct_labels(*res.best_model, noisy).recall;
        b.noisy_memorized = memorization_breakdown(*res.best_model, noisy).noisy_memorized;
        score(b, *res.best_model, 0);
        out.push_back(b);
      }
      break;
    }
  }
  return out;
}

LosoResult run_loso(const MultiSubjectDataset& dataset, const LosoConfig& cfg,
                    const std::function<void(const RunRecord&)>& progress) {
  cfg.validate();
  if (dataset.domains.size() < 2) throw ConfigError("loso: at least two subjects are required");
  std::vector<std::string> folds = cfg.folds;
  if (folds.empty()) {
    for (const auto& d : dataset.domains) folds.push_back(d.subject_id);
  }
  for (const auto& f : folds) dataset.index_of(f);  // unknown subjects fail before any work
  LosoResult result;
  for (const auto& target : folds) {
    for (int r = 0; r < cfg.repeats; ++r) {
      for (Method m : cfg.methods) {
        std::vector<RunRecord> recs;
        try {
          recs = run_fold(dataset, cfg, target, r, m);
        } catch (const std::exception& e) {
          RunRecord fail;
          fail.method = method_name(m);
          fail.dataset = cfg.dataset_name;
          fail.noise_pattern = noise_pattern_name(cfg.noise.pattern);
          fail.tau = cfg.noise.tau;
          fail.shots = method_uses_shots(m) ? cfg.adapt.shots : 0;
          fail.fold_subject = target;
          fail.repeat = r;
          fail.error = e.what();
          warn("run " + fail.method + " fold " + target + " repeat " + std::to_string(r) + " failed: " + e.what());
          recs.push_back(fail);
        }
        for (auto& rec : recs) {
          if (progress) progress(rec);
          result.runs.push_back(std::move(rec));
        }
      }
    }
  }
  return result;
}

std::vector<Aggregate> LosoResult::aggregate() const {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunRecord*>> by_method;
  for (const auto& r : runs) {
    if (!by_method.count(r.method)) order.push_back(r.method);
    by_method[r.method].push_back(&r);
  }
  std::vector<Aggregate> out;
  for (const auto& name : order) {
    Aggregate a;
    a.method = name;
    std::vector<double> acc, f1, recall;
    for (const auto* r : by_method[name]) {
      ++a.runs;
      if (!r->error.empty() || !r->accuracy) {
        ++a.failures;
        continue;
      }
      acc.push_back(*r->accuracy);
      f1.push_back(r->macro_f1.value_or(0.0));
      if (r->correction_recall) recall.push_back(*r->correction_recall);
    }
    std::tie(a.accuracy_mean, a.accuracy_std) = mean_std(acc);
    std::tie(a.macro_f1_mean, a.macro_f1_std) = mean_std(f1);
    if (!recall.empty()) a.recall_mean = mean_std(recall).first;
    out.push_back(a);
  }
  return out;
}

bool LosoResult::any_failed() const {
  for (const auto& r : runs) {
    if (!r.error.empty()) return true;
  }
  return false;
}

namespace {

std::string fmt(const std::optional<double>& v) {
  if (!v) return {};
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", *v);
  return buf;
}

std::string csv_safe(std::string s) {
  for (char& c : s) {
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  }
  return s;
}

std::optional<double> parse_opt(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

}  // namespace

void LosoResult::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write results to '" + path.string() + "'");
  out << "method,dataset,noise_pattern,tau,shots,fold_subject,repeat,accuracy,macro_f1,correction_recall,"
         "noisy_memorized,error\n";
  for (const auto& r : runs) {
    out << r.method << ',' << csv_safe(r.dataset) << ',' << r.noise_pattern << ',' << fmt(r.tau) << ',' << r.shots
        << ',' << csv_safe(r.fold_subject) << ',' << r.repeat << ',' << fmt(r.accuracy) << ',' << fmt(r.macro_f1)
        << ',' << fmt(r.correction_recall) << ',' << fmt(r.noisy_memorized) << ',' << csv_safe(r.error) << '\n';
  }
  if (!out) throw Error("failed writing results to '" + path.string() + "'");
}

LosoResult read_results_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open results '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  LosoResult res;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 12) throw FormatError("'" + path.string() + "' row " + std::to_string(row) + ": expected 12 fields");
    RunRecord r;
    r.method = f[0];
    r.dataset = f[1];
    r.noise_pattern = f[2];
    r.tau = std::stod(f[3]);
    r.shots = std::stoi(f[4]);
    r.fold_subject = f[5];
    r.repeat = std::stoi(f[6]);
    r.accuracy = parse_opt(f[7]);
    r.macro_f1 = parse_opt(f[8]);
    r.correction_recall = parse_opt(f[9]);
    r.noisy_memorized = parse_opt(f[10]);
    r.error = f[11];
    res.runs.push_back(r);
  }
  return res;
}

std::string LosoResult::to_json() const {
  nlohmann::ordered_json j;
  j["runs"] = runs.size();
  j["failed"] = any_failed();
  auto& agg = j["aggregate"];
  agg = nlohmann::ordered_json::array();
  for (const auto& a : aggregate()) {
    nlohmann::ordered_json e;
    e["method"] = a.method;
    e["runs"] = a.runs;
    e["failures"] = a.failures;
    e["accuracy_mean"] = a.accuracy_mean;
    e["accuracy_std"] = a.accuracy_std;
    e["macro_f1_mean"] = a.macro_f1_mean;
    e["macro_f1_std"] = a.macro_f1_std;
    e["std_convention"] = "population";
    if (a.recall_mean) e["correction_recall_mean"] = *a.recall_mean;
    if (a.method == "si-elr-best") e["note"] = "selected with clean validation labels; reference only";
    agg.push_back(e);
  }
  auto& errors = j["errors"];
  errors = nlohmann::ordered_json::array();
  for (const auto& r : runs) {
    if (!r.error.empty()) {
      errors.push_back({{"method", r.method}, {"fold_subject", r.fold_subject}, {"repeat", r.repeat}, {"error", r.error}});
    }
  }
  return j.dump(2);
}

}  // namespace valerian
