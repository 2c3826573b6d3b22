#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "valerian/checkpoint.hpp"
#include "valerian/config.hpp"

extern char** environ;

namespace {

using namespace valerian;
namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string output_dir;
};

void add_common(CLI::App* sub, Common& c, bool config_required = true) {
  auto* opt = sub->add_option("-c,--config", c.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  if (config_required) opt->required();
  sub->add_option("--seed", c.seed, "Override the config seed");
  sub->add_option("--output-dir", c.output_dir, "Override output_dir (also VALERIAN_OUTPUT_DIR)");
}

/// Config file, then VALERIAN_OUTPUT_DIR, then flags.
ExperimentConfig resolve(const Common& c) {
  auto cfg = ExperimentConfig::load(c.config);
  if (cfg.dataset.manifest && cfg.dataset.manifest->is_relative()) {
    cfg.dataset.manifest = fs::path(c.config).parent_path() / *cfg.dataset.manifest;
  }
  if (const char* env = std::getenv("VALERIAN_OUTPUT_DIR"); env && *env) cfg.output_dir = env;
  if (!c.output_dir.empty()) cfg.output_dir = c.output_dir;
  if (c.seed) cfg.seed = *c.seed;
  cfg.train.seed = cfg.seed;
  cfg.adapt.seed = cfg.seed;
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write '" + path.string() + "'");
}

void echo_config(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  write_text(cfg.output_dir / "resolved_config.json", cfg.to_json().dump(2) + "\n");
}

fs::path noisy_path(const ExperimentConfig& cfg) { return cfg.output_dir / "noisy.vald"; }

/// Explicit --data, else the noisy dataset when present, else the preprocessed one.
MultiSubjectDataset load_data(const ExperimentConfig& cfg, const std::string& flag, bool prefer_noisy) {
  fs::path p = flag;
  if (p.empty()) p = prefer_noisy && fs::exists(noisy_path(cfg)) ? noisy_path(cfg) : cfg.dataset_path();
  if (!fs::exists(p)) throw Error("dataset '" + p.string() + "' not found; run `preprocess` first");
  std::printf("dataset: %s\n", p.string().c_str());
  return load_dataset(p);
}

std::vector<SensorWindow> all_windows(const MultiSubjectDataset& d) {
  std::vector<SensorWindow> out;
  for (const auto& s : d.domains) out.insert(out.end(), s.windows.begin(), s.windows.end());
  return out;
}

ojson metrics_json(const Metrics& m, const DatasetSchema& schema) {
  ojson j;
  j["count"] = m.count;
  j["accuracy"] = m.accuracy;
  j["macro_f1"] = m.macro_f1;
  ojson per = ojson::object();
  for (std::size_t k = 0; k < m.per_class_f1.size(); ++k) {
    const auto name = k < schema.classes.size() ? schema.classes[k] : std::to_string(k);
    per[name] = m.per_class_f1[k] ? ojson(*m.per_class_f1[k]) : ojson(nullptr);
  }
  j["per_class_f1"] = per;
  ojson conf = ojson::array();
  for (std::size_t r = 0; r < m.confusion.rows(); ++r) {
    const auto row = m.confusion.row(r);
    conf.push_back(std::vector<long>(row.begin(), row.end()));
  }
  j["confusion"] = conf;
  return j;
}

// ---------------------------------------------------------------------------

int cmd_preprocess(const Common& common) {
  const auto cfg = resolve(common);
  echo_config(cfg);
  MultiSubjectDataset raw;
  if (cfg.dataset.manifest) {
    raw = load_manifest(*cfg.dataset.manifest);
  } else {
    raw = generate_synthetic(cfg.dataset.synthetic->spec(), cfg.seed);
  }
  const auto res = preprocess_dataset(raw, cfg.preprocess);
  const auto path = cfg.dataset_path();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_dataset(res.dataset, path);

  const auto& schema = res.dataset.schema;
  std::printf("%-12s", "subject");
  for (const auto& c : schema.classes) std::printf(" %10s", c.c_str());
  std::printf(" %8s\n", "total");
  for (const auto& d : res.dataset.domains) {
    std::vector<int> counts(schema.classes.size(), 0);
    for (const auto& w : d.windows) ++counts[static_cast<std::size_t>(*w.clean_label)];
    std::printf("%-12s", d.subject_id.c_str());
    for (int n : counts) std::printf(" %10d", n);
    std::printf(" %8zu\n", d.windows.size());
  }
  std::printf("wrote %s (%zu windows)\n", path.string().c_str(), res.dataset.window_count());
  return 0;
}

ConfusionPairs read_pairs_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open pairs file '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("pairs file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  ConfusionPairs p;
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) p[std::stoi(k)] = v.get<int>();
  } else if (j.is_array()) {
    for (const auto& e : j) p[e.at(0).get<int>()] = e.at(1).get<int>();
  } else {
    throw ConfigError("pairs file must hold an object or an array of [from, to] pairs");
  }
  return p;
}

Matrix<double> read_matrix_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open confusion matrix '" + path.string() + "'");
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        numeric = false;
        break;
      }
    }
    if (numeric) rows.push_back(row);
  }
  if (rows.empty()) throw ConfigError("confusion matrix '" + path.string() + "' has no numeric rows");
  Matrix<double> m(rows.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.size()) throw ConfigError("confusion matrix '" + path.string() + "' is not square");
    for (std::size_t j = 0; j < rows.size(); ++j) m(i, j) = rows[i][j];
  }
  return m;
}

struct NoiseArgs {
  std::string pattern, pairs, confusion, data, out;
  std::optional<double> tau;
};

int cmd_inject(const Common& common, const NoiseArgs& a) {
  auto cfg = resolve(common);
  if (!a.pattern.empty()) {
    cfg.noise.pattern = a.pattern == "sym"    ? NoisePattern::Symmetric
                        : a.pattern == "asym" ? NoisePattern::Asymmetric
                                              : parse_noise_pattern(a.pattern);
  }
  if (a.tau) cfg.noise.tau = *a.tau;
  if (!a.pairs.empty()) cfg.noise.pairs = read_pairs_json(a.pairs);
  if (!a.confusion.empty()) cfg.noise.pairs = derive_confusion_pairs(read_matrix_csv(a.confusion));
  cfg.validate();
  echo_config(cfg);
  const auto data = load_data(cfg, a.data, false);
  const auto t = cfg.noise.matrix(data.schema.num_classes());
  const auto noisy = inject_dataset(data, t, mix_seed(cfg.seed, "noise"));
  const fs::path out = a.out.empty() ? noisy_path(cfg) : fs::path(a.out);
  save_dataset(noisy, out);
  std::vector<int> clean, observed;
  for (const auto& d : noisy.domains) {
    std::size_t flips = 0;
    for (std::size_t i = 0; i < d.windows.size(); ++i) {
      flips += d.flip_mask[i] ? 1 : 0;
      clean.push_back(*d.windows[i].clean_label);
      observed.push_back(*d.windows[i].noisy_label);
    }
    std::printf("%-12s flipped %5zu / %5zu (%.3f)\n", d.subject_id.c_str(), flips, d.windows.size(),
                d.windows.empty() ? 0.0 : static_cast<double>(flips) / static_cast<double>(d.windows.size()));
  }
  const auto emp = empirical_transition(clean, observed, data.schema.num_classes());
  std::printf("empirical transition matrix (%s, tau %.3f):\n", noise_pattern_name(cfg.noise.pattern).c_str(),
              cfg.noise.tau);
  for (std::size_t i = 0; i < emp.matrix.rows(); ++i) {
    for (std::size_t j = 0; j < emp.matrix.cols(); ++j) std::printf(" %.3f", emp.matrix(i, j));
    std::printf("\n");
  }
  std::printf("wrote %s\n", out.string().c_str());
  return 0;
}

struct TrainArgs {
  std::string method = "valerian", data, pretrained, target;
  std::optional<int> epochs;
};

std::vector<std::vector<int>> subject_classes(const MultiSubjectDataset& d) {
  std::vector<std::vector<int>> out;
  for (const auto& s : d.domains) {
    std::set<int> c;
    for (const auto& w : s.windows) c.insert(*w.observed_label());
    out.emplace_back(c.begin(), c.end());
  }
  return out;
}

int cmd_pretrain(const Common& common, const TrainArgs& a) {
  auto cfg = resolve(common);
  if (a.epochs) cfg.train.pretrain.epochs = *a.epochs;
  cfg.validate();
  echo_config(cfg);
  const auto data = load_data(cfg, a.data, true);
  const auto ecfg = fit_extractor(cfg.network, data);
  auto m = init_model<float>(ecfg, subject_classes(data), mix_seed(cfg.seed, "init"));
  for (std::size_t k = 0; k < data.domains.size(); ++k) m.head_subjects[k] = data.domains[k].subject_id;
  const auto res = pretrain_self_supervised(m, all_windows(data), cfg.train.pretrain, mix_seed(cfg.seed, "pretrain"));
  const auto path = cfg.output_dir / "pretrain.valm";
  save_model(m, path, {"pretrain", cfg.train.pretrain.epochs, cfg.seed});
  ojson j;
  j["epoch_loss"] = res.epoch_loss;
  ojson auc;
  for (int k = 0; k < kTransformCount; ++k) {
    auc[std::string(transform_name(static_cast<TransformKind>(k)))] = res.auc[static_cast<std::size_t>(k)];
    std::printf("auc %-16s %.3f\n", std::string(transform_name(static_cast<TransformKind>(k))).c_str(),
                res.auc[static_cast<std::size_t>(k)]);
  }
  j["auc"] = auc;
  write_text(cfg.output_dir / "pretrain.json", j.dump(2) + "\n");
  std::printf("wrote %s\n", path.string().c_str());
  return 0;
}

int cmd_train(const Common& common, const TrainArgs& a) {
  auto cfg = resolve(common);
  if (a.epochs) cfg.train.epochs = cfg.train.si_epochs = *a.epochs;
  cfg.train.checkpoint_dir = cfg.output_dir / "checkpoints";
  cfg.validate();
  echo_config(cfg);
  const Method method = parse_method(a.method);
  auto data = load_data(cfg, a.data, true);
  std::optional<SubjectDomain> target;
  if (!a.target.empty()) {
    auto split = split_loso(data, a.target);
    data = std::move(split.source);
    target = std::move(split.target);
  }
  const auto ecfg = fit_extractor(cfg.network, data);
  const Monitor monitor(data);
  const Monitor* mon = monitor.has_clean() ? &monitor : nullptr;
  TrainResult res;
  switch (method) {
    case Method::Valerian:
    case Method::Bmtl: {
      const auto tc = method == Method::Bmtl ? TrainConfig::bmtl(cfg.train) : cfg.train;
      std::optional<std::vector<float>> theta;
      if (!a.pretrained.empty()) theta = load_model(a.pretrained).theta;
      res = train_valerian(data, tc, ecfg, mon, theta ? &*theta : nullptr);
      break;
    }
    case Method::Stl: {
      if (!target) throw ConfigError("train: --method stl needs --target for its support set");
      const auto shots = sample_clean_shots(*target, cfg.adapt.shots, mix_seed(cfg.seed, "shots"));
      res = train_stl(shots.support, data.schema.num_classes(), cfg.train, ecfg);
      break;
    }
    case Method::Si:
    case Method::SiElr:
      res = train_si(data, cfg.train, ecfg, method == Method::SiElr, mon);
      if (res.best_model) save_model(*res.best_model, cfg.train.checkpoint_dir / "si-elr_best.valm",
                                     {"si-elr-best", res.report.best_epoch.value_or(0), cfg.seed});
      break;
  }
  const auto stem = "train_" + method_name(method);
  res.report.write_csv(cfg.output_dir / (stem + ".csv"));
  write_text(cfg.output_dir / (stem + "_summary.json"), res.report.summary_json() + "\n");
  std::printf("%s\n", res.report.summary_json().c_str());
  return 0;
}

struct ModelArgs {
  std::string checkpoint, data, target, out;
  std::optional<int> shots;
  std::optional<std::size_t> head;
};

int cmd_correct(const Common& common, const ModelArgs& a) {
  const auto cfg = resolve(common);
  echo_config(cfg);
  const auto m = load_model(a.checkpoint);
  const auto data = load_data(cfg, a.data, true);
  const auto rep = correct_labels(m, data);
  const fs::path out = a.out.empty() ? cfg.output_dir / "corrected.vald" : fs::path(a.out);
  save_dataset(rep.relabeled, out);
  ojson j;
  j["checkpoint"] = a.checkpoint;
  j["flipped"] = rep.flipped;
  j["recovered"] = rep.recovered;
  j["recall"] = rep.recall ? ojson(*rep.recall) : ojson(nullptr);
  j["clean_accuracy"] = rep.clean_accuracy ? ojson(*rep.clean_accuracy) : ojson(nullptr);
  ojson subjects = ojson::array();
  for (const auto& s : rep.subjects) {
    subjects.push_back({{"subject", s.subject_id},
                        {"windows", s.windows},
                        {"flipped", s.flipped},
                        {"recovered", s.recovered},
                        {"recall", s.recall ? ojson(*s.recall) : ojson(nullptr)},
                        {"clean_accuracy", s.clean_accuracy ? ojson(*s.clean_accuracy) : ojson(nullptr)}});
  }
  j["subjects"] = subjects;
  write_text(cfg.output_dir / "correction.json", j.dump(2) + "\n");
  std::printf("%s\nwrote %s\n", j.dump(2).c_str(), out.string().c_str());
  return 0;
}

/// Support/remainder split of the target subject, reproducible from the seed.
ShotSample target_shots(const ExperimentConfig& cfg, const MultiSubjectDataset& data, const std::string& target) {
  return sample_clean_shots(data.domain(target), cfg.adapt.shots, mix_seed(cfg.seed, "shots"));
}

int cmd_adapt(const Common& common, const ModelArgs& a) {
  auto cfg = resolve(common);
  if (a.shots) cfg.adapt.shots = *a.shots;
  cfg.validate();
  echo_config(cfg);
  auto m = load_model(a.checkpoint);
  const auto data = load_data(cfg, a.data, false);
  const auto shots = target_shots(cfg, data, a.target);
  AdaptConfig ac = cfg.adapt;
  ac.seed = mix_seed(cfg.seed, "adapt");
  const auto res = adapt_to_target(m, shots.support, ac, a.target);
  const fs::path out = a.out.empty() ? cfg.output_dir / "adapted.valm" : fs::path(a.out);
  save_model(m, out, {"adapt", ac.epochs, cfg.seed});
  std::printf("head %zu (%s), %zu support windows\n", res.head,
              res.reused ? ("reused source head " + std::to_string(*res.source_head)).c_str() : "fresh",
              res.shots_used);
  if (!shots.remainder.windows.empty()) {
    const auto metrics = evaluate(m, res.head, shots.remainder.windows, data.schema.num_classes());
    std::printf("target remainder: accuracy %.4f macro-F1 %.4f (%zu windows)\n", metrics.accuracy,
                metrics.macro_f1, metrics.count);
  }
  std::printf("wrote %s\n", out.string().c_str());
  return 0;
}

int cmd_evaluate(const Common& common, const ModelArgs& a) {
  auto cfg = resolve(common);
  if (a.shots) cfg.adapt.shots = *a.shots;
  echo_config(cfg);
  const auto m = load_model(a.checkpoint);
  const auto data = load_data(cfg, a.data, false);
  std::optional<std::size_t> head = a.head;
  if (!head) head = head_for_subject(m, "target:" + a.target);
  const bool adapted = head.has_value() && !a.head;
  if (!head) head = head_for_subject(m, a.target);
  if (!head) throw ConfigError("evaluate: checkpoint has no head for '" + a.target + "'; pass --head");
  if (*head >= m.heads.size()) throw ConfigError("evaluate: head index out of range");
  // An adapted head was fit on the target's support windows; score the rest.
  const auto windows = adapted ? target_shots(cfg, data, a.target).remainder.windows : data.domain(a.target).windows;
  const auto metrics = evaluate(m, *head, windows, data.schema.num_classes());
  auto j = metrics_json(metrics, data.schema);
  j["target"] = a.target;
  j["head"] = *head;
  const auto text = j.dump(2);
  write_text(cfg.output_dir / "evaluation.json", text + "\n");
  std::printf("%s\n", text.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct ExperimentArgs {
  bool dry_run = false;
  int parallel = 1;
  std::vector<std::string> folds;
  std::string data;
};

int spawn_and_wait(const std::vector<std::string>& args) {
  std::vector<char*> argv;
  for (const auto& s : args) argv.push_back(const_cast<char*>(s.c_str()));
  argv.push_back(nullptr);
  pid_t pid = 0;
  if (posix_spawn(&pid, "/proc/self/exe", nullptr, nullptr, argv.data(), environ) != 0) return -1;
  return pid;
}

int cmd_run_experiment(const Common& common, const ExperimentArgs& a) {
  auto cfg = resolve(common);
  if (!a.folds.empty()) cfg.eval.folds = a.folds;
  if (a.parallel < 1) throw ConfigError("--parallel-folds must be >= 1");
  cfg.validate();
  auto loso = cfg.loso();
  loso.checkpoint_root = cfg.output_dir / "runs";

  const auto path = a.data.empty() ? cfg.dataset_path() : fs::path(a.data);
  std::vector<std::string> folds = loso.folds;
  std::optional<MultiSubjectDataset> data;
  if (fs::exists(path)) {
    data = load_dataset(path);
    if (folds.empty()) {
      for (const auto& d : data->domains) folds.push_back(d.subject_id);
    }
  }
  std::printf("plan: dataset %s (%s)\n", path.string().c_str(), data ? "present" : "missing");
  std::printf("plan: noise %s tau %.3f, shots %d, repeats %d, seed %llu\n", noise_pattern_name(loso.noise.pattern).c_str(),
              loso.noise.tau, loso.adapt.shots, loso.repeats, static_cast<unsigned long long>(loso.seed));
  std::printf("plan: methods");
  for (Method m : loso.methods) std::printf(" %s", method_name(m).c_str());
  std::printf("\nplan: folds");
  if (folds.empty()) std::printf(" <every subject>");
  for (const auto& f : folds) std::printf(" %s", f.c_str());
  std::printf("\nplan: %zu runs, %d fold process(es), output %s\n",
              folds.size() * static_cast<std::size_t>(loso.repeats) * loso.methods.size(), a.parallel,
              cfg.output_dir.string().c_str());
  if (a.dry_run) return 0;
  if (!data) throw Error("dataset '" + path.string() + "' not found; run `preprocess` first");
  echo_config(cfg);

  LosoResult result;
  if (a.parallel > 1 && folds.size() > 1) {
    std::map<pid_t, std::string> running;
    std::size_t next = 0;
    bool child_failed = false;
    const auto launch = [&](const std::string& fold) {
      std::vector<std::string> args{"valerian-cli",  "run-experiment", "-c", common.config, "--fold", fold,
                                    "--output-dir", (cfg.output_dir / "folds" / fold).string(), "--seed",
                                    std::to_string(cfg.seed), "--data", fs::absolute(path).string()};
      const int pid = spawn_and_wait(args);
      if (pid < 0) throw Error("could not start a fold process for '" + fold + "'");
      running[pid] = fold;
    };
    while (next < folds.size() || !running.empty()) {
      while (next < folds.size() && running.size() < static_cast<std::size_t>(a.parallel)) launch(folds[next++]);
      int status = 0;
      const pid_t done = waitpid(-1, &status, 0);
      if (done < 0) break;
      const auto fold = running[done];
      running.erase(done);
      const int code = WIFEXITED(status) ? WEXITSTATUS(status) : 2;
      std::printf("fold %s finished (exit %d)\n", fold.c_str(), code);
      if (code == 1) child_failed = true;
    }
    for (const auto& f : folds) {
      const auto part = cfg.output_dir / "folds" / f / "results.csv";
      if (!fs::exists(part)) {
        RunRecord r;
        r.method = "all";
        r.dataset = loso.dataset_name;
        r.fold_subject = f;
        r.error = "fold process produced no results";
        result.runs.push_back(r);
        continue;
      }
      const auto rows = read_results_csv(part);
      result.runs.insert(result.runs.end(), rows.runs.begin(), rows.runs.end());
    }
    if (child_failed) warn("a fold process reported a configuration error");
  } else {
    loso.folds = folds;
    result = run_loso(*data, loso, [](const RunRecord& r) {
      if (!r.error.empty()) return;
      std::printf("%-12s fold %-8s repeat %d accuracy %.4f macro-F1 %.4f", r.method.c_str(), r.fold_subject.c_str(),
                  r.repeat, r.accuracy.value_or(0.0), r.macro_f1.value_or(0.0));
      if (r.correction_recall) std::printf(" recall %.4f", *r.correction_recall);
      std::printf("\n");
      std::fflush(stdout);
    });
  }
  result.write_csv(cfg.output_dir / "results.csv");
  const auto summary = result.to_json();
  write_text(cfg.output_dir / "results.json", summary + "\n");
  for (const auto& agg : result.aggregate()) {
    std::printf("%-12s accuracy %.4f +- %.4f  macro-F1 %.4f +- %.4f  (%zu runs, %zu failed)\n", agg.method.c_str(),
                agg.accuracy_mean, agg.accuracy_std, agg.macro_f1_mean, agg.macro_f1_std, agg.runs, agg.failures);
  }
  std::printf("wrote %s\n", (cfg.output_dir / "results.csv").string().c_str());
  return result.any_failed() ? 2 : 0;
}

// ---------------------------------------------------------------------------

struct DiagnoseArgs {
  std::string checkpoint, data, out;
  std::int64_t window_id = -1;
  int bins = 20;
};

int cmd_diagnose(const Common& common, const DiagnoseArgs& a) {
  if (common.config.empty()) throw ConfigError("diagnose: --config is required");
  if (a.checkpoint.empty()) throw ConfigError("diagnose: --checkpoint is required");
  const auto cfg = resolve(common);
  if (a.bins < 1) throw ConfigError("diagnose: --bins must be >= 1");
  echo_config(cfg);
  const auto m = load_model(a.checkpoint);
  auto data = load_data(cfg, a.data, true);
  std::erase_if(data.domains, [&](const SubjectDomain& d) {
    if (head_for_subject(m, d.subject_id)) return false;
    warn("diagnose: no head for subject '" + d.subject_id + "'; skipped");
    return true;
  });
  if (data.domains.empty()) throw ConfigError("diagnose: the checkpoint has no head for any subject in the dataset");
  for (const auto& d : data.domains) {
    if (d.flip_mask.size() != d.windows.size()) throw ConfigError("diagnose: the dataset has no injected noise");
  }
  const fs::path dir = a.out.empty() ? cfg.output_dir / "diagnostics" : fs::path(a.out);
  fs::create_directories(dir);

  std::ostringstream mem;
  mem << "subject,clean_correct,clean_wrong,noisy_correct,noisy_memorized,noisy_other\n";
  const auto row = [&](const std::string& name, const MemorizationBreakdown& b) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.9g,%.9g,%.9g,%.9g,%.9g\n", name.c_str(), b.clean_correct, b.clean_wrong,
                  b.noisy_correct, b.noisy_memorized, b.noisy_other);
    mem << buf;
  };
  std::vector<double> losses;
  std::vector<const SensorWindow*> order;
  std::vector<bool> flipped;
  for (const auto& d : data.domains) {
    const auto head = head_for_subject(m, d.subject_id);
    MultiSubjectDataset one;
    one.schema = data.schema;
    one.domains = {d};
    row(d.subject_id, memorization_breakdown(m, one));
    const auto l = per_sample_losses(m, *head, d.windows);
    losses.insert(losses.end(), l.begin(), l.end());
    for (std::size_t i = 0; i < d.windows.size(); ++i) {
      order.push_back(&d.windows[i]);
      flipped.push_back(d.flip_mask[i]);
    }
  }
  row("all", memorization_breakdown(m, data));
  write_text(dir / "memorization.csv", mem.str());

  const auto g = gmm_loss_split(losses);
  std::ostringstream hist;
  hist << "bin_low,bin_high,clean,noisy\n";
  std::vector<long> clean_count(static_cast<std::size_t>(a.bins), 0), noisy_count(static_cast<std::size_t>(a.bins), 0);
  for (std::size_t i = 0; i < losses.size(); ++i) {
    const auto b = std::min(static_cast<std::size_t>(g.normalized[i] * a.bins), static_cast<std::size_t>(a.bins - 1));
    ++(flipped[i] ? noisy_count : clean_count)[b];
  }
  for (int b = 0; b < a.bins; ++b) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%ld,%ld\n", static_cast<double>(b) / a.bins,
                  static_cast<double>(b + 1) / a.bins, clean_count[static_cast<std::size_t>(b)],
                  noisy_count[static_cast<std::size_t>(b)]);
    hist << buf;
  }
  write_text(dir / "loss_histogram.csv", hist.str());

  ojson gj;
  gj["mean"] = g.mean;
  gj["variance"] = g.variance;
  gj["weight"] = g.weight;
  gj["iterations"] = g.iterations;
  gj["degenerate"] = g.degenerate;
  gj["log_likelihood"] = g.log_likelihood;
  std::size_t agree = 0;
  for (std::size_t i = 0; i < losses.size(); ++i) agree += g.clean[i] == !flipped[i] ? 1 : 0;
  gj["split_agreement_with_flip_mask"] = losses.empty() ? 0.0 : static_cast<double>(agree) / static_cast<double>(losses.size());
  write_text(dir / "gmm.json", gj.dump(2) + "\n");

  const auto windows = all_windows(data);
  export_embeddings(m, windows, dir / "embeddings.csv");
  std::printf("wrote %s/{memorization.csv,loss_histogram.csv,gmm.json,embeddings.csv}\n", dir.string().c_str());
  return 0;
}

int cmd_diagnose_transforms(const Common& common, const DiagnoseArgs& a) {
  const auto cfg = resolve(common);
  echo_config(cfg);
  const auto data = load_data(cfg, a.data, false);
  const SensorWindow* w = nullptr;
  for (const auto& d : data.domains) {
    for (const auto& x : d.windows) {
      if (x.window_id == a.window_id) w = &x;
    }
  }
  if (!w) throw ConfigError("diagnose: no window with id " + std::to_string(a.window_id));
  const fs::path dir = a.out.empty() ? cfg.output_dir / "diagnostics" : fs::path(a.out);
  std::ostringstream csv;
  csv << "transform,step";
  for (const auto& c : data.schema.channels) csv << ',' << c;
  csv << '\n';
  const auto dump = [&](const std::string& name, const Matrix<float>& x) {
    char buf[32];
    for (std::size_t t = 0; t < x.rows(); ++t) {
      csv << name << ',' << t;
      for (std::size_t c = 0; c < x.cols(); ++c) {
        std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(x(t, c)));
        csv << buf;
      }
      csv << '\n';
    }
  };
  dump("original", w->values);
  for (int k = 0; k < kTransformCount; ++k) {
    const auto kind = static_cast<TransformKind>(k);
    dump(std::string(transform_name(kind)),
         apply_transform(w->values, kind, cfg.transforms, mix_seed(cfg.seed, static_cast<std::uint64_t>(a.window_id))));
  }
  const auto path = dir / ("transforms_window_" + std::to_string(a.window_id) + ".csv");
  write_text(path, csv.str());
  std::printf("wrote %s\n", path.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noisy-label multi-subject activity recognition"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  Common common;
  NoiseArgs noise;
  TrainArgs train;
  ModelArgs model;
  ExperimentArgs exp;
  DiagnoseArgs diag;

  auto* pre = app.add_subcommand("preprocess", "Generate or ingest, preprocess and save the dataset");
  add_common(pre, common);

  auto* inj = app.add_subcommand("inject-noise", "Inject label noise into the preprocessed dataset");
  add_common(inj, common);
  inj->add_option("--pattern", noise.pattern, "sym | asym")
      ->check(CLI::IsMember({"sym", "asym", "symmetric", "asymmetric"}));
  inj->add_option("--tau", noise.tau, "Noise rate");
  auto* pairs_opt = inj->add_option("--pairs", noise.pairs, "Confusion pairs JSON map")->check(CLI::ExistingFile);
  inj->add_option("--confusion", noise.confusion, "Confusion-matrix CSV to derive pairs from")
      ->check(CLI::ExistingFile)
      ->excludes(pairs_opt);
  inj->add_option("--data", noise.data, "Input dataset (default: preprocessed dataset)");
  inj->add_option("--out", noise.out, "Output dataset (default: <output_dir>/noisy.vald)");

  auto* ptr = app.add_subcommand("pretrain", "Self-supervised transformation-recognition pretraining");
  add_common(ptr, common);
  ptr->add_option("--data", train.data, "Dataset (default: noisy, else preprocessed)");
  ptr->add_option("--epochs", train.epochs, "Override train.pretrain.epochs");

  auto* trn = app.add_subcommand("train", "Train one method on the source subjects");
  add_common(trn, common);
  trn->add_option("--method", train.method, "valerian | bmtl | stl | si | si-elr")
      ->check(CLI::IsMember({"valerian", "bmtl", "stl", "si", "si-elr"}));
  trn->add_option("--data", train.data, "Dataset (default: noisy, else preprocessed)");
  trn->add_option("--pretrained", train.pretrained, "Checkpoint whose extractor replaces pretraining")
      ->check(CLI::ExistingFile);
  trn->add_option("--target", train.target, "Hold this subject out (required for stl)");
  trn->add_option("--epochs", train.epochs, "Override the training epochs");

  auto* cor = app.add_subcommand("correct-labels", "Relabel the source windows with their subject heads");
  add_common(cor, common);
  cor->add_option("--checkpoint", model.checkpoint, "Trained model")->required();
  cor->add_option("--data", model.data, "Dataset (default: noisy, else preprocessed)");
  cor->add_option("--out", model.out, "Output dataset (default: <output_dir>/corrected.vald)");

  auto* adp = app.add_subcommand("adapt", "Fit a new head for a target subject from a few clean shots");
  add_common(adp, common);
  adp->add_option("--checkpoint", model.checkpoint, "Trained model")->required();
  adp->add_option("--target", model.target, "Target subject")->required();
  adp->add_option("--data", model.data, "Dataset with the target's clean labels (default: preprocessed)");
  adp->add_option("--shots", model.shots, "Override adapt.shots");
  adp->add_option("--out", model.out, "Output model (default: <output_dir>/adapted.valm)");

  auto* evl = app.add_subcommand("evaluate", "Accuracy and macro-F1 of a model on a subject");
  add_common(evl, common);
  evl->add_option("--checkpoint", model.checkpoint, "Model")->required();
  evl->add_option("--target", model.target, "Subject to score")->required();
  evl->add_option("--data", model.data, "Dataset (default: preprocessed)");
  evl->add_option("--head", model.head, "Head index (default: adapted target head, else the subject's head)");
  evl->add_option("--shots", model.shots, "Shots excluded from an adapted target (default: adapt.shots)");

  auto* run = app.add_subcommand("run-experiment", "Leave-one-subject-out evaluation");
  add_common(run, common);
  run->add_flag("--dry-run", exp.dry_run, "Print the resolved plan and exit");
  run->add_option("--parallel-folds", exp.parallel, "Fold processes to run at once");
  run->add_option("--fold", exp.folds, "Restrict to these target subjects");
  run->add_option("--data", exp.data, "Dataset (default: the preprocessed dataset)");

  auto* dia = app.add_subcommand("diagnose", "Memorization breakdown, loss histogram + GMM split, embeddings");
  add_common(dia, common, false);
  dia->add_option("--checkpoint", diag.checkpoint, "Trained model");
  dia->add_option("--data", diag.data, "Dataset (default: noisy, else preprocessed)");
  dia->add_option("--out", diag.out, "Output directory (default: <output_dir>/diagnostics)");
  dia->add_option("--bins", diag.bins, "Histogram bins");
  dia->require_subcommand(0, 1);
  Common tcommon;
  auto* dtr = dia->add_subcommand("transforms", "Dump one window under every pretext transformation");
  add_common(dtr, tcommon);
  dtr->add_option("--window-id", diag.window_id, "Window id")->required();
  dtr->add_option("--data", diag.data, "Dataset (default: preprocessed)");
  dtr->add_option("--out", diag.out, "Output directory (default: <output_dir>/diagnostics)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*pre) return cmd_preprocess(common);
    if (*inj) return cmd_inject(common, noise);
    if (*ptr) return cmd_pretrain(common, train);
    if (*trn) return cmd_train(common, train);
    if (*cor) return cmd_correct(common, model);
    if (*adp) return cmd_adapt(common, model);
    if (*evl) return cmd_evaluate(common, model);
    if (*run) return cmd_run_experiment(common, exp);
    if (*dtr) return cmd_diagnose_transforms(tcommon, diag);
    if (*dia) return cmd_diagnose(common, diag);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
