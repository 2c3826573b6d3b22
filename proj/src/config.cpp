#include "valerian/config.hpp"

#include <fstream>
#include <set>

namespace valerian {

using nlohmann::json;

SyntheticSpec SyntheticSection::spec() const {
  auto s = SyntheticSpec::defaults(subjects, classes, subject_gap);
  s.trials_per_class = trials_per_class;
  s.trial_seconds = trial_seconds;
  s.sample_rate_hz = sample_rate_hz;
  s.noise_std = noise_std;
  s.validate();
  return s;
}

namespace {

/// Strict object reader: every present key must be consumed.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label() + ": expected an object");
  }

  template <class T>
  bool get(const std::string& key, T& out) {
    const auto it = j_.find(key);
    if (it == j_.end()) return false;
    seen_.insert(key);
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key '" + qualified(key) + "' has the wrong type");
    }
    return true;
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  bool is_null(const std::string& key) const { return j_.contains(key) && j_.at(key).is_null(); }

  Section child(const std::string& key) {
    seen_.insert(key);
    return Section(j_.at(key), qualified(key));
  }

  void mark(const std::string& key) { seen_.insert(key); }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + qualified(key) + "'");
    }
  }

 private:
  std::string label() const { return path_.empty() ? "config" : "config section '" + path_ + "'"; }
  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class Fn>
void with_section(Section& parent, const std::string& key, Fn&& fn) {
  if (!parent.has(key) || parent.is_null(key)) {
    parent.mark(key);
    return;
  }
  auto s = parent.child(key);
  fn(s);
  s.finish();
}

NormalizationKind parse_normalization(const std::string& s) {
  if (s == "zscore") return NormalizationKind::ZScore;
  if (s == "minmax") return NormalizationKind::MinMax;
  throw ConfigError("preprocess.normalization must be zscore or minmax, got '" + s + "'");
}

FitScope parse_scope(const std::string& s) {
  if (s == "global") return FitScope::Global;
  if (s == "per_subject") return FitScope::PerSubject;
  throw ConfigError("preprocess.fit_scope must be global or per_subject, got '" + s + "'");
}

UpdateSchedule parse_schedule(const std::string& s) {
  if (s == "per_batch") return UpdateSchedule::PerBatch;
  if (s == "per_epoch") return UpdateSchedule::PerEpoch;
  throw ConfigError("train.updates_per_epoch must be per_batch or per_epoch, got '" + s + "'");
}

HeadInit parse_head_init(const std::string& s) {
  if (s == "reuse_random_source_head") return HeadInit::ReuseRandomSourceHead;
  if (s == "fresh") return HeadInit::Fresh;
  throw ConfigError("adapt.head_init must be reuse_random_source_head or fresh, got '" + s + "'");
}

void read_optimizer(Section& s, OptimizerConfig& o, const std::string& kind_key, const std::string& lr_key) {
  std::string kind;
  if (s.get(kind_key, kind)) {
    const double lr = o.lr;
    o = parse_optimizer(kind) == OptimizerKind::Adam ? OptimizerConfig::adam(lr) : OptimizerConfig::rmsprop(lr);
  }
  s.get(lr_key, o.lr);
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  Section root(j, "");
  root.get("seed", c.seed);
  std::string out;
  if (root.get("output_dir", out)) c.output_dir = out;

  with_section(root, "dataset", [&](Section& s) {
    s.get("name", c.dataset.name);
    std::string file;
    if (s.get("file", file)) c.dataset.file = file;
    if (s.has("manifest") && !s.is_null("manifest")) {
      std::string m;
      s.get("manifest", m);
      c.dataset.manifest = m;
    } else {
      s.mark("manifest");
    }
    if (s.has("synthetic") && !s.is_null("synthetic")) {
      SyntheticSection syn;
      with_section(s, "synthetic", [&](Section& y) {
        y.get("subjects", syn.subjects);
        y.get("classes", syn.classes);
        y.get("trials_per_class", syn.trials_per_class);
        y.get("trial_seconds", syn.trial_seconds);
        y.get("sample_rate_hz", syn.sample_rate_hz);
        y.get("noise_std", syn.noise_std);
        y.get("subject_gap", syn.subject_gap);
      });
      c.dataset.synthetic = syn;
    } else {
      s.mark("synthetic");
    }
  });

  with_section(root, "preprocess", [&](Section& s) {
    auto& p = c.preprocess;
    s.get("target_rate_hz", p.target_rate_hz);
    s.get("lowpass_cutoff_hz", p.lowpass_cutoff_hz);
    s.get("filter_order", p.filter_order);
    s.get("window_seconds", p.window_seconds);
    s.get("overlap_fraction", p.overlap_fraction);
    std::string v;
    if (s.get("normalization", v)) p.normalization = parse_normalization(v);
    if (s.get("fit_scope", v)) p.fit_scope = parse_scope(v);
  });

  with_section(root, "noise", [&](Section& s) {
    std::string pattern;
    if (s.get("pattern", pattern)) c.noise.pattern = parse_noise_pattern(pattern);
    s.get("tau", c.noise.tau);
    std::vector<std::pair<int, int>> pairs;
    if (s.get("pairs", pairs)) {
      for (const auto& [a, b] : pairs) c.noise.pairs[a] = b;
    }
  });

  with_section(root, "transforms", [&](Section& s) {
    auto& t = c.transforms;
    s.get("noise_std", t.noise_std);
    s.get("scale_low", t.scale_low);
    s.get("scale_high", t.scale_high);
    s.get("permute_slices", t.permute_slices);
    s.get("timewarp_knots", t.timewarp_knots);
    s.get("timewarp_sigma", t.timewarp_sigma);
  });

  with_section(root, "network", [&](Section& s) {
    std::string variant;
    if (s.get("variant", variant)) {
      if (variant == "full") {
        c.network = ExtractorConfig::full();
      } else if (variant == "reduced") {
        c.network = ExtractorConfig::reduced();
      } else {
        throw ConfigError("network.variant must be full or reduced, got '" + variant + "'");
      }
    }
    auto& n = c.network;
    s.get("conv_layers", n.conv_layers);
    s.get("conv_channels", n.conv_channels);
    s.get("kernel_size", n.kernel_size);
    s.get("stride", n.stride);
    s.get("lstm_layers", n.lstm_layers);
    s.get("lstm_hidden", n.lstm_hidden);
    s.get("dropout", n.dropout);
  });

  with_section(root, "train", [&](Section& s) {
    auto& t = c.train;
    read_optimizer(s, t.optimizer, "optimizer", "lr");
    read_optimizer(s, t.stl_optimizer, "stl_optimizer", "stl_lr");
    s.get("batch_size", t.batch_size);
    s.get("epochs", t.epochs);
    s.get("si_epochs", t.si_epochs);
    s.get("stl_iterations", t.stl_iterations);
    s.get("mu", t.weights.mu);
    s.get("lambda", t.weights.lambda);
    s.get("beta", t.weights.beta);
    s.get("mixup_alpha", t.mixup.alpha);
    s.get("use_pretrain", t.use_pretrain);
    s.get("use_elr", t.use_elr);
    s.get("use_mixup", t.use_mixup);
    std::string sched;
    if (s.get("updates_per_epoch", sched)) t.updates = parse_schedule(sched);
    s.get("validation_fraction", t.validation_fraction);
    s.get("checkpoint_every", t.checkpoint_every);
    s.get("report_every", t.report_every);
    s.get("verbose", t.verbose);
    with_section(s, "pretrain", [&](Section& p) {
      read_optimizer(p, t.pretrain.optimizer, "optimizer", "lr");
      p.get("epochs", t.pretrain.epochs);
      p.get("batch_size", t.pretrain.batch_size);
      p.get("validation_fraction", t.pretrain.validation_fraction);
      p.get("max_windows", t.pretrain.max_windows);
    });
  });

  with_section(root, "adapt", [&](Section& s) {
    auto& a = c.adapt;
    s.get("shots", a.shots);
    double sec = 0.0;
    if (s.has("shot_seconds") && !s.is_null("shot_seconds")) {
      s.get("shot_seconds", sec);
      c.shot_seconds = sec;
    } else {
      s.mark("shot_seconds");
    }
    s.get("epochs", a.epochs);
    s.get("batch_size", a.batch_size);
    read_optimizer(s, a.optimizer, "optimizer", "lr");
    std::string init;
    if (s.get("head_init", init)) a.head_init = parse_head_init(init);
  });

  with_section(root, "eval", [&](Section& s) {
    std::vector<std::string> methods;
    if (s.get("methods", methods)) {
      c.eval.methods.clear();
      for (const auto& m : methods) c.eval.methods.push_back(parse_method(m));
    }
    s.get("repeats", c.eval.repeats);
    s.get("folds", c.eval.folds);
    s.get("refit_normalization", c.eval.refit_normalization);
  });
  root.finish();

  c.train.pretrain.transforms = c.transforms;
  if (c.shot_seconds) c.adapt.shots = shots_for_seconds(*c.shot_seconds, c.preprocess.window_seconds);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return from_json(j);
}

void ExperimentConfig::validate() const {
  if (!dataset.manifest && !dataset.synthetic) {
    throw ConfigError("config: dataset needs either a manifest path or a synthetic section");
  }
  if (dataset.manifest && dataset.synthetic) {
    throw ConfigError("config: dataset.manifest and dataset.synthetic are mutually exclusive");
  }
  if (dataset.synthetic) dataset.synthetic->spec();
  preprocess.validate();
  if (!(noise.tau >= 0 && noise.tau <= 1)) throw ConfigError("config: noise.tau must be in [0, 1]");
  transforms.validate();
  network.validate();
  train.validate();
  adapt.validate();
  if (shot_seconds && !(*shot_seconds > 0)) throw ConfigError("config: adapt.shot_seconds must be > 0");
  if (eval.methods.empty()) throw ConfigError("config: eval.methods is empty");
  if (eval.repeats < 1) throw ConfigError("config: eval.repeats must be >= 1");
}

nlohmann::ordered_json ExperimentConfig::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["output_dir"] = output_dir.string();
  auto& d = j["dataset"];
  d["name"] = dataset.name;
  d["file"] = dataset.file.string();
  d["manifest"] = dataset.manifest ? json(dataset.manifest->string()) : json(nullptr);
  if (dataset.synthetic) {
    const auto& s = *dataset.synthetic;
    d["synthetic"] = {{"subjects", s.subjects},         {"classes", s.classes},
                      {"trials_per_class", s.trials_per_class}, {"trial_seconds", s.trial_seconds},
                      {"sample_rate_hz", s.sample_rate_hz},     {"noise_std", s.noise_std},
                      {"subject_gap", s.subject_gap}};
  } else {
    d["synthetic"] = nullptr;
  }
  const auto& p = preprocess;
  j["preprocess"] = {{"target_rate_hz", p.target_rate_hz},
                     {"lowpass_cutoff_hz", p.lowpass_cutoff_hz},
                     {"filter_order", p.filter_order},
                     {"window_seconds", p.window_seconds},
                     {"overlap_fraction", p.overlap_fraction},
                     {"normalization", p.normalization == NormalizationKind::ZScore ? "zscore" : "minmax"},
                     {"fit_scope", p.fit_scope == FitScope::Global ? "global" : "per_subject"}};
  std::vector<std::pair<int, int>> pairs(noise.pairs.begin(), noise.pairs.end());
  j["noise"] = {{"pattern", noise_pattern_name(noise.pattern)}, {"tau", noise.tau}, {"pairs", pairs}};
  const auto& t = transforms;
  j["transforms"] = {{"noise_std", t.noise_std},       {"scale_low", t.scale_low},
                     {"scale_high", t.scale_high},     {"permute_slices", t.permute_slices},
                     {"timewarp_knots", t.timewarp_knots}, {"timewarp_sigma", t.timewarp_sigma}};
  const auto& n = network;
  j["network"] = {{"conv_layers", n.conv_layers}, {"conv_channels", n.conv_channels},
                  {"kernel_size", n.kernel_size}, {"stride", n.stride},
                  {"lstm_layers", n.lstm_layers}, {"lstm_hidden", n.lstm_hidden},
                  {"dropout", n.dropout}};
  const auto& tr = train;
  nlohmann::ordered_json tj;
  tj["optimizer"] = optimizer_name(tr.optimizer.kind);
  tj["lr"] = tr.optimizer.lr;
  tj["stl_optimizer"] = optimizer_name(tr.stl_optimizer.kind);
  tj["stl_lr"] = tr.stl_optimizer.lr;
  tj["batch_size"] = tr.batch_size;
  tj["epochs"] = tr.epochs;
  tj["si_epochs"] = tr.si_epochs;
  tj["stl_iterations"] = tr.stl_iterations;
  tj["mu"] = tr.weights.mu;
  tj["lambda"] = tr.weights.lambda;
  tj["beta"] = tr.weights.beta;
  tj["mixup_alpha"] = tr.mixup.alpha;
  tj["use_pretrain"] = tr.use_pretrain;
  tj["use_elr"] = tr.use_elr;
  tj["use_mixup"] = tr.use_mixup;
  tj["updates_per_epoch"] = tr.updates == UpdateSchedule::PerBatch ? "per_batch" : "per_epoch";
  tj["validation_fraction"] = tr.validation_fraction;
  tj["checkpoint_every"] = tr.checkpoint_every;
  tj["report_every"] = tr.report_every;
  tj["verbose"] = tr.verbose;
  tj["pretrain"] = {{"optimizer", optimizer_name(tr.pretrain.optimizer.kind)},
                    {"lr", tr.pretrain.optimizer.lr},
                    {"epochs", tr.pretrain.epochs},
                    {"batch_size", tr.pretrain.batch_size},
                    {"validation_fraction", tr.pretrain.validation_fraction},
                    {"max_windows", tr.pretrain.max_windows}};
  j["train"] = tj;
  nlohmann::ordered_json aj;
  aj["shots"] = adapt.shots;
  aj["shot_seconds"] = shot_seconds ? json(*shot_seconds) : json(nullptr);
  aj["epochs"] = adapt.epochs;
  aj["batch_size"] = adapt.batch_size;
  aj["optimizer"] = optimizer_name(adapt.optimizer.kind);
  aj["lr"] = adapt.optimizer.lr;
  aj["head_init"] = adapt.head_init == HeadInit::Fresh ? "fresh" : "reuse_random_source_head";
  j["adapt"] = aj;
  std::vector<std::string> methods;
  for (Method m : eval.methods) methods.push_back(method_name(m));
  j["eval"] = {{"methods", methods},
               {"repeats", eval.repeats},
               {"folds", eval.folds},
               {"refit_normalization", eval.refit_normalization}};
  return j;
}

std::filesystem::path ExperimentConfig::dataset_path() const {
  return dataset.file.is_absolute() ? dataset.file : output_dir / dataset.file;
}

LosoConfig ExperimentConfig::loso() const {
  LosoConfig l;
  l.methods = eval.methods;
  l.noise = noise;
  l.train = train;
  l.network = network;
  l.adapt = adapt;
  if (eval.refit_normalization) l.refit = preprocess;
  l.repeats = eval.repeats;
  l.folds = eval.folds;
  l.seed = seed;
  l.dataset_name = dataset.name;
  return l;
}

}  // namespace valerian
