#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "support.hpp"
#include "valerian/checkpoint.hpp"
#include "valerian/evaluation.hpp"
#include "valerian/loso.hpp"

using namespace valerian;
using namespace valerian::testing;

namespace {

MultiSubjectDataset noisy_tiny(std::uint64_t seed) {
  const auto clean = tiny_dataset(seed);
  return inject_dataset(clean, NoiseSpec{}.matrix(3), seed + 1);
}

struct PhaseLog {
  int heads_calls = 0, extractor_calls = 0;
  bool theta_frozen_in_heads = true;
  bool heads_frozen_in_extractor = true;
  bool theta_moved = false, heads_moved = false;
};

PhaseLog watch_phases(TrainConfig cfg, const MultiSubjectDataset& data) {
  PhaseLog log;
  Model<float> before;
  cfg.observer = [&](Phase phase, bool after, int, const Model<float>& m) {
    if (!after) {
      before = m;
      return;
    }
    bool heads_same = true;
    for (std::size_t k = 0; k < m.heads.size(); ++k) heads_same = heads_same && m.heads[k].params == before.heads[k].params;
    const bool theta_same = m.theta == before.theta;
    if (phase == Phase::Heads) {
      ++log.heads_calls;
      log.theta_frozen_in_heads = log.theta_frozen_in_heads && theta_same;
      log.heads_moved = log.heads_moved || !heads_same;
    } else {
      ++log.extractor_calls;
      log.heads_frozen_in_extractor = log.heads_frozen_in_extractor && heads_same;
      log.theta_moved = log.theta_moved || !theta_same;
    }
  };
  train_valerian(data, cfg, tiny_extractor(data), nullptr);
  return log;
}

}  // namespace

TEST_CASE("method names round-trip and unknown names are rejected") {
  for (Method m : {Method::Valerian, Method::Bmtl, Method::Stl, Method::Si, Method::SiElr}) {
    CHECK(parse_method(method_name(m)) == m);
  }
  CHECK_THROWS_AS(parse_method("dividemix"), ConfigError);
  CHECK(method_uses_shots(Method::Bmtl));
  CHECK_FALSE(method_uses_shots(Method::Si));
}

TEST_CASE("roc auc on hand cases") {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  CHECK(roc_auc(s, std::vector<int>{0, 0, 1, 1}) == doctest::Approx(0.75));
  CHECK(roc_auc(s, std::vector<int>{0, 1, 0, 1}) == doctest::Approx(1.0));
  CHECK(roc_auc(s, std::vector<int>{1, 0, 1, 0}) == doctest::Approx(0.0));
  CHECK(roc_auc(std::vector<double>{1, 1, 1, 1}, std::vector<int>{1, 0, 1, 0}) == doctest::Approx(0.5));
  CHECK(roc_auc(s, std::vector<int>{0, 0, 0, 0}) == 0.5);
}

TEST_CASE("train config validation") {
  auto c = tiny_train_config();
  CHECK_NOTHROW(c.validate());
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_train_config();
  c.validation_fraction = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_train_config();
  c.weights.beta = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_train_config();
  c.pretrain.max_windows = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.use_pretrain = false;
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("bmtl is the multi-task trainer with every flag off") {
  auto base = tiny_train_config();
  const auto b = TrainConfig::bmtl(base);
  CHECK_FALSE(b.use_pretrain);
  CHECK_FALSE(b.use_elr);
  CHECK_FALSE(b.use_mixup);
  CHECK(b.epochs == base.epochs);
  const auto data = noisy_tiny(1);
  const auto r = train_valerian(data, b, tiny_extractor(data));
  CHECK(r.report.method == "bmtl");
  CHECK(r.report.pretext_auc.empty());
  const auto v = train_valerian(data, base, tiny_extractor(data));
  CHECK(v.report.method == "valerian");
  CHECK(v.report.pretext_auc.size() == static_cast<std::size_t>(kTransformCount));
}

TEST_CASE("head phase leaves the extractor bit-identical and the extractor phase leaves every head bit-identical") {
  const auto data = noisy_tiny(2);
  auto cfg = tiny_train_config(3);
  SUBCASE("per-batch updates") {}
  SUBCASE("per-epoch updates") { cfg.updates = UpdateSchedule::PerEpoch; }
  SUBCASE("flags off") { cfg = TrainConfig::bmtl(cfg); }
  const auto log = watch_phases(cfg, data);
  CHECK(log.heads_calls == 3);
  CHECK(log.extractor_calls == 3);
  CHECK(log.theta_frozen_in_heads);
  CHECK(log.heads_frozen_in_extractor);
  CHECK(log.theta_moved);
  CHECK(log.heads_moved);
}

TEST_CASE("adaptation leaves the extractor and the source heads bit-identical") {
  const auto data = noisy_tiny(3);
  const auto split = split_loso(data, data.domains[0].subject_id);
  auto cfg = tiny_train_config(1);
  cfg.use_pretrain = false;
  auto r = train_valerian(split.source, cfg, tiny_extractor(data));
  const auto before = r.model;
  const auto shots = sample_clean_shots(split.target, 2, 9);
  AdaptConfig ac;
  ac.epochs = 5;
  ac.batch_size = 4;
  const auto res = adapt_to_target(r.model, shots.support, ac, split.target.subject_id);
  CHECK(r.model.theta == before.theta);
  REQUIRE(r.model.heads.size() == before.heads.size() + 1);
  for (std::size_t k = 0; k < before.heads.size(); ++k) CHECK(r.model.heads[k].params == before.heads[k].params);
  CHECK(res.head == before.heads.size());
  CHECK(r.model.head_subjects.back() == "target:" + split.target.subject_id);
  if (res.reused) CHECK(r.model.heads[res.head].params != before.heads[*res.source_head].params);
}

TEST_CASE("same seed gives identical training reports") {
  const auto data = noisy_tiny(4);
  const auto cfg = tiny_train_config(2);
  const auto a = train_valerian(data, cfg, tiny_extractor(data));
  const auto b = train_valerian(data, cfg, tiny_extractor(data));
  REQUIRE(a.report.epochs.size() == b.report.epochs.size());
  for (std::size_t e = 0; e < a.report.epochs.size(); ++e) {
    CHECK(std::abs(a.report.epochs[e].extractor_loss - b.report.epochs[e].extractor_loss) < 1e-6);
    REQUIRE(a.report.epochs[e].task_loss.size() == b.report.epochs[e].task_loss.size());
    for (std::size_t k = 0; k < a.report.epochs[e].task_loss.size(); ++k) {
      CHECK(std::abs(a.report.epochs[e].task_loss[k] - b.report.epochs[e].task_loss[k]) < 1e-6);
    }
  }
  CHECK(a.model.theta == b.model.theta);

  auto other = cfg;
  other.seed = cfg.seed + 1;
  const auto c = train_valerian(data, other, tiny_extractor(data));
  CHECK(c.model.theta != a.model.theta);
}

TEST_CASE("lambda zero matches the regularizer switched off") {
  const auto data = noisy_tiny(5);
  auto on = tiny_train_config(2);
  on.weights.lambda = 0.0;
  auto off = tiny_train_config(2);
  off.use_elr = false;
  const auto a = train_valerian(data, on, tiny_extractor(data));
  const auto b = train_valerian(data, off, tiny_extractor(data));
  CHECK(a.model.theta == b.model.theta);
  CHECK(a.report.epochs.back().extractor_loss == b.report.epochs.back().extractor_loss);
}

TEST_CASE("zero pretraining epochs keep the initial extractor") {
  const auto data = noisy_tiny(6);
  auto cfg = tiny_train_config(1);
  cfg.pretrain.epochs = 0;
  auto m = init_model<float>(tiny_extractor(data), {{0, 1, 2}}, 1);
  const auto theta = m.theta;
  std::vector<SensorWindow> all;
  for (const auto& d : data.domains) all.insert(all.end(), d.windows.begin(), d.windows.end());
  const auto r = pretrain_self_supervised(m, all, cfg.pretrain, 2);
  CHECK(m.theta == theta);
  CHECK(r.epoch_loss.empty());
  CHECK_NOTHROW(train_valerian(data, cfg, tiny_extractor(data)));
}

TEST_CASE("pretraining moves the extractor and reports an auc per transformation") {
  const auto data = noisy_tiny(7);
  auto cfg = tiny_train_config().pretrain;
  cfg.epochs = 2;
  auto m = init_model<float>(tiny_extractor(data), {{0, 1, 2}}, 1);
  const auto theta = m.theta;
  std::vector<SensorWindow> all;
  for (const auto& d : data.domains) all.insert(all.end(), d.windows.begin(), d.windows.end());
  const auto r = pretrain_self_supervised(m, all, cfg, 2);
  CHECK(m.theta != theta);
  CHECK(r.theta == m.theta);
  CHECK(r.epoch_loss.size() == 2);
  for (double a : r.auc) {
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
  }
}

TEST_CASE("a precomputed extractor replaces pretraining") {
  const auto data = noisy_tiny(8);
  auto cfg = tiny_train_config(0);
  const auto e = tiny_extractor(data);
  const auto init = init_model<float>(e, {{0}}, 77);
  const auto r = train_valerian(data, cfg, e, nullptr, &init.theta);
  CHECK(r.model.theta == init.theta);
  CHECK(r.report.pretext_auc.empty());
  std::vector<float> wrong(3);
  CHECK_THROWS_AS(train_valerian(data, cfg, e, nullptr, &wrong), ConfigError);
}

TEST_CASE("trainer builds one head per subject over its observed classes") {
  const auto data = noisy_tiny(9);
  const auto r = train_valerian(data, tiny_train_config(1), tiny_extractor(data));
  REQUIRE(r.model.heads.size() == data.domains.size());
  for (std::size_t k = 0; k < data.domains.size(); ++k) {
    CHECK(r.model.head_subjects[k] == data.domains[k].subject_id);
    std::set<int> seen;
    for (const auto& w : data.domains[k].windows) seen.insert(*w.observed_label());
    CHECK(r.model.heads[k].classes == std::vector<int>(seen.begin(), seen.end()));
  }
  REQUIRE(r.ensemble);
  CHECK(r.ensemble->domain_count() == data.domains.size());
}

TEST_CASE("monitored epochs report accuracy and a memorization partition") {
  const auto data = noisy_tiny(10);
  const Monitor mon(data);
  CHECK(mon.has_clean());
  CHECK(mon.has_masks());
  auto cfg = tiny_train_config(3);
  cfg.report_every = 2;
  const auto r = train_valerian(data, cfg, tiny_extractor(data), &mon);
  REQUIRE(r.report.epochs.size() == 3);
  CHECK_FALSE(r.report.epochs[0].monitored);
  CHECK(r.report.epochs[1].monitored);
  const auto& last = r.report.epochs[2];
  REQUIRE(last.monitored);
  REQUIRE(last.memorization);
  CHECK(last.memorization->total() == doctest::Approx(1.0));
  REQUIRE(last.clean_accuracy);
  const auto direct = memorization_breakdown(r.model, data);
  CHECK(direct.noisy_memorized == doctest::Approx(last.memorization->noisy_memorized));
}

TEST_CASE("a subject without windows is rejected") {
  auto data = noisy_tiny(11);
  data.domains[1].windows.clear();
  data.domains[1].flip_mask.clear();
  CHECK_THROWS_AS(train_valerian(data, tiny_train_config(1), tiny_extractor(data)), ConfigError);
}

TEST_CASE("pooled trainers") {
  const auto data = noisy_tiny(12);
  const Monitor mon(data);
  const auto cfg = tiny_train_config(2);
  const auto si = train_si(data, cfg, tiny_extractor(data), false, &mon);
  CHECK(si.report.method == "si");
  CHECK(si.model.heads.size() == 1);
  CHECK_FALSE(si.best_model);
  CHECK(si.report.epochs.size() == 2);

  const auto elr = train_si(data, cfg, tiny_extractor(data), true, &mon);
  CHECK(elr.report.method == "si-elr");
  REQUIRE(elr.best_model);
  REQUIRE(elr.report.best_epoch);
  CHECK(*elr.report.best_epoch >= 1);
  CHECK(elr.report.epochs.back().validation_accuracy);

  // Without clean labels there is nothing to select on.
  const auto before = warning_count();
  set_warnings_enabled(false);
  const auto blind = train_si(data, cfg, tiny_extractor(data), true, nullptr);
  set_warnings_enabled(true);
  CHECK(warning_count() > before);
  CHECK_FALSE(blind.best_model);
}

TEST_CASE("single-task trainer on clean support") {
  const auto data = tiny_dataset(13);
  const auto shots = sample_clean_shots(data.domains[0], 3, 1);
  auto cfg = tiny_train_config();
  cfg.stl_iterations = 7;
  const auto r = train_stl(shots.support, 3, cfg, tiny_extractor(data));
  CHECK(r.report.method == "stl");
  CHECK_FALSE(r.report.degenerate);
  CHECK(r.report.epochs.size() == 4);  // 9 windows: batches of 8 and 1, so 7 iterations end 4 passes
  CHECK(r.report.epochs.back().monitored);

  std::vector<SensorWindow> one_class;
  for (const auto& w : shots.support) {
    if (*w.clean_label == 0) one_class.push_back(w);
  }
  set_warnings_enabled(false);
  const auto d = train_stl(one_class, 3, cfg, tiny_extractor(data));
  set_warnings_enabled(true);
  CHECK(d.report.degenerate);
  CHECK_THROWS_AS(train_stl(shots.support, 2, cfg, tiny_extractor(data)), ConfigError);
  CHECK_THROWS_AS(train_stl({}, 3, cfg, tiny_extractor(data)), ConfigError);
}

TEST_CASE("checkpoints carry method, epoch and seed") {
  const auto dir = std::filesystem::temp_directory_path() / "valerian_train_ckpt";
  std::filesystem::remove_all(dir);
  const auto data = noisy_tiny(14);
  auto cfg = tiny_train_config(2);
  cfg.use_pretrain = false;
  cfg.checkpoint_dir = dir;
  cfg.checkpoint_every = 1;
  const auto r = train_valerian(data, cfg, tiny_extractor(data));
  CHECK(std::filesystem::exists(dir / "valerian_epoch_0001.valm"));
  CHECK(std::filesystem::exists(dir / "valerian_epoch_0002.valm"));
  REQUIRE(r.report.checkpoint == dir / "valerian_final.valm");
  CheckpointMeta meta;
  const auto loaded = load_model(r.report.checkpoint, &meta);
  CHECK(meta.method == "valerian");
  CHECK(meta.epoch == 2);
  CHECK(meta.seed == cfg.seed);
  CHECK(loaded.theta == r.model.theta);
  std::filesystem::remove_all(dir);
}

TEST_CASE("training report csv and summary") {
  const auto data = noisy_tiny(15);
  const Monitor mon(data);
  auto cfg = tiny_train_config(2);
  cfg.use_pretrain = false;
  const auto r = train_valerian(data, cfg, tiny_extractor(data), &mon);
  const auto path = std::filesystem::temp_directory_path() / "valerian_report.csv";
  r.report.write_csv(path);
  std::ifstream in(path);
  std::string header, line;
  std::getline(in, header);
  CHECK(header.rfind("epoch,extractor_loss,task_loss_0,task_loss_1,task_loss_2,", 0) == 0);
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 2);
  std::filesystem::remove(path);

  const auto j = nlohmann::json::parse(r.report.summary_json());
  CHECK(j["method"] == "valerian");
  CHECK(j["epochs"] == 2);
  CHECK(j["final_task_loss"].size() == 3);
  CHECK(j.contains("final_noisy_memorized"));
}

TEST_CASE("fit_extractor adopts the window shape") {
  const auto data = tiny_dataset(16);
  const auto e = fit_extractor(ExtractorConfig::reduced(), data);
  CHECK(e.input_steps == 50);
  CHECK(e.input_channels == 6);
}
