#include <doctest.h>

#include <cmath>

#include "valerian/noise.hpp"

using namespace valerian;

namespace {

SubjectDomain labelled_domain(int classes, int per_class) {
  SubjectDomain d;
  d.subject_id = "S";
  d.num_classes = classes;
  std::int64_t id = 0;
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      SensorWindow w;
      w.values = Matrix<float>(1, 1);
      w.subject_id = "S";
      w.clean_label = c;
      w.window_id = id++;
      d.windows.push_back(std::move(w));
    }
  }
  return d;
}

void check_row_stochastic(const NoiseTransitionMatrix& t) {
  for (std::size_t i = 0; i < t.matrix.rows(); ++i) {
    double s = 0.0;
    for (double v : t.matrix.row(i)) {
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

}  // namespace

TEST_CASE("symmetric matrices") {
  const auto t = symmetric_matrix(10, 0.4);
  check_row_stochastic(t);
  CHECK(t.matrix(0, 0) == doctest::Approx(0.6));
  CHECK(t.matrix(3, 7) == doctest::Approx(0.4 / 9.0));
  const auto id = symmetric_matrix(5, 0.0);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 5; ++j) CHECK(id.matrix(i, j) == (i == j ? 1.0 : 0.0));
  }
  const auto half = symmetric_matrix(2, 0.5);
  for (double v : half.matrix.values()) CHECK(v == 0.5);
  CHECK_THROWS_AS(symmetric_matrix(3, 1.0), ConfigError);
  CHECK_THROWS_AS(symmetric_matrix(1, 0.1), ConfigError);
}

TEST_CASE("asymmetric matrices") {
  const auto t = asymmetric_matrix(3, 0.3, {{0, 1}, {1, 2}, {2, 0}});
  check_row_stochastic(t);
  const double expect[3][3] = {{0.7, 0.3, 0.0}, {0.0, 0.7, 0.3}, {0.3, 0.0, 0.7}};
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) CHECK(t.matrix(i, j) == doctest::Approx(expect[i][j]));
  }
  const auto id = asymmetric_matrix(3, 0.0, {{0, 1}, {1, 2}, {2, 0}});
  for (std::size_t i = 0; i < 3; ++i) CHECK(id.matrix(i, i) == 1.0);
  CHECK_THROWS_AS(asymmetric_matrix(3, 0.2, {{0, 0}, {1, 2}, {2, 0}}), ConfigError);
  CHECK_THROWS_AS(asymmetric_matrix(3, 0.2, {{0, 1}, {1, 2}}), ConfigError);
}

TEST_CASE("confusion pairs from a confusion matrix") {
  Matrix<double> cm(3, 3, 0.0);
  cm(0, 0) = 90;
  cm(0, 1) = 6;
  cm(0, 2) = 4;
  cm(1, 1) = 90;
  cm(1, 0) = 5;
  cm(1, 2) = 5;
  cm(2, 2) = 100;
  set_warnings_enabled(false);
  const auto before = warning_count();
  const auto pairs = derive_confusion_pairs(cm);
  set_warnings_enabled(true);
  CHECK(pairs.at(0) == 1);
  CHECK(pairs.at(1) == 0);
  CHECK(pairs.at(2) == 0);  // fallback (2 + 1) mod 3
  CHECK(warning_count() == before + 1);
}

TEST_CASE("injection: identity, determinism and flip bookkeeping") {
  const auto dom = labelled_domain(4, 200);
  const auto none = inject(dom, symmetric_matrix(4, 0.0), 1);
  for (const auto& r : none.records) CHECK_FALSE(r.flipped);
  for (bool f : none.domain.flip_mask) CHECK_FALSE(f);

  const auto t = asymmetric_matrix(4, 0.2, {{0, 1}, {1, 2}, {2, 3}, {3, 0}});
  const auto a = inject(dom, t, 5);
  const auto b = inject(dom, t, 5);
  CHECK(a.domain == b.domain);
  for (std::size_t i = 0; i < dom.windows.size(); ++i) {
    const auto& w = a.domain.windows[i];
    const auto& r = a.records[i];
    CHECK(w.clean_label == dom.windows[i].clean_label);
    CHECK(r.flipped == (r.assigned != r.original));
    CHECK(a.domain.flip_mask[i] == r.flipped);
    CHECK(*w.noisy_label == r.assigned);
    if (r.flipped) CHECK(r.assigned == (r.original + 1) % 4);
  }

  auto bad = dom;
  bad.windows[0].clean_label = 7;
  CHECK_THROWS_AS(inject(bad, t, 1), ConfigError);
}

TEST_CASE("injection flip rate matches tau") {
  const auto dom = labelled_domain(4, 10000);
  const auto r = inject(dom, symmetric_matrix(4, 0.4), 21);
  std::vector<int> flips(4, 0);
  for (const auto& rec : r.records) flips[static_cast<std::size_t>(rec.original)] += rec.flipped ? 1 : 0;
  for (int f : flips) CHECK(std::abs(f / 10000.0 - 0.4) <= 0.015);
}

TEST_CASE("empirical transition") {
  const std::vector<int> clean{0, 0, 1}, noisy{1, 0, 1};
  const auto e = empirical_transition(clean, noisy, 2);
  CHECK(e.matrix(0, 0) == 0.5);
  CHECK(e.matrix(0, 1) == 0.5);
  CHECK(e.matrix(1, 0) == 0.0);
  CHECK(e.matrix(1, 1) == 1.0);

  const auto id = empirical_transition(clean, clean, 3);
  CHECK(id.empty_rows[2]);
  CHECK(id.matrix(2, 0) == doctest::Approx(1.0 / 3.0));
  CHECK(id.matrix(0, 0) == 1.0);
}

TEST_CASE("empirical transition recovers T at large N") {
  const auto dom = labelled_domain(5, 20000);
  const auto t = asymmetric_matrix(5, 0.4, {{0, 2}, {1, 0}, {2, 4}, {3, 1}, {4, 3}});
  const auto r = inject(dom, t, 99);
  std::vector<int> clean, noisy;
  for (const auto& rec : r.records) {
    clean.push_back(rec.original);
    noisy.push_back(rec.assigned);
  }
  const auto e = empirical_transition(clean, noisy, 5);
  for (std::size_t i = 0; i < e.matrix.size(); ++i) CHECK(std::abs(e.matrix.values()[i] - t.matrix.values()[i]) < 0.01);
}

TEST_CASE("dataset injection uses per-subject seeds") {
  MultiSubjectDataset ds;
  ds.schema.classes = {"a", "b", "c"};
  for (const char* id : {"A", "B"}) {
    auto d = labelled_domain(3, 300);
    d.subject_id = id;
    for (auto& w : d.windows) w.subject_id = id;
    ds.domains.push_back(d);
  }
  const auto t = symmetric_matrix(3, 0.4);
  const auto both = inject_dataset(ds, t, 3);
  MultiSubjectDataset only_b = ds;
  only_b.domains.erase(only_b.domains.begin());
  const auto just_b = inject_dataset(only_b, t, 3);
  CHECK(both.domains[1] == just_b.domains[0]);
  CHECK_FALSE(both.domains[0].flip_mask == both.domains[1].flip_mask);
}
