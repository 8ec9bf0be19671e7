#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "cnd/dataset.hpp"
#include "doctest.h"

using namespace cnd;

namespace {

SequenceSpec tiny_spec() {
  SequenceSpec s;
  s.num_stages = 3;
  s.classes_per_stage = 2;
  s.input_dim = 8;
  s.train_per_class = 10;
  s.val_per_class = 4;
  s.test_per_class = 6;
  s.seed = 77;
  s.ood_classes = 2;
  s.ood_per_class = 5;
  return s;
}

}  // namespace

TEST_CASE("dataset: stage class ownership") {
  SequenceSpec s = tiny_spec();
  CHECK(stage_class_ids(s, 0) == std::vector<int>{0, 1});
  CHECK(stage_class_ids(s, 2) == std::vector<int>{4, 5});
  CHECK_THROWS_AS(stage_class_ids(s, 3), IndexError);
  CHECK_THROWS_AS(stage_class_ids(s, -1), IndexError);
}

TEST_CASE("dataset: generation counts, labels, determinism") {
  const SequenceSpec s = tiny_spec();
  const Sequence a = generate_sequence(s);
  const Sequence b = generate_sequence(s);
  REQUIRE(a.stages.size() == 3);
  for (int t = 0; t < 3; ++t) {
    CHECK(a.stages[t].train.size() == 2 * 10);
    CHECK(a.stages[t].val.size() == 2 * 4);
    CHECK(a.stages[t].test.size() == 2 * 6);
    std::set<int> labels;
    for (const auto& e : a.stages[t].train) {
      labels.insert(e.label);
      CHECK(e.stage == t);
      CHECK(e.x.size() == 8);
    }
    const auto ids = stage_class_ids(s, t);
    CHECK(labels == std::set<int>(ids.begin(), ids.end()));
  }
  // bitwise determinism
  for (int t = 0; t < 3; ++t)
    for (size_t i = 0; i < a.stages[t].train.size(); ++i)
      CHECK(a.stages[t].train[i].x == b.stages[t].train[i].x);

  SequenceSpec s2 = s;
  s2.seed = 78;
  const Sequence c = generate_sequence(s2);
  CHECK(a.stages[0].train[0].x != c.stages[0].train[0].x);

  // changing one class's count must not shift another class's draws
  SequenceSpec s3 = s;
  s3.test_per_class = 9;
  const Sequence d = generate_sequence(s3);
  CHECK(a.stages[1].train[0].x == d.stages[1].train[0].x);
}

TEST_CASE("dataset: ood calibration set is class-disjoint and offset") {
  const SequenceSpec s = tiny_spec();
  const Sequence seq = generate_sequence(s);
  REQUIRE(seq.ood_calibration.size() == 2 * 5);
  const int total_classes = s.num_stages * s.classes_per_stage;
  Vec mean = Vec::Zero(s.input_dim);
  for (const auto& e : seq.ood_calibration) {
    CHECK(e.label >= total_classes);
    CHECK(e.stage == -1);
    mean += e.x;
  }
  mean /= static_cast<double>(seq.ood_calibration.size());
  // region center sits at distance ood_offset * class_separation = 6
  CHECK(mean.norm() > 3.0);
  CHECK(mean.norm() < 9.0);
}

TEST_CASE("dataset: regimes differ in stage-region geometry") {
  SequenceSpec s = tiny_spec();
  s.train_per_class = 60;
  const Sequence same = generate_sequence(s);
  s.regime = Regime::DisjointDomain;
  const Sequence disj = generate_sequence(s);

  const auto stage_mean = [&](const Sequence& seq, int t) {
    Vec m = Vec::Zero(s.input_dim);
    for (const auto& e : seq.stages[t].train) m += e.x;
    return Vec(m / static_cast<double>(seq.stages[t].train.size()));
  };
  double same_max = 0.0, disj_min = 1e9;
  for (int i = 0; i < 3; ++i)
    for (int j = i + 1; j < 3; ++j) {
      same_max = std::max(same_max, (stage_mean(same, i) - stage_mean(same, j)).norm());
      disj_min = std::min(disj_min, (stage_mean(disj, i) - stage_mean(disj, j)).norm());
    }
  CHECK(same_max < 8.0);    // shared region: stage means stay close
  CHECK(disj_min > 12.0);   // separated regions: far apart
}

TEST_CASE("dataset: disjoint regime needs enough dimensions") {
  SequenceSpec s = tiny_spec();
  s.regime = Regime::DisjointDomain;
  s.input_dim = 2;  // fewer than num_stages
  CHECK_THROWS_AS(generate_sequence(s), ConfigError);
}

TEST_CASE("dataset: spec validation") {
  SequenceSpec s = tiny_spec();
  s.num_stages = 0;
  CHECK_THROWS_AS(generate_sequence(s), ConfigError);
  s = tiny_spec();
  s.train_per_class = 0;
  CHECK_THROWS_AS(generate_sequence(s), ConfigError);
  s = tiny_spec();
  s.class_separation = -1.0;
  CHECK_THROWS_AS(generate_sequence(s), ConfigError);
}

TEST_CASE("dataset: csv export/import round-trips bitwise") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "cnd_seq_test.csv").string();
  const Sequence seq = generate_sequence(tiny_spec());

  std::vector<LabeledExample> pool;
  for (const auto& st : seq.stages) {
    pool.insert(pool.end(), st.train.begin(), st.train.end());
    pool.insert(pool.end(), st.val.begin(), st.val.end());
    pool.insert(pool.end(), st.test.begin(), st.test.end());
  }
  export_csv(pool, 8, path);

  int dim = 0;
  const auto loaded = import_csv(path, dim);
  CHECK(dim == 8);
  REQUIRE(loaded.size() == pool.size());
  for (size_t i = 0; i < pool.size(); ++i) {
    CHECK(loaded[i].label == pool[i].label);
    CHECK(loaded[i].stage == pool[i].stage);
    CHECK(loaded[i].x == pool[i].x);  // %.17g survives the round trip exactly
  }
  std::remove(path.c_str());
}

TEST_CASE("dataset: csv parse errors carry line numbers") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "cnd_bad.csv").string();
  int dim = 0;

  const auto write = [&](const std::string& text) {
    std::ofstream f(path);
    f << text;
  };

  write("nonsense,y,x0\n0,0,1.0\n");
  CHECK_THROWS_AS(import_csv(path, dim), ParseError);

  write("stage,y,x0,x1\n0,0,1.0\n");  // row too short
  try {
    import_csv(path, dim);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line_number == 2);
  }

  write("stage,y,x0\n0,0,abc\n");
  CHECK_THROWS_AS(import_csv(path, dim), ParseError);
  write("stage,y,x0\n0,0,inf\n");
  CHECK_THROWS_AS(import_csv(path, dim), ParseError);
  write("stage,y,x0\n-2,0,1.0\n");
  CHECK_THROWS_AS(import_csv(path, dim), ParseError);

  CHECK_THROWS_AS(import_csv("/definitely/not/here.csv", dim), ParseError);
  std::remove(path.c_str());
}

TEST_CASE("dataset: assemble_sequence splits by ratio and validates") {
  std::vector<LabeledExample> pool;
  const auto push = [&](int stage, int label, double v) {
    LabeledExample e;
    e.x = Vec::Constant(2, v);
    e.label = label;
    e.stage = stage;
    pool.push_back(e);
  };
  // stage 0: class 0 with 10 rows, class 1 with 10 rows; stage 1: class 2 with 5
  for (int i = 0; i < 10; ++i) push(0, 0, i);
  for (int i = 0; i < 10; ++i) push(0, 1, 100 + i);
  for (int i = 0; i < 5; ++i) push(1, 2, 200 + i);

  SplitRatios r;
  r.train = 0.6;
  r.val = 0.2;
  r.test = 0.2;
  const Sequence seq = assemble_sequence(pool, 2, r);
  REQUIRE(seq.stages.size() == 2);
  CHECK(seq.stages[0].train.size() == 12);  // 6 per class
  CHECK(seq.stages[0].val.size() == 4);
  CHECK(seq.stages[0].test.size() == 4);
  CHECK(seq.stages[1].train.size() == 3);   // floor(5*0.6)
  CHECK(seq.stages[1].val.size() == 1);     // floor(5*0.2)
  CHECK(seq.stages[1].test.size() == 1);    // remainder
  // order preserved: first rows of class 0 go to train
  CHECK(seq.stages[0].train[0].x(0) == 0.0);
  CHECK(seq.stages[0].test.back().x(0) == doctest::Approx(109.0));

  SUBCASE("class in two stages is rejected") {
    push(1, 0, 999);
    CHECK_THROWS_AS(assemble_sequence(pool, 2, r), ConfigError);
  }
  SUBCASE("non-contiguous stages are rejected") {
    push(3, 9, 0);
    CHECK_THROWS_AS(assemble_sequence(pool, 2, r), ConfigError);
  }
  SUBCASE("dimension mismatch is rejected") {
    LabeledExample e;
    e.x = Vec::Constant(5, 1.0);
    e.label = 3;
    e.stage = 1;
    pool.push_back(e);
    CHECK_THROWS_AS(assemble_sequence(pool, 2, r), DimensionError);
  }
  SUBCASE("ratios must sum to one") {
    SplitRatios bad;
    bad.train = 0.5;
    bad.val = 0.1;
    bad.test = 0.1;
    CHECK_THROWS_AS(assemble_sequence(pool, 2, bad), ConfigError);
  }
  SUBCASE("stage -1 rows become the calibration set") {
    push(-1, 50, 7.0);
    push(-1, 50, 8.0);
    const Sequence with_ood = assemble_sequence(pool, 2, r);
    CHECK(with_ood.ood_calibration.size() == 2);
    CHECK(with_ood.ood_calibration[0].label == 50);
  }
}

TEST_CASE("dataset: export then assemble reproduces the original splits") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "cnd_reassemble.csv").string();
  const SequenceSpec spec = tiny_spec();  // 10/4/6 per class = 0.5/0.2/0.3
  const Sequence seq = generate_sequence(spec);

  std::vector<LabeledExample> pool;
  for (const auto& st : seq.stages) {
    pool.insert(pool.end(), st.train.begin(), st.train.end());
    pool.insert(pool.end(), st.val.begin(), st.val.end());
    pool.insert(pool.end(), st.test.begin(), st.test.end());
  }
  pool.insert(pool.end(), seq.ood_calibration.begin(), seq.ood_calibration.end());
  export_csv(pool, spec.input_dim, path);

  int dim = 0;
  const auto loaded = import_csv(path, dim);
  SplitRatios r;
  r.train = 0.5;
  r.val = 0.2;
  r.test = 0.3;
  const Sequence back = assemble_sequence(loaded, dim, r);
  REQUIRE(back.stages.size() == seq.stages.size());
  CHECK(back.ood_calibration.size() == seq.ood_calibration.size());
  for (size_t t = 0; t < seq.stages.size(); ++t) {
    REQUIRE(back.stages[t].train.size() == seq.stages[t].train.size());
    REQUIRE(back.stages[t].val.size() == seq.stages[t].val.size());
    REQUIRE(back.stages[t].test.size() == seq.stages[t].test.size());
    for (size_t i = 0; i < seq.stages[t].train.size(); ++i)
      CHECK(back.stages[t].train[i].x == seq.stages[t].train[i].x);
    for (size_t i = 0; i < seq.stages[t].test.size(); ++i)
      CHECK(back.stages[t].test[i].label == seq.stages[t].test[i].label);
  }
  CHECK(stage_class_ids(back, 1) == stage_class_ids(spec, 1));
  std::remove(path.c_str());
}

TEST_CASE("dataset: test_pool flattens stage tests in order") {
  const Sequence seq = generate_sequence(tiny_spec());
  const TestPool pool = test_pool(seq);
  REQUIRE(pool.examples.size() == 3 * 12);
  CHECK(pool.stage.size() == pool.examples.size());
  for (size_t i = 0; i < pool.examples.size(); ++i)
    CHECK(pool.stage[i] == pool.examples[i].stage);
  CHECK(pool.stage.front() == 0);
  CHECK(pool.stage.back() == 2);
  // order within a stage matches the stage's own test vector
  CHECK(pool.examples[0].x == seq.stages[0].test[0].x);
}
