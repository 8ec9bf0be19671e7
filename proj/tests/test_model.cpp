#include <cmath>
#include <cstdio>
#include <filesystem>

#include "cnd/model.hpp"
#include "doctest.h"
#include "support/oracles.hpp"

using namespace cnd;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.input_dim = 6;
  c.hidden_dims = {8, 8};
  c.feature_dim = 4;
  return c;
}

Mat random_input(Rng& rng, int rows, int cols) {
  Mat x(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) x(i, j) = rng.normal();
  return x;
}

}  // namespace

TEST_CASE("model: initialization bounds and determinism") {
  const ModelConfig cfg = small_config();
  Model a = make_model(cfg, Setting::MultiHead, 99);
  Model b = make_model(cfg, Setting::MultiHead, 99);
  Model c = make_model(cfg, Setting::MultiHead, 100);
  REQUIRE(a.layers.size() == 3);  // two hidden + projection
  CHECK(a.layers[0].relu_after);
  CHECK(a.layers[1].relu_after);
  CHECK_FALSE(a.layers[2].relu_after);
  for (size_t l = 0; l < a.layers.size(); ++l) {
    const double bound = std::sqrt(1.0 / static_cast<double>(a.layers[l].weight.value.rows()));
    CHECK(a.layers[l].weight.value.cwiseAbs().maxCoeff() <= bound);
    CHECK(a.layers[l].bias.value.cwiseAbs().maxCoeff() <= bound);
    CHECK(a.layers[l].weight.value == b.layers[l].weight.value);
  }
  CHECK(a.layers[0].weight.value != c.layers[0].weight.value);
  CHECK(a.num_heads() == 0);
}

TEST_CASE("model: multi-head growth and duplicate-id validation") {
  Model m = make_model(small_config(), Setting::MultiHead, 1);
  add_stage_head(m, {0, 1, 2}, 11);
  add_stage_head(m, {3, 4, 5}, 12);
  REQUIRE(m.num_heads() == 2);
  CHECK(m.heads[0].class_ids == std::vector<int>{0, 1, 2});
  CHECK(m.heads[1].class_ids == std::vector<int>{3, 4, 5});
  CHECK(m.heads[0].weight.value.rows() == 4);
  CHECK(m.heads[0].weight.value.cols() == 3);
  CHECK_FALSE(m.heads[0].bias.has_value());  // default is bias-free
  CHECK_THROWS_AS(add_stage_head(m, {2, 6}, 13), ConfigError);
}

TEST_CASE("model: shared head grows in place, old columns bit-unchanged") {
  ModelConfig cfg = small_config();
  cfg.head_bias = true;
  Model m = make_model(cfg, Setting::SharedHead, 2);
  add_stage_head(m, {0, 1}, 21);
  REQUIRE(m.num_heads() == 1);
  const Mat before = m.heads[0].weight.value;
  const Mat bias_before = m.heads[0].bias->value;
  add_stage_head(m, {2, 3, 4}, 22);
  REQUIRE(m.num_heads() == 1);
  CHECK(m.heads[0].weight.value.cols() == 5);
  CHECK(m.heads[0].weight.value.leftCols(2) == before);
  CHECK(m.heads[0].bias->value.leftCols(2) == bias_before);
  CHECK(m.heads[0].class_ids == std::vector<int>{0, 1, 2, 3, 4});
}

TEST_CASE("model: plain eval matches taped eval bitwise") {
  Rng rng(5);
  Model m = make_model(small_config(), Setting::MultiHead, 3);
  add_stage_head(m, {0, 1, 2}, 31);
  const Mat x = random_input(rng, 7, 6);

  const Mat f = features_eval(m, x);
  const Mat logits = head_logits_eval(m, f, 0);

  Tape t;
  Rng unused(0);
  const VarId ft = features_train(t, m, t.constant(x), 0.0, unused);
  const VarId lt = head_logits_train(t, m, ft, 0);
  CHECK(t.value(ft) == f);
  CHECK(t.value(lt) == logits);

  Tape t2;
  const VarId ff = features_frozen(t2, m, t2.constant(x));
  CHECK(t2.value(ff) == f);

  const auto all = eval_all_layers(m, x);
  REQUIRE(all.size() == 3);
  CHECK(all.back() == f);
  CHECK(all[0].cols() == 8);
  CHECK((all[0].array() >= 0.0).all());  // post-ReLU
}

TEST_CASE("model: normalized head is invariant to prototype scale") {
  ModelConfig cfg = small_config();
  cfg.normalized_head = true;
  Model m = make_model(cfg, Setting::SharedHead, 4);
  add_stage_head(m, {0, 1, 2}, 41);
  Rng rng(6);
  const Mat x = random_input(rng, 5, 6);
  const Mat f = features_eval(m, x);
  const Mat l1 = head_logits_eval(m, f, 0);
  m.heads[0].weight.value *= 5.0;
  const Mat l2 = head_logits_eval(m, f, 0);
  CHECK((l1 - l2).cwiseAbs().maxCoeff() < 1e-12);
  // unit feature rows give logits in [-1, 1]
  Mat unit = f;
  for (int i = 0; i < unit.rows(); ++i)
    if (unit.row(i).norm() > 0) unit.row(i).normalize();
  const Mat lu = head_logits_eval(m, unit, 0);
  CHECK(lu.cwiseAbs().maxCoeff() <= 1.0 + 1e-12);
}

TEST_CASE("model: predict maps to global ids with lowest-index ties") {
  Model m = make_model(small_config(), Setting::MultiHead, 7);
  add_stage_head(m, {4, 5, 6}, 71);
  // craft weights so logits are known: zero weights -> all logits equal
  m.heads[0].weight.value.setZero();
  Rng rng(8);
  const Mat x = random_input(rng, 3, 6);
  const auto pred = predict(m, x, 0);
  for (int p : pred) CHECK(p == 4);  // tie -> first column -> global id 4
}

TEST_CASE("model: stage loss leaves other heads untouched") {
  Model m = make_model(small_config(), Setting::MultiHead, 9);
  add_stage_head(m, {0, 1}, 91);
  add_stage_head(m, {2, 3}, 92);
  Rng rng(10);
  const Mat x = random_input(rng, 4, 6);

  const Mat head0_before = m.heads[0].weight.value;
  Tape t;
  Rng no_drop(0);
  const VarId f = features_train(t, m, t.constant(x), 0.0, no_drop);
  const VarId logits = head_logits_train(t, m, f, 1);
  t.backward(cross_entropy_sum(t, logits, {0, 1, 0, 1}));

  CHECK_FALSE(m.heads[0].weight.has_grad());
  CHECK(m.heads[1].weight.has_grad());
  CHECK(m.layers[0].weight.has_grad());

  auto params = feature_params(m);
  auto h1 = head_params(m, 1);
  params.insert(params.end(), h1.begin(), h1.end());
  sgd_step(params, 0.05, 0.0);
  CHECK(m.heads[0].weight.value == head0_before);
}

TEST_CASE("model: input gradient matches finite differences, parameters untouched") {
  Model m = make_model(small_config(), Setting::MultiHead, 12);
  add_stage_head(m, {0, 1, 2}, 121);
  Rng rng(13);
  const Mat x = random_input(rng, 3, 6);
  const std::vector<int> labels = {1, 0, 2};
  const double T = 10.0;

  const Mat w0 = m.layers[0].weight.value;
  const Mat g = input_gradient_ce(m, x, 0, labels, T);
  CHECK(m.layers[0].weight.value == w0);
  CHECK_FALSE(m.layers[0].weight.has_grad());

  const auto obj = [&](const Mat& xv) {
    const Mat logits = head_logits_eval(m, features_eval(m, xv), 0) / T;
    double total = 0.0;
    for (int i = 0; i < logits.rows(); ++i) {
      const double mx = logits.row(i).maxCoeff();
      const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
      total += lse - logits(i, labels[static_cast<size_t>(i)]);
    }
    return total;
  };
  CHECK(oracle::grad_close(g, oracle::finite_difference(obj, x)));
}

TEST_CASE("model: col_normalize gradient matches finite differences") {
  Rng rng(14);
  Tensor w(random_input(rng, 4, 3), true);
  const Mat c = random_input(rng, 4, 3);
  const auto obj = [&](const Mat& v) {
    double s = 0.0;
    for (int j = 0; j < v.cols(); ++j) s += v.col(j).normalized().dot(c.col(j));
    return s;
  };
  Tape t;
  t.backward(sum_all(t, cmul(t, col_normalize(t, t.watch(w)), c)));
  CHECK(oracle::grad_close(w.grad, oracle::finite_difference(obj, w.value)));
}

TEST_CASE("model: checkpoint roundtrip preserves every bit") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "cnd_ckpt_test.bin").string();

  ModelConfig cfg = small_config();
  cfg.head_bias = true;
  cfg.normalized_head = true;
  Model m = make_model(cfg, Setting::SharedHead, 15);
  add_stage_head(m, {0, 1}, 151);
  add_stage_head(m, {2, 3}, 152);
  save_checkpoint(m, 1, path);

  auto [loaded, stage] = load_checkpoint(path);
  CHECK(stage == 1);
  CHECK(loaded.setting == Setting::SharedHead);
  CHECK(loaded.config.input_dim == cfg.input_dim);
  CHECK(loaded.config.feature_dim == cfg.feature_dim);
  CHECK(loaded.config.hidden_dims == cfg.hidden_dims);
  REQUIRE(loaded.layers.size() == m.layers.size());
  for (size_t l = 0; l < m.layers.size(); ++l) {
    CHECK(loaded.layers[l].weight.value == m.layers[l].weight.value);
    CHECK(loaded.layers[l].bias.value == m.layers[l].bias.value);
    CHECK(loaded.layers[l].relu_after == m.layers[l].relu_after);
  }
  REQUIRE(loaded.num_heads() == 1);
  CHECK(loaded.heads[0].weight.value == m.heads[0].weight.value);
  REQUIRE(loaded.heads[0].bias.has_value());
  CHECK(loaded.heads[0].bias->value == m.heads[0].bias->value);
  CHECK(loaded.heads[0].normalized);
  CHECK(loaded.heads[0].class_ids == m.heads[0].class_ids);

  // behavioral equality on random input
  Rng rng(16);
  const Mat x = random_input(rng, 5, 6);
  CHECK(head_logits_eval(loaded, features_eval(loaded, x), 0) ==
        head_logits_eval(m, features_eval(m, x), 0));

  std::remove(path.c_str());
}

TEST_CASE("model: checkpoint rejects garbage") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "cnd_ckpt_bad.bin").string();
  {
    FILE* f = std::fopen(path.c_str(), "wb");
    REQUIRE(f != nullptr);
    std::fwrite("NOTAMODEL", 1, 9, f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(load_checkpoint(path), ParseError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/definitely/missing.bin"), ParseError);

  // truncated valid prefix
  Model m = make_model(small_config(), Setting::MultiHead, 17);
  add_stage_head(m, {0, 1}, 171);
  save_checkpoint(m, 0, path);
  {
    const auto full = fs::file_size(path);
    fs::resize_file(path, full - 16);
  }
  CHECK_THROWS_AS(load_checkpoint(path), ParseError);
  std::remove(path.c_str());
}

TEST_CASE("model: snapshots are independent deep copies") {
  Model m = make_model(small_config(), Setting::MultiHead, 18);
  add_stage_head(m, {0, 1}, 181);
  ModelSnapshot snap{m, 0};
  const Mat w = snap.model.heads[0].weight.value;
  m.heads[0].weight.value.setConstant(42.0);
  CHECK(snap.model.heads[0].weight.value == w);
}
