#include "cnd/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <set>

namespace cnd {

namespace {

// uniform(-sqrt(1/fan_in), sqrt(1/fan_in)), filled row by row
void init_uniform(Mat& m, int fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-bound, bound);
}

Mat eval_layer(const DenseLayer& l, const Mat& x) {
  Mat z = (x * l.weight.value).rowwise() + Eigen::RowVectorXd(l.bias.value.row(0));
  if (l.relu_after) z = z.cwiseMax(0.0);
  return z;
}

Mat normalized_cols(const Mat& w) {
  Mat out(w.rows(), w.cols());
  for (int j = 0; j < w.cols(); ++j) {
    const double n = w.col(j).norm();
    if (n == 0.0)
      out.col(j).setZero();
    else
      out.col(j) = w.col(j) / n;
  }
  return out;
}

void check_head_index(const Model& m, int head) {
  if (head < 0 || head >= m.num_heads())
    throw IndexError("model: head " + std::to_string(head) + " out of range (have " +
                     std::to_string(m.num_heads()) + ")");
}

}  // namespace

Model make_model(const ModelConfig& cfg, Setting setting, uint64_t seed) {
  if (cfg.input_dim < 1 || cfg.feature_dim < 1)
    throw ConfigError("model: input_dim and feature_dim must be positive");
  for (int h : cfg.hidden_dims)
    if (h < 1) throw ConfigError("model: hidden dims must be positive");
  Model m;
  m.config = cfg;
  m.setting = setting;
  Rng rng(seed);
  int in = cfg.input_dim;
  for (size_t l = 0; l < cfg.hidden_dims.size(); ++l) {
    const int out = cfg.hidden_dims[l];
    DenseLayer layer;
    layer.weight = Tensor(Mat(in, out), true);
    layer.bias = Tensor(Mat(1, out), true);
    layer.relu_after = true;
    init_uniform(layer.weight.value, in, rng);
    init_uniform(layer.bias.value, in, rng);
    m.layers.push_back(std::move(layer));
    in = out;
  }
  DenseLayer proj;
  proj.weight = Tensor(Mat(in, cfg.feature_dim), true);
  proj.bias = Tensor(Mat(1, cfg.feature_dim), true);
  proj.relu_after = false;
  init_uniform(proj.weight.value, in, rng);
  init_uniform(proj.bias.value, in, rng);
  m.layers.push_back(std::move(proj));
  return m;
}

void add_stage_head(Model& m, const std::vector<int>& class_ids, uint64_t seed) {
  if (class_ids.empty()) throw ConfigError("model: a head needs at least one class");
  std::set<int> existing;
  for (const Head& h : m.heads) existing.insert(h.class_ids.begin(), h.class_ids.end());
  for (int id : class_ids) {
    if (!existing.insert(id).second)
      throw ConfigError("model: class id " + std::to_string(id) + " already owned by a head");
  }
  Rng rng(seed);
  const int n = m.config.feature_dim;
  const int k = static_cast<int>(class_ids.size());

  if (m.setting == Setting::SharedHead && !m.heads.empty()) {
    Head& h = m.heads[0];
    const int old_k = static_cast<int>(h.class_ids.size());
    Mat grown(n, old_k + k);
    grown.leftCols(old_k) = h.weight.value;
    Mat fresh(n, k);
    init_uniform(fresh, n, rng);
    grown.rightCols(k) = fresh;
    h.weight.value = std::move(grown);
    h.weight.zero_grad();
    h.weight.grad = Mat();
    if (h.bias.has_value()) {
      Mat gb(1, old_k + k);
      gb.leftCols(old_k) = h.bias->value;
      Mat fb(1, k);
      init_uniform(fb, n, rng);
      gb.rightCols(k) = fb;
      h.bias->value = std::move(gb);
      h.bias->grad = Mat();
    }
    h.class_ids.insert(h.class_ids.end(), class_ids.begin(), class_ids.end());
    return;
  }

  Head h;
  h.weight = Tensor(Mat(n, k), true);
  init_uniform(h.weight.value, n, rng);
  h.normalized = m.config.normalized_head;
  h.class_ids = class_ids;
  if (m.config.head_bias) {
    h.bias = Tensor(Mat(1, k), true);
    init_uniform(h.bias->value, n, rng);
  }
  m.heads.push_back(std::move(h));
}

std::vector<Tensor*> feature_params(Model& m) {
  std::vector<Tensor*> out;
  for (DenseLayer& l : m.layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

std::vector<Tensor*> head_params(Model& m, int head) {
  check_head_index(m, head);
  std::vector<Tensor*> out;
  out.push_back(&m.heads[static_cast<size_t>(head)].weight);
  if (m.heads[static_cast<size_t>(head)].bias.has_value())
    out.push_back(&*m.heads[static_cast<size_t>(head)].bias);
  return out;
}

std::vector<Tensor*> trainable_params(Model& m) {
  std::vector<Tensor*> out = feature_params(m);
  for (int h = 0; h < m.num_heads(); ++h) {
    auto hp = head_params(m, h);
    out.insert(out.end(), hp.begin(), hp.end());
  }
  return out;
}

std::vector<Mat> eval_all_layers(const Model& m, const Mat& x) {
  if (x.cols() != m.config.input_dim)
    throw DimensionError("model: input has " + std::to_string(x.cols()) + " columns, expected " +
                         std::to_string(m.config.input_dim));
  std::vector<Mat> outs;
  outs.reserve(m.layers.size());
  Mat h = x;
  for (const DenseLayer& l : m.layers) {
    h = eval_layer(l, h);
    outs.push_back(h);
  }
  return outs;
}

Mat features_eval(const Model& m, const Mat& x) {
  if (x.cols() != m.config.input_dim)
    throw DimensionError("model: input has " + std::to_string(x.cols()) + " columns, expected " +
                         std::to_string(m.config.input_dim));
  Mat h = x;
  for (const DenseLayer& l : m.layers) h = eval_layer(l, h);
  return h;
}

Mat head_logits_eval(const Model& m, const Mat& features, int head) {
  check_head_index(m, head);
  const Head& h = m.heads[static_cast<size_t>(head)];
  if (features.cols() != h.weight.value.rows())
    throw DimensionError("model: feature width mismatch for head logits");
  Mat logits;
  if (h.normalized)
    logits = features * normalized_cols(h.weight.value);
  else
    logits = features * h.weight.value;
  if (h.bias.has_value()) logits.rowwise() += Eigen::RowVectorXd(h.bias->value.row(0));
  return logits;
}

std::vector<int> predict(const Model& m, const Mat& x, int head) {
  check_head_index(m, head);
  const Mat logits = head_logits_eval(m, features_eval(m, x), head);
  const Head& h = m.heads[static_cast<size_t>(head)];
  std::vector<int> out(static_cast<size_t>(logits.rows()));
  for (int i = 0; i < logits.rows(); ++i) {
    int best = 0;
    for (int j = 1; j < logits.cols(); ++j)
      if (logits(i, j) > logits(i, best)) best = j;  // strict: ties keep lowest index
    out[static_cast<size_t>(i)] = h.class_ids[static_cast<size_t>(best)];
  }
  return out;
}

VarId features_train(Tape& t, Model& m, VarId x, double dropout_rate, Rng& rng) {
  VarId h = x;
  for (DenseLayer& l : m.layers) {
    h = add_rowwise(t, matmul(t, h, t.watch(l.weight)), t.watch(l.bias));
    if (l.relu_after) {
      h = relu(t, h);
      h = dropout(t, h, dropout_rate, rng);
    }
  }
  return h;
}

VarId head_logits_train(Tape& t, Model& m, VarId features, int head) {
  check_head_index(m, head);
  Head& h = m.heads[static_cast<size_t>(head)];
  VarId w = t.watch(h.weight);
  if (h.normalized) w = col_normalize(t, w);
  VarId logits = matmul(t, features, w);
  if (h.bias.has_value()) logits = add_rowwise(t, logits, t.watch(*h.bias));
  return logits;
}

VarId features_frozen(Tape& t, const Model& m, VarId x) {
  VarId h = x;
  for (const DenseLayer& l : m.layers) {
    h = add_rowwise(t, matmul(t, h, t.constant(l.weight.value)), t.constant(l.bias.value));
    if (l.relu_after) h = relu(t, h);
  }
  return h;
}

VarId head_logits_frozen(Tape& t, const Model& m, VarId features, int head) {
  check_head_index(m, head);
  const Head& h = m.heads[static_cast<size_t>(head)];
  VarId w = t.constant(h.weight.value);
  if (h.normalized) w = col_normalize(t, w);
  VarId logits = matmul(t, features, w);
  if (h.bias.has_value()) logits = add_rowwise(t, logits, t.constant(h.bias->value));
  return logits;
}

Mat input_gradient_ce(const Model& m, const Mat& x, int head, const std::vector<int>& labels,
                      double temperature) {
  if (!(temperature > 0.0)) throw ValueError("input_gradient_ce: temperature must be positive");
  Tensor input(x, true);
  Tape t;
  const VarId xv = t.watch(input);
  const VarId logits = head_logits_frozen(t, m, features_frozen(t, m, xv), head);
  t.backward(cross_entropy_sum(t, scale(t, logits, 1.0 / temperature), labels));
  if (!input.has_grad()) return Mat::Zero(x.rows(), x.cols());
  return input.grad;
}

// ---- checkpoint io ---------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'N', 'D', 'M', 'O', 'D', 'E', 'L'};
constexpr uint32_t kVersion = 1;

struct Writer {
  FILE* f;
  void bytes(const void* p, size_t n) {
    if (std::fwrite(p, 1, n, f) != n) throw ParseError("checkpoint: short write");
  }
  void u32(uint32_t v) { bytes(&v, 4); }
  void i32(int32_t v) { bytes(&v, 4); }
  void u8(uint8_t v) { bytes(&v, 1); }
  void mat(const Mat& m) {
    for (int i = 0; i < m.rows(); ++i)
      for (int j = 0; j < m.cols(); ++j) {
        const double d = m(i, j);
        bytes(&d, 8);
      }
  }
};

struct Reader {
  FILE* f;
  long line = 0;  // unused; ParseError carries offsets in the message instead
  void bytes(void* p, size_t n) {
    if (std::fread(p, 1, n, f) != n) throw ParseError("checkpoint: truncated file");
  }
  uint32_t u32() {
    uint32_t v;
    bytes(&v, 4);
    return v;
  }
  int32_t i32() {
    int32_t v;
    bytes(&v, 4);
    return v;
  }
  uint8_t u8() {
    uint8_t v;
    bytes(&v, 1);
    return v;
  }
  void mat(Mat& m) {
    for (int i = 0; i < m.rows(); ++i)
      for (int j = 0; j < m.cols(); ++j) {
        double d;
        bytes(&d, 8);
        m(i, j) = d;
      }
  }
};

}  // namespace

void save_checkpoint(const Model& m, int stage, const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (f == nullptr) throw ParseError("checkpoint: cannot open for writing: " + path);
  Writer w{f};
  try {
    w.bytes(kMagic, 8);
    w.u32(kVersion);
    w.u8(m.setting == Setting::MultiHead ? 0 : 1);
    w.u32(static_cast<uint32_t>(m.config.input_dim));
    w.u32(static_cast<uint32_t>(m.config.feature_dim));
    w.u32(static_cast<uint32_t>(m.layers.size()));
    for (const DenseLayer& l : m.layers) {
      w.u32(static_cast<uint32_t>(l.weight.value.rows()));
      w.u32(static_cast<uint32_t>(l.weight.value.cols()));
      w.u8(l.relu_after ? 1 : 0);
    }
    w.u32(static_cast<uint32_t>(m.heads.size()));
    for (const Head& h : m.heads) {
      w.u32(static_cast<uint32_t>(h.class_ids.size()));
      w.u8(h.normalized ? 1 : 0);
      w.u8(h.bias.has_value() ? 1 : 0);
      for (int id : h.class_ids) w.i32(id);
    }
    w.i32(stage);
    for (const DenseLayer& l : m.layers) {
      w.mat(l.weight.value);
      w.mat(l.bias.value);
    }
    for (const Head& h : m.heads) {
      w.mat(h.weight.value);
      if (h.bias.has_value()) w.mat(h.bias->value);
    }
  } catch (...) {
    std::fclose(f);
    throw;
  }
  std::fclose(f);
}

std::pair<Model, int> load_checkpoint(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (f == nullptr) throw ParseError("checkpoint: cannot open: " + path);
  Reader r{f};
  try {
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0) throw ParseError("checkpoint: bad magic");
    const uint32_t version = r.u32();
    if (version != kVersion)
      throw ParseError("checkpoint: unsupported version " + std::to_string(version));
    Model m;
    m.setting = r.u8() == 0 ? Setting::MultiHead : Setting::SharedHead;
    m.config.input_dim = static_cast<int>(r.u32());
    m.config.feature_dim = static_cast<int>(r.u32());
    const uint32_t n_layers = r.u32();
    if (n_layers == 0 || n_layers > 64) throw ParseError("checkpoint: implausible layer count");
    m.config.hidden_dims.clear();
    for (uint32_t l = 0; l < n_layers; ++l) {
      const int in = static_cast<int>(r.u32());
      const int out = static_cast<int>(r.u32());
      if (in < 1 || out < 1) throw ParseError("checkpoint: bad layer shape");
      DenseLayer layer;
      layer.weight = Tensor(Mat(in, out), true);
      layer.bias = Tensor(Mat(1, out), true);
      layer.relu_after = r.u8() != 0;
      m.layers.push_back(std::move(layer));
      if (l + 1 < n_layers) m.config.hidden_dims.push_back(out);
    }
    const uint32_t n_heads = r.u32();
    if (n_heads > 4096) throw ParseError("checkpoint: implausible head count");
    for (uint32_t h = 0; h < n_heads; ++h) {
      const uint32_t classes = r.u32();
      if (classes == 0 || classes > 1u << 20) throw ParseError("checkpoint: bad class count");
      Head head;
      head.normalized = r.u8() != 0;
      const bool has_bias = r.u8() != 0;
      head.class_ids.resize(classes);
      for (uint32_t c = 0; c < classes; ++c) head.class_ids[c] = r.i32();
      head.weight = Tensor(Mat(m.config.feature_dim, static_cast<int>(classes)), true);
      if (has_bias) head.bias = Tensor(Mat(1, static_cast<int>(classes)), true);
      m.heads.push_back(std::move(head));
    }
    const int stage = r.i32();
    for (DenseLayer& l : m.layers) {
      r.mat(l.weight.value);
      r.mat(l.bias.value);
    }
    for (Head& h : m.heads) {
      r.mat(h.weight.value);
      if (h.bias.has_value()) r.mat(h.bias->value);
    }
    // trailing bytes indicate a format mismatch
    uint8_t probe;
    if (std::fread(&probe, 1, 1, f) == 1) throw ParseError("checkpoint: trailing bytes");
    std::fclose(f);
    if (!m.heads.empty()) {
      m.config.head_bias = m.heads[0].bias.has_value();
      m.config.normalized_head = m.heads[0].normalized;
    }
    for (const DenseLayer& l : m.layers)
      if (!l.weight.value.allFinite() || !l.bias.value.allFinite())
        throw NumericError("checkpoint: non-finite parameters");
    return {std::move(m), stage};
  } catch (...) {
    std::fclose(f);
    throw;
  }
}

}  // namespace cnd
