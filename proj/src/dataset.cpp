#include "cnd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

namespace cnd {

namespace {

// Salt layout for the per-class streams under kSeedData. Class streams are
// independent so resizing one class never shifts another class's draws.
constexpr uint64_t kCenterSalt = 0;
constexpr uint64_t kClassSaltBase = 1;
constexpr uint64_t kOodCenterSalt = 100000;
constexpr uint64_t kOodClassSaltBase = 100001;

void validate_spec(const SequenceSpec& s) {
  if (s.num_stages <= 0) throw ConfigError("num_stages must be positive");
  if (s.classes_per_stage <= 0) throw ConfigError("classes_per_stage must be positive");
  if (s.input_dim <= 0) throw ConfigError("input_dim must be positive");
  if (s.train_per_class <= 0 || s.val_per_class <= 0 || s.test_per_class <= 0)
    throw ConfigError("per-class split sizes must be positive");
  if (s.class_separation <= 0.0) throw ConfigError("class_separation must be positive");
  if (s.ood_classes < 0 || s.ood_per_class < 0)
    throw ConfigError("ood_classes and ood_per_class must be nonnegative");
  if (s.regime == Regime::DisjointDomain && s.input_dim < s.num_stages)
    throw ConfigError("DisjointDomain places each stage on its own axis; input_dim must be >= num_stages");
}

Vec draw_gaussian(Rng& rng, int d, double sd) {
  Vec v(d);
  for (int i = 0; i < d; ++i) v(i) = sd * rng.normal();
  return v;
}

// Spread of cluster centers inside one region, chosen so the expected
// center-to-center distance within the region is class_separation.
double center_sd(const SequenceSpec& s) {
  return s.class_separation / std::sqrt(2.0 * s.input_dim);
}

Vec region_center(const SequenceSpec& s, int stage) {
  Vec c = Vec::Zero(s.input_dim);
  if (s.regime == Regime::DisjointDomain) {
    // One coordinate axis per stage, spaced so regions sit 5 separations
    // apart from each other (pairwise distance sqrt(2) * D).
    const double D = 5.0 * s.class_separation / std::sqrt(2.0);
    c(stage) = D;
  }
  return c;
}

std::vector<LabeledExample> draw_class(Rng& rng, const Vec& center, int label,
                                       int stage, int count) {
  std::vector<LabeledExample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    LabeledExample e;
    e.x = center + draw_gaussian(rng, static_cast<int>(center.size()), 1.0);
    e.label = label;
    e.stage = stage;
    out.push_back(std::move(e));
  }
  return out;
}

void append(std::vector<LabeledExample>& dst, std::vector<LabeledExample>&& src) {
  dst.insert(dst.end(), std::make_move_iterator(src.begin()),
             std::make_move_iterator(src.end()));
}

long parse_long(const std::string& tok, int line) {
  const char* s = tok.c_str();
  char* end = nullptr;
  errno = 0;
  const long v = std::strtol(s, &end, 10);
  if (end == s || *end != '\0' || errno == ERANGE)
    throw ParseError("expected an integer, got '" + tok + "'", line);
  return v;
}

double parse_double(const std::string& tok, int line) {
  const char* s = tok.c_str();
  char* end = nullptr;
  const double v = std::strtod(s, &end);
  if (end == s || *end != '\0')
    throw ParseError("expected a number, got '" + tok + "'", line);
  if (!std::isfinite(v)) throw ParseError("non-finite feature value '" + tok + "'", line);
  return v;
}

std::vector<std::string> split_csv_line(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> toks;
  size_t start = 0;
  while (true) {
    const size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      toks.push_back(line.substr(start));
      break;
    }
    toks.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return toks;
}

}  // namespace

std::vector<int> stage_class_ids(const SequenceSpec& spec, int stage) {
  if (spec.classes_per_stage <= 0)
    throw ConfigError("spec has no canonical class layout");
  if (stage < 0 || stage >= spec.num_stages)
    throw IndexError("stage out of range");
  std::vector<int> ids(spec.classes_per_stage);
  for (int j = 0; j < spec.classes_per_stage; ++j)
    ids[j] = stage * spec.classes_per_stage + j;
  return ids;
}

std::vector<int> stage_class_ids(const Sequence& seq, int stage) {
  if (stage < 0 || stage >= static_cast<int>(seq.stages.size()))
    throw IndexError("stage out of range");
  std::set<int> ids;
  const StageData& st = seq.stages[stage];
  for (const auto* split : {&st.train, &st.val, &st.test})
    for (const auto& e : *split) ids.insert(e.label);
  return std::vector<int>(ids.begin(), ids.end());
}

Sequence generate_sequence(const SequenceSpec& spec) {
  validate_spec(spec);
  Sequence seq;
  seq.spec = spec;
  const double sd = center_sd(spec);

  // All cluster centers come from one stream, drawn in global class order,
  // so the layout is a function of the seed and the stage geometry alone.
  Rng centers(derive_seed(spec.seed, SeedTag::kSeedData, kCenterSalt));
  std::vector<Vec> class_center;
  for (int t = 0; t < spec.num_stages; ++t) {
    const Vec region = region_center(spec, t);
    for (int j = 0; j < spec.classes_per_stage; ++j)
      class_center.push_back(region + draw_gaussian(centers, spec.input_dim, sd));
  }

  seq.stages.resize(spec.num_stages);
  for (int t = 0; t < spec.num_stages; ++t) {
    StageData& st = seq.stages[t];
    for (int label : stage_class_ids(spec, t)) {
      Rng rng(derive_seed(spec.seed, SeedTag::kSeedData, kClassSaltBase + label));
      const Vec& c = class_center[label];
      append(st.train, draw_class(rng, c, label, t, spec.train_per_class));
      append(st.val, draw_class(rng, c, label, t, spec.val_per_class));
      append(st.test, draw_class(rng, c, label, t, spec.test_per_class));
    }
  }

  if (spec.ood_classes > 0 && spec.ood_per_class > 0) {
    const Vec ood_region = Vec::Constant(
        spec.input_dim,
        spec.ood_offset * spec.class_separation / std::sqrt(spec.input_dim));
    Rng ood_centers(derive_seed(spec.seed, SeedTag::kSeedData, kOodCenterSalt));
    const int first_id = spec.num_stages * spec.classes_per_stage;
    for (int j = 0; j < spec.ood_classes; ++j) {
      const Vec c = ood_region + draw_gaussian(ood_centers, spec.input_dim, sd);
      Rng rng(derive_seed(spec.seed, SeedTag::kSeedData, kOodClassSaltBase + j));
      append(seq.ood_calibration, draw_class(rng, c, first_id + j, -1, spec.ood_per_class));
    }
  }
  return seq;
}

Mat examples_matrix(const std::vector<LabeledExample>& v) {
  if (v.empty()) return Mat(0, 0);
  Mat m(static_cast<int>(v.size()), v.front().x.size());
  for (size_t i = 0; i < v.size(); ++i) {
    if (v[i].x.size() != m.cols()) throw DimensionError("examples have mixed dimensions");
    m.row(i) = v[i].x.transpose();
  }
  return m;
}

std::vector<int> examples_labels(const std::vector<LabeledExample>& v) {
  std::vector<int> y(v.size());
  for (size_t i = 0; i < v.size(); ++i) y[i] = v[i].label;
  return y;
}

TestPool test_pool(const Sequence& seq) {
  TestPool pool;
  for (const auto& st : seq.stages)
    for (const auto& e : st.test) {
      pool.examples.push_back(e);
      pool.stage.push_back(e.stage);
    }
  return pool;
}

void export_csv(const std::vector<LabeledExample>& examples, int input_dim,
                const std::string& path) {
  if (input_dim <= 0) throw ConfigError("input_dim must be positive");
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw Error("cannot open '" + path + "' for writing");
  std::fputs("stage,y", f);
  for (int i = 0; i < input_dim; ++i) std::fprintf(f, ",x%d", i);
  std::fputc('\n', f);
  for (const auto& e : examples) {
    if (e.x.size() != input_dim) {
      std::fclose(f);
      throw DimensionError("example dimension does not match input_dim");
    }
    std::fprintf(f, "%d,%d", e.stage, e.label);
    for (int i = 0; i < input_dim; ++i) std::fprintf(f, ",%.17g", e.x(i));
    std::fputc('\n', f);
  }
  std::fclose(f);
}

std::vector<LabeledExample> import_csv(const std::string& path, int& input_dim_out) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(f, line)) throw ParseError("empty file", 1);

  const auto header = split_csv_line(line);
  if (header.size() < 3 || header[0] != "stage" || header[1] != "y")
    throw ParseError("header must be stage,y,x0,...", 1);
  const int dim = static_cast<int>(header.size()) - 2;
  for (int i = 0; i < dim; ++i)
    if (header[i + 2] != "x" + std::to_string(i))
      throw ParseError("header must be stage,y,x0,...", 1);

  std::vector<LabeledExample> out;
  int line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto toks = split_csv_line(line);
    if (static_cast<int>(toks.size()) != dim + 2)
      throw ParseError("expected " + std::to_string(dim + 2) + " columns, got " +
                           std::to_string(toks.size()), line_no);
    LabeledExample e;
    const long stage = parse_long(toks[0], line_no);
    if (stage < -1) throw ParseError("stage must be >= -1", line_no);
    e.stage = static_cast<int>(stage);
    const long label = parse_long(toks[1], line_no);
    if (label < 0) throw ParseError("class id must be nonnegative", line_no);
    e.label = static_cast<int>(label);
    e.x = Vec(dim);
    for (int i = 0; i < dim; ++i) e.x(i) = parse_double(toks[i + 2], line_no);
    out.push_back(std::move(e));
  }
  input_dim_out = dim;
  return out;
}

Sequence assemble_sequence(const std::vector<LabeledExample>& pool, int input_dim,
                           const SplitRatios& ratios) {
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0)
    throw ConfigError("split ratios must be nonnegative");
  if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
    throw ConfigError("split ratios must sum to 1");

  int max_stage = -1;
  std::map<int, int> class_stage;
  for (const auto& e : pool) {
    if (e.x.size() != input_dim)
      throw DimensionError("pool example dimension does not match input_dim");
    if (e.stage < 0) continue;
    max_stage = std::max(max_stage, e.stage);
    const auto [it, inserted] = class_stage.emplace(e.label, e.stage);
    if (!inserted && it->second != e.stage)
      throw ConfigError("class " + std::to_string(e.label) + " appears in two stages");
  }
  if (max_stage < 0) throw ConfigError("pool has no staged examples");

  Sequence seq;
  seq.spec.num_stages = max_stage + 1;
  seq.spec.classes_per_stage = 0;  // labels come from the data, not a layout
  seq.spec.input_dim = input_dim;
  seq.spec.train_per_class = seq.spec.val_per_class = seq.spec.test_per_class = 0;
  seq.stages.resize(max_stage + 1);

  // Group rows per (stage, class), preserving pool order within a class.
  std::vector<std::map<int, std::vector<LabeledExample>>> grouped(max_stage + 1);
  for (const auto& e : pool) {
    if (e.stage < 0)
      seq.ood_calibration.push_back(e);
    else
      grouped[e.stage][e.label].push_back(e);
  }
  for (int t = 0; t <= max_stage; ++t)
    if (grouped[t].empty())
      throw ConfigError("stage " + std::to_string(t) + " has no examples");

  for (int t = 0; t <= max_stage; ++t) {
    StageData& st = seq.stages[t];
    for (const auto& [label, rows] : grouped[t]) {
      const size_t n = rows.size();
      const size_t n_train = static_cast<size_t>(std::floor(n * ratios.train));
      const size_t n_val = static_cast<size_t>(std::floor(n * ratios.val));
      for (size_t i = 0; i < n; ++i) {
        if (i < n_train)
          st.train.push_back(rows[i]);
        else if (i < n_train + n_val)
          st.val.push_back(rows[i]);
        else
          st.test.push_back(rows[i]);
      }
    }
  }
  return seq;
}

}  // namespace cnd
