#pragma once

#include <string>
#include <vector>

#include "cnd/error.hpp"
#include "cnd/linalg.hpp"
#include "cnd/rng.hpp"

namespace cnd {

/// SameDomain: every stage's clusters are drawn in one shared region, so
/// stages interleave spatially. DisjointDomain: each stage lives in its own
/// region, regions separated by at least 5x the intra-region center spread.
enum class Regime { SameDomain, DisjointDomain };

struct SequenceSpec {
  int num_stages = 5;
  int classes_per_stage = 4;
  int input_dim = 16;
  int train_per_class = 100;
  int val_per_class = 25;
  int test_per_class = 50;
  Regime regime = Regime::SameDomain;
  /// Typical distance between cluster centers, in units of the (unit)
  /// cluster standard deviation.
  double class_separation = 4.0;
  uint64_t seed = 1234;
  /// Held-out calibration clusters, class-disjoint from every stage and
  /// drawn from an independent stream in a region offset from the origin
  /// by ood_offset * class_separation.
  int ood_classes = 4;
  int ood_per_class = 50;
  double ood_offset = 1.5;
};

struct LabeledExample {
  Vec x;
  int label = -1;  // global class id
  int stage = -1;  // -1 for calibration examples outside the sequence
};

struct StageData {
  std::vector<LabeledExample> train, val, test;
};

struct Sequence {
  SequenceSpec spec;
  std::vector<StageData> stages;
  std::vector<LabeledExample> ood_calibration;
};

/// Global class ids owned by a stage under the canonical contiguous
/// labeling: [stage*C, (stage+1)*C).
std::vector<int> stage_class_ids(const SequenceSpec& spec, int stage);

/// Sorted distinct labels actually present in a stage's splits. Unlike the
/// spec overload this works for assembled sequences with arbitrary labels.
std::vector<int> stage_class_ids(const Sequence& seq, int stage);

/// Deterministic synthetic sequence: unit-variance isotropic Gaussian
/// clusters, one per class. Center layout depends on the regime (see
/// Regime). Per-class sample streams are derived independently from
/// spec.seed, so changing one count never shifts another class's draws.
Sequence generate_sequence(const SequenceSpec& spec);

/// Stack examples as rows / collect labels.
Mat examples_matrix(const std::vector<LabeledExample>& v);
std::vector<int> examples_labels(const std::vector<LabeledExample>& v);

/// Every test example of every stage in a stable order (stage ascending,
/// then generation order), plus the parallel stage index per row.
struct TestPool {
  std::vector<LabeledExample> examples;
  std::vector<int> stage;
};
TestPool test_pool(const Sequence& seq);

// ---- CSV interchange -------------------------------------------------------
// Schema: header "stage,y,x0,...,x{d-1}", then one row per example with
// integer stage and label followed by d floating-point features. Floats are
// written with enough digits to round-trip exactly.

void export_csv(const std::vector<LabeledExample>& examples, int input_dim,
                const std::string& path);

/// Parses the schema above. Malformed headers, rows with the wrong column
/// count, unparsable or non-finite numbers all raise ParseError with the
/// offending 1-based line number.
std::vector<LabeledExample> import_csv(const std::string& path, int& input_dim_out);

struct SplitRatios {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

/// Builds a Sequence from a flat pool: groups by stage, validates that
/// stages form a contiguous 0..T-1 range and that no class appears in two
/// stages, then splits each class by the ratios (floor for train and val,
/// remainder test) preserving pool order. The pool's stage -1 rows, if any,
/// become the ood_calibration set.
Sequence assemble_sequence(const std::vector<LabeledExample>& pool, int input_dim,
                           const SplitRatios& ratios);

}  // namespace cnd
