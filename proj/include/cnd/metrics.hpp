#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cnd/error.hpp"
#include "cnd/linalg.hpp"

namespace cnd {

// ---- threshold-free separability metrics -------------------------------
// Scores follow the "higher = more familiar" convention: `pos` holds the
// familiar side (In), `neg` the novel side (Out). All three throw
// ValueError when either side is empty; callers that need a soft failure
// wrap them (see stage_metrics).

/// Pairwise AUC with half credit for ties:
///   (#{pos > neg} + 0.5 * #{pos == neg}) / (|pos| * |neg|).
/// Implemented via midranks; integer arithmetic keeps it bit-equal to the
/// brute-force pairwise definition.
double auc(const std::vector<double>& pos, const std::vector<double>& neg);

/// Area under precision-recall with `pos` as the positive class.
/// Thresholds descend over distinct scores, ties enter as one group, and
/// area accumulates as precision-weighted recall increments.
double aupr_in(const std::vector<double>& pos, const std::vector<double>& neg);

/// Detection error with equal priors:
///   min_tau 0.5 * P(pos <= tau) + 0.5 * P(neg > tau),
/// tau ranging over distinct observed scores and +-infinity.
double der(const std::vector<double>& pos, const std::vector<double>& neg);

// ---- correctness history and test partitions ---------------------------

enum class Seen : int8_t { NotSeen = -1, Wrong = 0, Correct = 1 };

/// Per-stage correctness of every test sample, filled in as the model
/// finishes each stage. Entry (t, i) is defined only when sample i's stage
/// is <= t; reading an undefined entry is legal and returns NotSeen.
class CorrectnessHistory {
 public:
  CorrectnessHistory(int num_stages, size_t num_samples);

  void record(int stage, size_t sample, bool correct);
  Seen at(int stage, size_t sample) const;

  int stages() const { return num_stages_; }
  size_t samples() const { return num_samples_; }

 private:
  size_t index(int stage, size_t sample) const;
  int num_stages_ = 0;
  size_t num_samples_ = 0;
  std::vector<int8_t> cells_;
};

/// Index sets over test samples after stage t. residual holds evaluated
/// samples that the defining rules leave out: currently-wrong samples that
/// were also wrong (or current-stage) at their own stage.
struct Partition {
  std::vector<size_t> in_ids, forg_ids, out_ids, residual_ids;
};

/// Builds the partition after stage t (0-based).
///  - in: stage(i) <= t and correct at t
///  - forg: stage(i) < t, wrong at t, correct at its own stage
///  - out: stage(i) > t
///  - residual: the remaining evaluated samples
/// Throws StateError if any required history cell is unrecorded, and
/// guarantees the four sets are disjoint and cover all samples.
Partition partition_sets(const CorrectnessHistory& h, const std::vector<int>& sample_stage,
                         int t);

// ---- per-stage metric assembly ------------------------------------------

/// Scores for one (stage, scorer) evaluation. in_stage runs parallel to
/// in_scores and carries each In sample's own stage, so current vs past
/// slices can be cut without re-partitioning.
struct ScoredPartition {
  std::vector<double> in_scores;
  std::vector<int> in_stage;
  std::vector<double> forg_scores;
  std::vector<double> out_scores;
};

/// One row of the per-stage report. Missing optionals mean the metric was
/// undefined at this stage (an empty side), not a failure.
struct MetricRow {
  int stage = 0;  // 0-based evaluation stage
  std::string scorer;
  std::optional<double> c_auc, r_auc, p_auc;
  std::optional<double> in_out_aupr, in_out_der;
  std::optional<double> in_forg_auc, in_forg_aupr, in_forg_der;
  std::optional<double> forg_out_auc, forg_out_aupr, forg_out_der;
  size_t n_in = 0, n_forg = 0, n_out = 0, n_residual = 0;
};

/// Computes every defined metric for one stage.
///  - c_auc: all In vs Out; r_auc: In from stage t only; p_auc: In from
///    stages < t only.
///  - in_forg_*: In vs Forg (In positive); forg_out_*: Forg vs Out
///    (Forg positive).
MetricRow stage_metrics(const ScoredPartition& sp, int t, const std::string& scorer,
                        size_t n_residual = 0);

/// Means over evaluation stages for one scorer, skipping undefined entries.
struct SummaryRow {
  std::string scorer;
  std::optional<double> m_c_auc, m_r_auc, m_p_auc;
  std::optional<double> m_in_forg_der, m_forg_out_der;
};

SummaryRow summarize_rows(const std::vector<MetricRow>& rows);

// ---- continual-learning accuracy summary --------------------------------

/// acc[t][k] = accuracy on stage k's test split measured after stage t
/// (defined for k <= t). avg_accuracy is the mean over k of acc[T-1][k];
/// forgetting[k] = max_{t in [k, T-2]} acc[t][k] - acc[T-1][k] for k < T-1,
/// and avg_forgetting their mean (undefined when T == 1).
struct AccuracySummary {
  double avg_accuracy = 0.0;
  std::optional<double> avg_forgetting;
  std::vector<double> final_acc;
  std::vector<double> forgetting;
};

AccuracySummary accuracy_summary(const std::vector<std::vector<double>>& acc);

// ---- feature statistics ---------------------------------------------------

/// Scalar summaries of a feature matrix (rows = samples): mean L2 norm,
/// grand mean and grand standard deviation over all entries (population).
struct FeatureStats {
  size_t n = 0;
  double norm_mean = 0.0;
  double feat_mean = 0.0;
  double feat_std = 0.0;
};

FeatureStats feature_stats(const Mat& rows);

}  // namespace cnd
