#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cnd/config.hpp"
#include "cnd/metrics.hpp"
#include "cnd/trainer.hpp"

namespace cnd {

/// Feature-geometry summary of one sample group at one evaluation stage.
/// Groups: "in_current" (In from stage t), "in_previous" (In from earlier
/// stages), "in_first" (In from stage 0), "forg", "out".
struct FeatureRow {
  int stage = 0;
  std::string group;
  FeatureStats stats;
};

/// How well a freshly calibrated scorer separates its calibration inputs:
/// AUC of the available in-distribution training data against the held-out
/// ood set, scored with the same head rules as the real evaluation. This is
/// the ranking key for scorer-side sweeps.
struct CalibrationRow {
  int stage = 0;
  std::string scorer;
  double auc = 0.0;
};

/// Everything one seed produced. A failed seed keeps only its identity and
/// the error text; its result vectors are empty and it is skipped by the
/// aggregation.
struct SeedRun {
  int seed_index = 0;
  uint64_t run_seed = 0;
  bool failed = false;
  std::string error;
  std::vector<StageReport> stage_reports;
  /// accuracy[t][k] = accuracy on stage k's test split after stage t (k <= t).
  std::vector<std::vector<double>> accuracy;
  AccuracySummary acc_summary;
  std::vector<MetricRow> metrics;        // one row per (evaluation stage, scorer)
  std::vector<SummaryRow> summaries;     // per scorer, means over stages
  std::vector<FeatureRow> feature_rows;
  std::vector<CalibrationRow> calibration;
};

/// Across-seed mean and population std of the per-seed stage means, one row
/// per scorer. n_seeds counts the seeds that produced the row's scorer.
struct AggregateRow {
  std::string scorer;
  int n_seeds = 0;
  std::optional<double> mean_c_auc, std_c_auc;
  std::optional<double> mean_r_auc, std_r_auc;
  std::optional<double> mean_p_auc, std_p_auc;
  std::optional<double> mean_in_forg_der, std_in_forg_der;
  std::optional<double> mean_forg_out_der, std_forg_out_der;
};

struct AccuracyAggregate {
  int n_seeds = 0;
  std::optional<double> mean_avg_accuracy, std_avg_accuracy;
  std::optional<double> mean_avg_forgetting, std_avg_forgetting;
};

struct RunRecord {
  ExperimentConfig config;
  uint64_t config_hash = 0;
  std::vector<SeedRun> seed_runs;  // sorted by seed_index, possibly sparse
  std::vector<AggregateRow> aggregate;
  AccuracyAggregate acc_aggregate;
};

/// Runs one seed end to end: generate data, loop over stages (train,
/// snapshot, record correctness, calibrate scorers, score the partition,
/// metrics, feature stats), then summarize. Deterministic in
/// (config, seed_index); any error is captured into failed/error.
SeedRun run_single_seed(const ExperimentConfig& cfg, int seed_index);

/// Recomputes record.aggregate and record.acc_aggregate from the non-failed
/// seed runs.
void compute_aggregates(RunRecord& record);

/// Runs all configured seeds, up to `jobs` in parallel (each seed is
/// single-threaded). Writes cfg.output_dir/record.json after every completed
/// seed, so a crash can resume. If a record.json already exists there:
/// matching config hash adopts its completed seeds and runs only the
/// missing ones; a different hash is a ConfigError (never silently clobber
/// another experiment's results).
RunRecord run_experiment(const ExperimentConfig& cfg, int jobs = 1);

// ---- record persistence ----------------------------------------------------

std::string record_to_json(const RunRecord& record);
RunRecord record_from_json(const std::string& text);
void save_record(const RunRecord& record, const std::string& path);
RunRecord load_record(const std::string& path);

// ---- report emission ---------------------------------------------------------

/// Writes the CSV tables and SVG trajectory plots for a record into out_dir
/// (creating it). Identical records produce byte-identical files; failed
/// seeds appear only in failures.csv. File list and column orders are
/// documented in the README.
void write_report(const RunRecord& record, const std::string& out_dir);

// ---- sweeps -----------------------------------------------------------------

struct SweepPoint {
  ExperimentConfig config;
  std::string label;  // "trainer.lr=0.01;trainer.mas_lambda=1"
};

struct SweepSpec {
  std::vector<SweepPoint> points;
  /// Leaderboard key: "avg_accuracy" (across-seed mean CL accuracy) or
  /// "calibration_auc" (grand mean calibration AUC over stages and scorers).
  std::string rank_by = "avg_accuracy";
  std::string output_dir;
};

/// Parses {"base": <config>, "grid": {"dotted.key": [values...]}, "rank_by":
/// ...}. Grid keys use dots to address nested config fields; the cartesian
/// product is expanded in sorted-key order with values in listed order.
/// Every point is validated up front.
SweepSpec parse_sweep_text(const std::string& text);
SweepSpec load_sweep(const std::string& path);

/// Runs every point (seeds parallel up to `jobs` within a point), writing
/// each point's record and report under output_dir/grid_NNN, then emits
/// output_dir/leaderboard.csv sorted descending by the rank key.
std::vector<RunRecord> run_sweep(const SweepSpec& spec, int jobs = 1);

}  // namespace cnd
