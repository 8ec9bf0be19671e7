#include "cnd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cnd {

namespace {

void require_nonempty(const std::vector<double>& pos, const std::vector<double>& neg,
                      const char* who) {
  if (pos.empty() || neg.empty())
    throw ValueError(std::string(who) + ": both score sets must be non-empty");
}

// merged scores tagged with membership, sorted by score
struct Tagged {
  double score;
  bool positive;
};

std::vector<Tagged> merge_sorted(const std::vector<double>& pos, const std::vector<double>& neg,
                                 bool descending) {
  std::vector<Tagged> all;
  all.reserve(pos.size() + neg.size());
  for (double s : pos) all.push_back({s, true});
  for (double s : neg) all.push_back({s, false});
  if (descending)
    std::sort(all.begin(), all.end(), [](const Tagged& a, const Tagged& b) {
      return a.score > b.score;
    });
  else
    std::sort(all.begin(), all.end(), [](const Tagged& a, const Tagged& b) {
      return a.score < b.score;
    });
  return all;
}

std::optional<double> guarded_auc(const std::vector<double>& pos,
                                  const std::vector<double>& neg) {
  if (pos.empty() || neg.empty()) return std::nullopt;
  return auc(pos, neg);
}

std::optional<double> guarded_aupr(const std::vector<double>& pos,
                                   const std::vector<double>& neg) {
  if (pos.empty() || neg.empty()) return std::nullopt;
  return aupr_in(pos, neg);
}

std::optional<double> guarded_der(const std::vector<double>& pos,
                                  const std::vector<double>& neg) {
  if (pos.empty() || neg.empty()) return std::nullopt;
  return der(pos, neg);
}

std::optional<double> mean_defined(const std::vector<std::optional<double>>& v) {
  double sum = 0.0;
  size_t n = 0;
  for (const auto& x : v)
    if (x.has_value()) {
      sum += *x;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

}  // namespace

double auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  require_nonempty(pos, neg, "auc");
  // midrank formulation, all-integer numerator:
  //   2U = 2 * sum of positive midranks - n1*(n1+1) = 2*wins + ties
  const auto all = merge_sorted(pos, neg, /*descending=*/false);
  const size_t n = all.size();
  long long pos_rank2 = 0;  // twice the summed midranks of positives
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && all[j].score == all[i].score) ++j;
    // 1-based ranks i+1 .. j share midrank (i+1+j)/2; store twice that
    const long long rank2 = static_cast<long long>(i + 1 + j);
    for (size_t k = i; k < j; ++k)
      if (all[k].positive) pos_rank2 += rank2;
    i = j;
  }
  const long long n1 = static_cast<long long>(pos.size());
  const long long u2 = pos_rank2 - n1 * (n1 + 1);
  return static_cast<double>(u2) /
         (2.0 * static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

double aupr_in(const std::vector<double>& pos, const std::vector<double>& neg) {
  require_nonempty(pos, neg, "aupr_in");
  const auto all = merge_sorted(pos, neg, /*descending=*/true);
  const size_t n = all.size();
  long tp = 0, fp = 0;
  double area = 0.0;
  double prev_recall = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && all[j].score == all[i].score) ++j;
    for (size_t k = i; k < j; ++k)
      (all[k].positive ? tp : fp) += 1;
    const double recall = static_cast<double>(tp) / static_cast<double>(pos.size());
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return area;
}

double der(const std::vector<double>& pos, const std::vector<double>& neg) {
  require_nonempty(pos, neg, "der");
  const auto all = merge_sorted(pos, neg, /*descending=*/false);
  const size_t n = all.size();
  // tau = -inf (nothing below) and tau = +inf (nothing above) both give 0.5
  double best = 0.5;
  long in_below = 0, out_below = 0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && all[j].score == all[i].score) ++j;
    for (size_t k = i; k < j; ++k)
      (all[k].positive ? in_below : out_below) += 1;
    const long out_above = static_cast<long>(neg.size()) - out_below;
    const double err = 0.5 * static_cast<double>(in_below) / static_cast<double>(pos.size()) +
                       0.5 * static_cast<double>(out_above) / static_cast<double>(neg.size());
    best = std::min(best, err);
    i = j;
  }
  return best;
}

// ---- correctness history ---------------------------------------------------

CorrectnessHistory::CorrectnessHistory(int num_stages, size_t num_samples)
    : num_stages_(num_stages), num_samples_(num_samples) {
  if (num_stages < 1) throw ValueError("history: need at least one stage");
  cells_.assign(static_cast<size_t>(num_stages) * num_samples, -1);
}

size_t CorrectnessHistory::index(int stage, size_t sample) const {
  if (stage < 0 || stage >= num_stages_) throw IndexError("history: stage out of range");
  if (sample >= num_samples_) throw IndexError("history: sample out of range");
  return static_cast<size_t>(stage) * num_samples_ + sample;
}

void CorrectnessHistory::record(int stage, size_t sample, bool correct) {
  cells_[index(stage, sample)] = correct ? 1 : 0;
}

Seen CorrectnessHistory::at(int stage, size_t sample) const {
  return static_cast<Seen>(cells_[index(stage, sample)]);
}

Partition partition_sets(const CorrectnessHistory& h, const std::vector<int>& sample_stage,
                         int t) {
  if (sample_stage.size() != h.samples())
    throw DimensionError("partition: stage list does not match history width");
  if (t < 0 || t >= h.stages()) throw IndexError("partition: stage out of range");
  Partition p;
  for (size_t i = 0; i < sample_stage.size(); ++i) {
    const int k = sample_stage[i];
    if (k < 0 || k >= h.stages()) throw IndexError("partition: sample stage out of range");
    if (k > t) {
      p.out_ids.push_back(i);
      continue;
    }
    const Seen now = h.at(t, i);
    if (now == Seen::NotSeen)
      throw StateError("partition: sample " + std::to_string(i) + " unrecorded at stage " +
                       std::to_string(t));
    if (now == Seen::Correct) {
      p.in_ids.push_back(i);
      continue;
    }
    if (k < t) {
      const Seen own = h.at(k, i);
      if (own == Seen::NotSeen)
        throw StateError("partition: sample " + std::to_string(i) + " unrecorded at own stage " +
                         std::to_string(k));
      if (own == Seen::Correct) {
        p.forg_ids.push_back(i);
        continue;
      }
    }
    p.residual_ids.push_back(i);
  }
  return p;
}

MetricRow stage_metrics(const ScoredPartition& sp, int t, const std::string& scorer,
                        size_t n_residual) {
  if (sp.in_scores.size() != sp.in_stage.size())
    throw DimensionError("stage_metrics: in_scores and in_stage lengths differ");
  MetricRow row;
  row.stage = t;
  row.scorer = scorer;
  row.n_in = sp.in_scores.size();
  row.n_forg = sp.forg_scores.size();
  row.n_out = sp.out_scores.size();
  row.n_residual = n_residual;

  std::vector<double> current, past;
  for (size_t i = 0; i < sp.in_scores.size(); ++i)
    (sp.in_stage[i] == t ? current : past).push_back(sp.in_scores[i]);

  row.c_auc = guarded_auc(sp.in_scores, sp.out_scores);
  row.r_auc = guarded_auc(current, sp.out_scores);
  row.p_auc = guarded_auc(past, sp.out_scores);
  row.in_out_aupr = guarded_aupr(sp.in_scores, sp.out_scores);
  row.in_out_der = guarded_der(sp.in_scores, sp.out_scores);
  row.in_forg_auc = guarded_auc(sp.in_scores, sp.forg_scores);
  row.in_forg_aupr = guarded_aupr(sp.in_scores, sp.forg_scores);
  row.in_forg_der = guarded_der(sp.in_scores, sp.forg_scores);
  row.forg_out_auc = guarded_auc(sp.forg_scores, sp.out_scores);
  row.forg_out_aupr = guarded_aupr(sp.forg_scores, sp.out_scores);
  row.forg_out_der = guarded_der(sp.forg_scores, sp.out_scores);
  return row;
}

SummaryRow summarize_rows(const std::vector<MetricRow>& rows) {
  SummaryRow s;
  if (!rows.empty()) s.scorer = rows.front().scorer;
  std::vector<std::optional<double>> c, r, p, ifd, fod;
  for (const auto& row : rows) {
    c.push_back(row.c_auc);
    r.push_back(row.r_auc);
    p.push_back(row.p_auc);
    ifd.push_back(row.in_forg_der);
    fod.push_back(row.forg_out_der);
  }
  s.m_c_auc = mean_defined(c);
  s.m_r_auc = mean_defined(r);
  s.m_p_auc = mean_defined(p);
  s.m_in_forg_der = mean_defined(ifd);
  s.m_forg_out_der = mean_defined(fod);
  return s;
}

AccuracySummary accuracy_summary(const std::vector<std::vector<double>>& acc) {
  const size_t T = acc.size();
  if (T == 0) throw ValueError("accuracy_summary: no stages");
  for (size_t t = 0; t < T; ++t)
    if (acc[t].size() != t + 1)
      throw DimensionError("accuracy_summary: row " + std::to_string(t) + " must have " +
                           std::to_string(t + 1) + " entries");
  AccuracySummary s;
  s.final_acc = acc[T - 1];
  double sum = 0.0;
  for (double a : s.final_acc) sum += a;
  s.avg_accuracy = sum / static_cast<double>(T);
  if (T > 1) {
    double fsum = 0.0;
    for (size_t k = 0; k + 1 < T; ++k) {
      double peak = -std::numeric_limits<double>::infinity();
      for (size_t t = k; t + 1 < T; ++t) peak = std::max(peak, acc[t][k]);
      const double f = peak - acc[T - 1][k];
      s.forgetting.push_back(f);
      fsum += f;
    }
    s.avg_forgetting = fsum / static_cast<double>(T - 1);
  }
  return s;
}

FeatureStats feature_stats(const Mat& rows) {
  FeatureStats fs;
  fs.n = static_cast<size_t>(rows.rows());
  if (fs.n == 0 || rows.cols() == 0) return fs;
  fs.norm_mean = rows.rowwise().norm().mean();
  fs.feat_mean = rows.mean();
  fs.feat_std = std::sqrt((rows.array() - fs.feat_mean).square().mean());
  return fs;
}

}  // namespace cnd
