// End-to-end acceptance gate. Runs twelve checks, prints one verdict line
// per check with the measured numbers, and exits nonzero if any fail.
// Thresholds are pinned here on purpose; loosening them is a code change,
// not a rerun.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cnd/harness.hpp"
#include "cnd/scorer.hpp"
#include "support/oracles.hpp"

using namespace cnd;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = false;
  std::string text;
};

Mat random_mat(Rng& rng, int r, int c, double scale = 1.0) {
  Mat m(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) m(i, j) = scale * rng.normal();
  return m;
}

double logsumexp(const Eigen::RowVectorXd& row) {
  const double m = row.maxCoeff();
  return m + std::log((row.array() - m).exp().sum());
}

// Tape gradient vs central differences of the same forward graph. The graph
// builder must be pure so the two evaluations see identical functions.
bool fd_check(const Mat& x0, const std::function<VarId(Tape&, VarId)>& graph) {
  Tensor x(x0, true);
  Tape t;
  t.backward(graph(t, t.watch(x)));
  const auto obj = [&](const Mat& v) {
    Tape ft;
    return ft.value(graph(ft, ft.constant(v)))(0, 0);
  };
  return oracle::grad_close(x.grad, oracle::finite_difference(obj, x0), 1e-4);
}

std::string out_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "cnd_acceptance" / name;
  fs::remove_all(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// across-seed slots (index = seed) of one per-stage metric field
std::vector<std::optional<double>> per_seed_metric(const RunRecord& rec,
                                                   const std::string& scorer, int stage,
                                                   std::optional<double> MetricRow::*field) {
  std::vector<std::optional<double>> v(static_cast<size_t>(rec.config.seeds));
  for (const SeedRun& sr : rec.seed_runs) {
    if (sr.failed) continue;
    for (const MetricRow& row : sr.metrics)
      if (row.stage == stage && row.scorer == scorer)
        v[static_cast<size_t>(sr.seed_index)] = row.*field;
  }
  return v;
}

std::optional<double> mean_defined(const std::vector<std::optional<double>>& v) {
  double sum = 0.0;
  int n = 0;
  for (const auto& x : v)
    if (x) {
      sum += *x;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / n;
}

std::string f3(std::optional<double> v) {
  if (!v) return "undefined";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", *v);
  return buf;
}

}  // namespace

// ---- criterion bodies -------------------------------------------------------

static Verdict metric_oracles() {
  const auto t0 = Clock::now();
  Rng rng(3001);
  int bad = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const size_t n1 = 1 + rng.uniform_int(200);
    const size_t n2 = 1 + rng.uniform_int(200);
    std::vector<double> in, out;
    if (rep % 4 != 3) {
      in = oracle::lattice_scores(rng, n1, 7 + static_cast<int>(rng.uniform_int(20)));
      out = oracle::lattice_scores(rng, n2, 7 + static_cast<int>(rng.uniform_int(20)));
    } else {
      in.resize(n1);
      out.resize(n2);
      for (auto& s : in) s = rng.uniform();
      for (auto& s : out) s = rng.uniform();
      // duplicate a few entries across the two sets so ties still occur
      for (size_t i = 0; i < std::min(n1, n2); i += 3) out[i] = in[i];
    }
    if (auc(in, out) != oracle::auc_pairwise(in, out)) ++bad;
    if (aupr_in(in, out) != oracle::aupr_rescan(in, out)) ++bad;
    if (der(in, out) != oracle::der_rescan(in, out)) ++bad;
  }
  const double dt = since(t0);
  char text[160];
  std::snprintf(text, sizeof text,
                "auc/aupr/der equal brute-force rescan on 1000 tied sets, %d mismatches (%.2fs)",
                bad, dt);
  return {bad == 0 && dt < 10.0, text};
}

static Verdict gradient_checks() {
  const auto t0 = Clock::now();
  int bad = 0;
  for (int c = 0; c < 50; ++c) {
    Rng rng(5000 + static_cast<uint64_t>(c));

    // inputs conditioned per op: relu needs slack at the kink, the
    // normalizers need nonvanishing norms
    Mat safe = random_mat(rng, 3, 4);
    for (int j = 0; j < safe.cols(); ++j)
      for (int i = 0; i < safe.rows(); ++i)
        if (std::abs(safe(i, j)) < 0.1) safe(i, j) += std::copysign(0.2, safe(i, j) + 0.01);
    Mat rowsafe = random_mat(rng, 3, 4);
    for (int i = 0; i < rowsafe.rows(); ++i)
      if (rowsafe.row(i).norm() < 0.5) rowsafe(i, 0) += 1.0;
    Mat colsafe = random_mat(rng, 4, 3);
    for (int j = 0; j < colsafe.cols(); ++j)
      if (colsafe.col(j).norm() < 0.5) colsafe(0, j) += 1.0;

    const Mat A = random_mat(rng, 3, 4), B = random_mat(rng, 4, 2);
    const Mat M34 = random_mat(rng, 3, 4), M43 = random_mat(rng, 4, 3);
    const Mat bias14 = random_mat(rng, 1, 4);
    const Mat anchor = random_mat(rng, 3, 4);
    const Mat weights = random_mat(rng, 3, 4).cwiseAbs();
    Mat target = random_mat(rng, 3, 4).array().exp();
    for (int i = 0; i < target.rows(); ++i) target.row(i) /= target.row(i).sum();
    const std::vector<int> labels = {static_cast<int>(rng.uniform_int(4)),
                                     static_cast<int>(rng.uniform_int(4)),
                                     static_cast<int>(rng.uniform_int(4))};
    const uint64_t mask_seed = 900 + static_cast<uint64_t>(c);

    const std::vector<std::pair<Mat, std::function<VarId(Tape&, VarId)>>> cases = {
        {A, [&](Tape& t, VarId x) { return sum_squares(t, matmul(t, x, t.constant(B))); }},
        {B, [&](Tape& t, VarId x) { return sum_squares(t, matmul(t, t.constant(A), x)); }},
        {A, [&](Tape& t, VarId x) { return sum_squares(t, add(t, x, t.constant(M34))); }},
        {A, [&](Tape& t, VarId x) { return sum_squares(t, sub(t, x, t.constant(M34))); }},
        {A,
         [&](Tape& t, VarId x) {
           return sum_squares(t, add_rowwise(t, x, t.constant(bias14)));
         }},
        {random_mat(rng, 1, 4),
         [&](Tape& t, VarId x) { return sum_squares(t, add_rowwise(t, t.constant(A), x)); }},
        {A, [&](Tape& t, VarId x) { return sum_all(t, cmul(t, scale(t, x, -1.7), M34)); }},
        {safe, [&](Tape& t, VarId x) { return sum_squares(t, relu(t, x)); }},
        {A * 0.5, [&](Tape& t, VarId x) { return sum_all(t, exp_elem(t, x)); }},
        {A, [&](Tape& t, VarId x) { return sum_all(t, square_elem(t, x)); }},
        {rowsafe, [&](Tape& t, VarId x) { return sum_all(t, cmul(t, row_normalize(t, x), M34)); }},
        {colsafe, [&](Tape& t, VarId x) { return sum_all(t, cmul(t, col_normalize(t, x), M43)); }},
        {A, [&](Tape& t, VarId x) { return sum_all(t, cmul(t, softmax_rows(t, x), M34)); }},
        {A, [&](Tape& t, VarId x) { return sum_all(t, cmul(t, softmax_rows(t, x, 3.7), M34)); }},
        {A, [&](Tape& t, VarId x) { return cross_entropy_sum(t, x, labels); }},
        {A, [&](Tape& t, VarId x) { return soft_cross_entropy_sum(t, x, target, 2.5); }},
        {A, [&](Tape& t, VarId x) { return sum_all(t, x); }},
        {A, [&](Tape& t, VarId x) { return weighted_sq_diff(t, x, anchor, weights); }},
        {random_mat(rng, 3, 5),
         [&](Tape& t, VarId x) { return sum_squares(t, slice_cols(t, x, 1, 3)); }},
        {M43,
         [&](Tape& t, VarId x) {
           return sum_squares(t, gather_rows(t, x, {0, 2, 2, 3}));
         }},
        {A,
         [&](Tape& t, VarId x) {
           Rng mask_rng(mask_seed);
           return sum_squares(t, dropout(t, x, 0.3, mask_rng));
         }},
    };
    for (const auto& [x0, graph] : cases)
      if (!fd_check(x0, graph)) ++bad;

    // input gradient of the temperature-scaled cross entropy through a
    // real model, against differences of a plain-eval objective
    ModelConfig mc;
    mc.input_dim = 5;
    mc.hidden_dims = {6};
    mc.feature_dim = 4;
    Model m = make_model(mc, Setting::MultiHead, 4200 + static_cast<uint64_t>(c));
    add_stage_head(m, {0, 1, 2}, 4300 + static_cast<uint64_t>(c));
    const Mat x0 = random_mat(rng, 2, 5);
    const std::vector<int> ylab = {static_cast<int>(rng.uniform_int(3)),
                                   static_cast<int>(rng.uniform_int(3))};
    for (double temp : {1.0, 10.0}) {
      const auto obj = [&](const Mat& v) {
        const Mat logits = head_logits_eval(m, features_eval(m, v), 0) / temp;
        double total = 0.0;
        for (int i = 0; i < logits.rows(); ++i)
          total += logsumexp(logits.row(i)) - logits(i, ylab[static_cast<size_t>(i)]);
        return total;
      };
      const Mat got = input_gradient_ce(m, x0, 0, ylab, temp);
      if (!oracle::grad_close(got, oracle::finite_difference(obj, x0), 1e-4)) ++bad;
    }
  }
  const double dt = since(t0);
  char text[160];
  std::snprintf(text, sizeof text,
                "autodiff and input gradients vs central differences, 50 cases x 23 graphs, "
                "%d mismatches (%.2fs)",
                bad, dt);
  return {bad == 0 && dt < 30.0, text};
}

static Verdict reductions() {
  // Harness-level: a disabled penalty must reproduce plain finetuning in
  // every recorded number, not just the final weights.
  ExperimentConfig red;
  red.sequence.num_stages = 3;
  red.sequence.classes_per_stage = 3;
  red.sequence.input_dim = 10;
  red.sequence.train_per_class = 40;
  red.sequence.val_per_class = 10;
  red.sequence.test_per_class = 15;
  red.sequence.ood_classes = 2;
  red.sequence.ood_per_class = 20;
  red.model.hidden_dims = {16};
  red.model.feature_dim = 8;
  red.trainer.max_epochs = 15;
  red.trainer.early_stop_patience = 5;
  red.seeds = 1;
  red.master_seed = 77;

  const auto run_json = [&](const ExperimentConfig& cfg) {
    RunRecord rec;
    rec.config = red;  // common envelope so only the seed run can differ
    rec.config_hash = config_hash(red);
    rec.seed_runs = {run_single_seed(cfg, 0)};
    compute_aggregates(rec);
    return record_to_json(rec);
  };
  const std::string ft = run_json(red);

  ExperimentConfig mas0 = red;
  mas0.method = Method::Mas;
  mas0.trainer.mas_lambda = 0.0;
  const bool mas_ok = run_json(mas0) == ft;

  ExperimentConfig lwf0 = red;
  lwf0.method = Method::Lwf;
  lwf0.trainer.lwf_lambda = 0.0;
  const bool lwf_ok = run_json(lwf0) == ft;

  // First stage of replay training: the buffer is empty, so the update
  // stream must match finetuning parameter for parameter.
  SequenceSpec sp = red.sequence;
  const uint64_t run_seed = derive_seed(red.master_seed, 0);
  sp.seed = derive_seed(run_seed, kSeedData);
  const Sequence seq = generate_sequence(sp);
  ModelConfig mc = red.model;
  mc.input_dim = sp.input_dim;
  Model a = make_model(mc, Setting::SharedHead, derive_seed(run_seed, kSeedModel));
  Model b = make_model(mc, Setting::SharedHead, derive_seed(run_seed, kSeedModel));
  add_stage_head(a, stage_class_ids(seq, 0), derive_seed(run_seed, kSeedModel, 1));
  add_stage_head(b, stage_class_ids(seq, 0), derive_seed(run_seed, kSeedModel, 1));
  const StageReport ra = train_stage(a, Method::FineTune, red.trainer, 0, seq.stages[0].train,
                                     seq.stages[0].val, run_seed, {});
  ReplayBuffer buf(red.trainer.buffer_per_class);
  TrainInputs ti;
  ti.buffer = &buf;
  const StageReport rb = train_stage(b, Method::Er, red.trainer, 0, seq.stages[0].train,
                                     seq.stages[0].val, run_seed, ti);
  bool er_ok = ra.train_loss == rb.train_loss && ra.val_accuracy == rb.val_accuracy &&
               ra.best_epoch == rb.best_epoch && ra.train_curve == rb.train_curve;
  const std::vector<Tensor*> pa = trainable_params(a);
  const std::vector<Tensor*> pb = trainable_params(b);
  er_ok = er_ok && pa.size() == pb.size();
  for (size_t i = 0; er_ok && i < pa.size(); ++i) er_ok = pa[i]->value == pb[i]->value;

  // A zero perturbation at unit temperature must leave the softmax score
  // untouched, bit for bit, with and without the head oracle.
  bool odin_ok = true;
  ScorerContext ctx;
  ctx.odin = {0.0, 1.0};
  std::vector<LabeledExample> probes = seq.stages[0].test;
  probes.insert(probes.end(), seq.ood_calibration.begin(), seq.ood_calibration.end());
  for (const LabeledExample& ex : probes) {
    ctx.active_head = 0;
    odin_ok = odin_ok && score_sample(a, ScorerKind::Odin, ex.x, ctx) ==
                             score_sample(a, ScorerKind::Softmax, ex.x, ctx);
    ctx.active_head.reset();
    odin_ok = odin_ok && score_sample(a, ScorerKind::Odin, ex.x, ctx) ==
                             score_sample(a, ScorerKind::Softmax, ex.x, ctx);
  }

  char text[160];
  std::snprintf(text, sizeof text,
                "bit-exact: mas(0)%s lwf(0)%s replay-first-stage%s odin(0,1)%s",
                mas_ok ? "=" : "!", lwf_ok ? "=" : "!", er_ok ? "=" : "!", odin_ok ? "=" : "!");
  return {mas_ok && lwf_ok && er_ok && odin_ok, text};
}

static Verdict partition_law(const std::vector<const RunRecord*>& records) {
  // Property side: the partition of a random correctness history matches a
  // literal restatement of the set definitions.
  Rng rng(41);
  bool sets_ok = true;
  for (int rep = 0; rep < 300 && sets_ok; ++rep) {
    const int T = 2 + static_cast<int>(rng.uniform_int(4));
    const size_t n = 30 + rng.uniform_int(90);
    std::vector<int> stage(n);
    for (auto& s : stage) s = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(T)));
    CorrectnessHistory h(T, n);
    for (int t = 0; t < T; ++t)
      for (size_t i = 0; i < n; ++i) h.record(t, i, rng.uniform() < 0.6);

    for (int t = 0; t < T && sets_ok; ++t) {
      const Partition p = partition_sets(h, stage, t);
      std::vector<size_t> in, forg, out, res;
      for (size_t i = 0; i < n; ++i) {
        if (stage[i] > t)
          out.push_back(i);
        else if (h.at(t, i) == Seen::Correct)
          in.push_back(i);
        else if (stage[i] < t && h.at(stage[i], i) == Seen::Correct)
          forg.push_back(i);
        else
          res.push_back(i);
      }
      sets_ok = p.in_ids == in && p.forg_ids == forg && p.out_ids == out &&
                p.residual_ids == res;
      if (t == 0 && !p.forg_ids.empty()) sets_ok = false;
    }
  }

  // Record side: every run this binary produced respects the counting law,
  // has an empty Forg at the first evaluation, and never scores the final
  // stage.
  bool runs_ok = true;
  int rows = 0;
  for (const RunRecord* rec : records) {
    const SequenceSpec& s = rec->config.sequence;
    const size_t pool = static_cast<size_t>(s.num_stages) *
                        static_cast<size_t>(s.classes_per_stage) *
                        static_cast<size_t>(s.test_per_class);
    for (const SeedRun& sr : rec->seed_runs) {
      if (sr.failed) {
        runs_ok = false;
        continue;
      }
      for (const MetricRow& row : sr.metrics) {
        ++rows;
        if (row.stage > s.num_stages - 2) runs_ok = false;
        if (row.n_in + row.n_forg + row.n_out + row.n_residual != pool) runs_ok = false;
        if (row.stage == 0 && row.n_forg != 0) runs_ok = false;
      }
    }
  }
  char text[160];
  std::snprintf(text, sizeof text,
                "definitions on 300 random histories%s; coverage/first-stage/final-stage law "
                "over %d recorded rows%s",
                sets_ok ? " hold" : " BROKEN", rows, runs_ok ? " holds" : " BROKEN");
  return {sets_ok && runs_ok, text};
}

// ---- main -------------------------------------------------------------------

int main() {
  std::setvbuf(stdout, nullptr, _IOLBF, 0);
  const int jobs =
      std::max(1, std::min(10, static_cast<int>(std::thread::hardware_concurrency())));

  std::vector<Verdict> v(12);
  v[0] = metric_oracles();
  v[1] = gradient_checks();
  v[2] = reductions();

  // Shared experiment fleet: the default 5-stage sequence under several
  // continual methods, ten seeds each.
  ExperimentConfig ft_cfg;
  ft_cfg.scorers = {ScorerKind::Softmax, ScorerKind::B1, ScorerKind::B2};
  ft_cfg.output_dir = out_dir("finetune");

  ExperimentConfig mas_cfg;
  mas_cfg.method = Method::Mas;
  mas_cfg.output_dir = out_dir("mas");

  ExperimentConfig lwf_cfg;
  lwf_cfg.method = Method::Lwf;
  lwf_cfg.output_dir = out_dir("lwf");

  std::fprintf(stderr, "running finetune/mas/lwf, 10 seeds each (jobs=%d)...\n", jobs);
  const auto t_runs = Clock::now();
  const RunRecord ft = run_experiment(ft_cfg, jobs);
  const RunRecord mas = run_experiment(mas_cfg, jobs);
  const RunRecord lwf = run_experiment(lwf_cfg, jobs);
  const double core_secs = since(t_runs);

  ExperimentConfig twin_cfg = ft_cfg;
  twin_cfg.output_dir = out_dir("finetune_twin");
  std::fprintf(stderr, "rerunning the finetune config for the determinism check...\n");
  const RunRecord twin = run_experiment(twin_cfg, jobs);

  ExperimentConfig er25_cfg;
  er25_cfg.setting = Setting::SharedHead;
  er25_cfg.method = Method::Er;
  er25_cfg.trainer.buffer_per_class = 25;
  er25_cfg.output_dir = out_dir("er25");
  ExperimentConfig er50_cfg = er25_cfg;
  er50_cfg.trainer.buffer_per_class = 50;
  er50_cfg.output_dir = out_dir("er50");
  std::fprintf(stderr, "running replay at two buffer sizes...\n");
  const RunRecord er25 = run_experiment(er25_cfg, jobs);
  const RunRecord er50 = run_experiment(er50_cfg, jobs);

  ExperimentConfig dd_cfg;
  dd_cfg.sequence.regime = Regime::DisjointDomain;
  dd_cfg.output_dir = out_dir("disjoint");
  std::fprintf(stderr, "running the disjoint-domain sequence...\n");
  const RunRecord dd = run_experiment(dd_cfg, jobs);

  v[3] = partition_law({&ft, &mas, &lwf, &twin, &er25, &er50, &dd});

  const int final_stage = ft_cfg.sequence.num_stages - 2;

  {  // 5: forgetting gap
    const auto f = ft.acc_aggregate.mean_avg_forgetting;
    const auto m = mas.acc_aggregate.mean_avg_forgetting;
    const auto l = lwf.acc_aggregate.mean_avg_forgetting;
    const bool ok = f && m && l && *f - *m >= 0.10 && *f - *l >= 0.10 && core_secs < 300.0;
    char text[200];
    std::snprintf(text, sizeof text,
                  "mean avg forgetting: finetune %s vs mas %s / lwf %s (gap >= 0.100, runs "
                  "%.0fs < 300s)",
                  f3(f).c_str(), f3(m).c_str(), f3(l).c_str(), core_secs);
    v[4] = {ok, text};
  }

  {  // 6: novelty detection degrades along the sequence
    const auto early = mean_defined(per_seed_metric(ft, "softmax", 1, &MetricRow::p_auc));
    const auto last =
        mean_defined(per_seed_metric(ft, "softmax", final_stage, &MetricRow::p_auc));
    const bool ok = early && last && *early - *last >= 0.03;
    char text[200];
    std::snprintf(text, sizeof text,
                  "finetune softmax p.auc: second stage %s -> final %s (drop >= 0.030)",
                  f3(early).c_str(), f3(last).c_str());
    v[5] = {ok, text};
  }

  {  // 7: a regularized method lifts previous-stage auc
    const auto am = per_seed_metric(mas, "softmax", final_stage, &MetricRow::p_auc);
    const auto af = per_seed_metric(ft, "softmax", final_stage, &MetricRow::p_auc);
    int wins = 0, paired = 0;
    for (size_t i = 0; i < am.size() && i < af.size(); ++i) {
      if (!am[i] || !af[i]) continue;
      ++paired;
      if (*am[i] > *af[i]) ++wins;
    }
    const auto mm = mean_defined(am), mf = mean_defined(af);
    const bool ok = mm && mf && *mm > *mf && paired == 10 && wins >= 9;
    char text[200];
    std::snprintf(text, sizeof text,
                  "final p.auc: mas %s > finetune %s, %d/%d seeds (need 9/10)",
                  f3(mm).c_str(), f3(mf).c_str(), wins, paired);
    v[6] = {ok, text};
  }

  {  // 8: larger replay buffer does not hurt
    const auto b50 = mean_defined(per_seed_metric(er50, "softmax", final_stage, &MetricRow::p_auc));
    const auto b25 = mean_defined(per_seed_metric(er25, "softmax", final_stage, &MetricRow::p_auc));
    const bool ok = b50 && b25 && *b50 >= *b25;
    char text[200];
    std::snprintf(text, sizeof text, "final p.auc: replay 50/class %s >= 25/class %s",
                  f3(b50).c_str(), f3(b25).c_str());
    v[7] = {ok, text};
  }

  {  // 9: prototype scorers keep pace with softmax
    auto mean_summary = [&](const std::string& scorer) -> std::optional<double> {
      std::vector<std::optional<double>> vals;
      for (const SeedRun& sr : ft.seed_runs) {
        if (sr.failed) continue;
        for (const SummaryRow& s : sr.summaries)
          if (s.scorer == scorer) vals.push_back(s.m_c_auc);
      }
      return mean_defined(vals);
    };
    const auto sm = mean_summary("softmax"), b1 = mean_summary("b1"), b2 = mean_summary("b2");
    const bool ok = sm && b1 && b2 && *b2 >= *sm - 0.005 && *b2 >= *b1 - 0.005;
    char text[200];
    std::snprintf(text, sizeof text,
                  "mean auc: b2 %s vs softmax %s, b1 %s (b2 within 0.005 of both)",
                  f3(b2).c_str(), f3(sm).c_str(), f3(b1).c_str());
    v[8] = {ok, text};
  }

  {  // 10: feature norms separate in from out right after the first stage
    int wins = 0, seeds = 0;
    for (const SeedRun& sr : ft.seed_runs) {
      if (sr.failed) continue;
      std::optional<double> nin, nout;
      for (const FeatureRow& f : sr.feature_rows) {
        if (f.stage != 0) continue;
        if (f.group == "in_all") nin = f.stats.norm_mean;
        if (f.group == "out") nout = f.stats.norm_mean;
      }
      if (!nin || !nout) continue;
      ++seeds;
      if (*nin > *nout) ++wins;
    }
    char text[200];
    std::snprintf(text, sizeof text, "mean feature norm in > out after first stage: %d/%d seeds",
                  wins, seeds);
    v[9] = {seeds == 10 && wins >= 9, text};
  }

  {  // 11: forgotten-vs-unseen separation depends on the domain layout
    const auto easy =
        mean_defined(per_seed_metric(dd, "softmax", final_stage, &MetricRow::forg_out_der));
    const auto hard =
        mean_defined(per_seed_metric(ft, "softmax", final_stage, &MetricRow::forg_out_der));
    const bool ok = easy && hard && *hard - *easy >= 0.10;
    char text[200];
    std::snprintf(text, sizeof text,
                  "final forg/out der: disjoint domains %s vs same domain %s (gap >= 0.100)",
                  f3(easy).c_str(), f3(hard).c_str());
    v[10] = {ok, text};
  }

  {  // 12: reruns are byte-identical
    write_report(ft, ft_cfg.output_dir);
    write_report(twin, twin_cfg.output_dir);
    bool ok = true;
    for (const char* name : {"metrics.csv", "summary.csv", "aggregate.csv", "trajectories.csv",
                             "cl_summary.csv", "accuracy.csv"}) {
      const std::string a = slurp(ft_cfg.output_dir + "/" + name);
      ok = ok && !a.empty() && a == slurp(twin_cfg.output_dir + "/" + name);
    }
    char text[200];
    std::snprintf(text, sizeof text, "independent reruns emit byte-identical csv tables%s",
                  ok ? "" : " (MISMATCH)");
    v[11] = {ok, text};
  }

  int passed = 0;
  for (int i = 0; i < 12; ++i) {
    std::printf("[%2d] %s %s\n", i + 1, v[i].pass ? "PASS" : "FAIL", v[i].text.c_str());
    passed += v[i].pass ? 1 : 0;
  }
  std::printf("ACCEPTANCE: %d/12 criteria passed\n", passed);
  return passed == 12 ? 0 : 1;
}
