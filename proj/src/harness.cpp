#include "cnd/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "cnd/scorer.hpp"
#include "cnd/vae.hpp"
#include "json_util.hpp"

namespace fs = std::filesystem;

namespace cnd {

namespace {

using jsonutil::json;
using jsonutil::num_or_null;
using jsonutil::ObjectReader;
using jsonutil::opt_or_null;
using jsonutil::parse_json;

// Salt separating the one-off VAE initialization from the per-stage
// training streams (those use kSeedVae with salt_b = stage).
constexpr uint64_t kVaeInitSalt = 0xFFFFull;

bool wants(const ExperimentConfig& cfg, ScorerKind k) {
  for (ScorerKind s : cfg.scorers)
    if (s == k) return true;
  return false;
}

Mat rows_of(const TestPool& pool, const std::vector<size_t>& ids, int dim) {
  Mat x(static_cast<int>(ids.size()), dim);
  for (size_t i = 0; i < ids.size(); ++i)
    x.row(static_cast<int>(i)) = pool.examples[ids[i]].x.transpose();
  return x;
}

// Mean and population standard deviation of the defined entries.
struct MeanStd {
  std::optional<double> mean, std;
  int n = 0;
};

MeanStd mean_std(const std::vector<std::optional<double>>& vals) {
  MeanStd out;
  double sum = 0.0;
  for (const auto& v : vals)
    if (v) {
      sum += *v;
      ++out.n;
    }
  if (out.n == 0) return out;
  const double mean = sum / out.n;
  double sq = 0.0;
  for (const auto& v : vals)
    if (v) sq += (*v - mean) * (*v - mean);
  out.mean = mean;
  out.std = std::sqrt(sq / out.n);
  return out;
}

}  // namespace

SeedRun run_single_seed(const ExperimentConfig& cfg_in, int seed_index) {
  SeedRun sr;
  sr.seed_index = seed_index;
  sr.run_seed = derive_seed(cfg_in.master_seed, static_cast<uint64_t>(seed_index));
  try {
    ExperimentConfig cfg = cfg_in;
    validate_config(cfg);
    if (seed_index < 0) throw IndexError("seed index must be nonnegative");

    SequenceSpec spec = cfg.sequence;
    spec.seed = derive_seed(sr.run_seed, kSeedData);
    const Sequence seq = generate_sequence(spec);
    const TestPool pool = test_pool(seq);
    const int T = spec.num_stages;
    const size_t n_pool = pool.examples.size();

    // The pool is ordered by stage; record where each stage's block starts.
    std::vector<size_t> stage_begin(static_cast<size_t>(T) + 1, 0);
    for (size_t i = 0; i < n_pool; ++i) ++stage_begin[static_cast<size_t>(pool.stage[i]) + 1];
    for (int t = 0; t < T; ++t)
      stage_begin[static_cast<size_t>(t) + 1] += stage_begin[static_cast<size_t>(t)];

    CorrectnessHistory hist(T, n_pool);
    Model m = make_model(cfg.model, cfg.setting, derive_seed(sr.run_seed, kSeedModel));

    const bool multi = cfg.setting == Setting::MultiHead;
    const bool replay_method = cfg.method == Method::Er || cfg.method == Method::Ssil;
    const bool teacher_method = cfg.method == Method::Lwf || cfg.method == Method::Ssil;
    MasState mas;
    ReplayBuffer buffer(cfg.trainer.buffer_per_class);
    std::optional<ModelSnapshot> prev;
    std::vector<std::vector<int>> stage_classes;

    std::optional<VaeModel> vae;
    if (wants(cfg, ScorerKind::Vae))
      vae = make_vae(cfg.vae, derive_seed(sr.run_seed, kSeedVae, kVaeInitSalt));

    std::vector<ScorerContext> ctxs(cfg.scorers.size());
    for (ScorerContext& c : ctxs) {
      c.b2_nth = cfg.b2_nth;
      c.vae_samples = cfg.vae_samples;
      c.mahala.ridge = cfg.mahalanobis_ridge;
    }

    for (int t = 0; t < T; ++t) {
      const std::vector<int> ids = stage_class_ids(seq, t);
      add_stage_head(m, ids, derive_seed(sr.run_seed, kSeedModel, static_cast<uint64_t>(t) + 1));
      stage_classes.push_back(ids);

      TrainInputs inputs;
      if (teacher_method && prev) inputs.previous = &*prev;
      if (replay_method) inputs.buffer = &buffer;
      if (cfg.method == Method::Mas) inputs.mas = &mas;
      if (cfg.method == Method::Ssil) inputs.stage_classes = &stage_classes;

      sr.stage_reports.push_back(train_stage(m, cfg.method, cfg.trainer, t, seq.stages[t].train,
                                             seq.stages[t].val, sr.run_seed, inputs));
      prev = ModelSnapshot{m, t};

      // Correctness of every seen test sample under the stage-t model, and
      // the accuracy matrix row.
      std::vector<double> acc_row;
      for (int k = 0; k <= t; ++k) {
        const size_t b = stage_begin[static_cast<size_t>(k)];
        const size_t e = stage_begin[static_cast<size_t>(k) + 1];
        Mat x(static_cast<int>(e - b), spec.input_dim);
        for (size_t i = b; i < e; ++i)
          x.row(static_cast<int>(i - b)) = pool.examples[i].x.transpose();
        const std::vector<int> preds = predict(m, x, multi ? k : 0);
        int correct = 0;
        for (size_t i = b; i < e; ++i) {
          const bool ok = preds[i - b] == pool.examples[i].label;
          hist.record(t, i, ok);
          correct += ok ? 1 : 0;
        }
        acc_row.push_back(static_cast<double>(correct) / static_cast<double>(e - b));
      }
      sr.accuracy.push_back(std::move(acc_row));

      if (vae) {
        Mat x = examples_matrix(seq.stages[t].train);
        if (cfg.vae.on_features) x = features_eval(m, x);
        train_vae_stage(*vae, x, t, sr.run_seed);
      }

      // The final stage has no unseen data left, so novelty is evaluated
      // after every stage except the last.
      if (t <= T - 2) {
        const Partition part = partition_sets(hist, pool.stage, t);

        // In-distribution data the continual constraint still allows:
        // the current stage's train split plus whatever the replay buffer
        // kept from earlier stages.
        std::vector<LabeledExample> avail = seq.stages[t].train;
        if (replay_method)
          avail.insert(avail.end(), buffer.examples().begin(), buffer.examples().end());

        for (size_t si = 0; si < cfg.scorers.size(); ++si) {
          const ScorerKind kind = cfg.scorers[si];
          ScorerContext& ctx = ctxs[si];
          ctx.vae = vae ? &*vae : nullptr;
          ctx.score_seed = derive_seed(sr.run_seed, kSeedScore, static_cast<uint64_t>(t));
          calibrate_scorer(kind, m, avail, seq.ood_calibration, ctx);

          // Separation achieved on the calibration data itself; sweep
          // leaderboards rank scorer hyperparameters by this.
          if (!avail.empty() && !seq.ood_calibration.empty()) {
            std::vector<double> cal_in, cal_out;
            for (const LabeledExample& ex : avail) {
              ctx.active_head = multi ? std::optional<int>(ex.stage) : std::optional<int>(0);
              cal_in.push_back(score_sample(m, kind, ex.x, ctx));
            }
            ctx.active_head.reset();
            for (const LabeledExample& ex : seq.ood_calibration)
              cal_out.push_back(score_sample(m, kind, ex.x, ctx));
            sr.calibration.push_back({t, scorer_name(kind), auc(cal_in, cal_out)});
          }

          ScoredPartition sp;
          for (size_t id : part.in_ids) {
            ctx.active_head = multi ? std::optional<int>(pool.stage[id]) : std::optional<int>(0);
            sp.in_scores.push_back(score_sample(m, kind, pool.examples[id].x, ctx));
            sp.in_stage.push_back(pool.stage[id]);
          }
          for (size_t id : part.forg_ids) {
            ctx.active_head = multi ? std::optional<int>(pool.stage[id]) : std::optional<int>(0);
            sp.forg_scores.push_back(score_sample(m, kind, pool.examples[id].x, ctx));
          }
          ctx.active_head.reset();
          for (size_t id : part.out_ids)
            sp.out_scores.push_back(score_sample(m, kind, pool.examples[id].x, ctx));

          sr.metrics.push_back(stage_metrics(sp, t, scorer_name(kind), part.residual_ids.size()));
        }

        // Feature geometry of the partition groups under the stage-t model.
        std::vector<std::pair<std::string, std::vector<size_t>>> groups;
        groups.emplace_back("in_all", part.in_ids);
        std::vector<size_t> cur, prev_ids, first;
        for (size_t id : part.in_ids) {
          if (pool.stage[id] == t) cur.push_back(id);
          if (pool.stage[id] < t) prev_ids.push_back(id);
          if (pool.stage[id] == 0) first.push_back(id);
        }
        groups.emplace_back("in_current", std::move(cur));
        groups.emplace_back("in_previous", std::move(prev_ids));
        groups.emplace_back("in_first", std::move(first));
        groups.emplace_back("forg", part.forg_ids);
        groups.emplace_back("out", part.out_ids);
        for (const auto& [name, gids] : groups) {
          if (gids.empty()) continue;
          const Mat feats = features_eval(m, rows_of(pool, gids, spec.input_dim));
          sr.feature_rows.push_back({t, name, feature_stats(feats)});
        }
      }

      if (replay_method) {
        Rng brng(derive_seed(sr.run_seed, kSeedBuffer, static_cast<uint64_t>(t)));
        buffer.add_stage(seq.stages[t].train, brng);
      }
    }

    sr.acc_summary = accuracy_summary(sr.accuracy);
    for (ScorerKind kind : cfg.scorers) {
      std::vector<MetricRow> rows;
      for (const MetricRow& row : sr.metrics)
        if (row.scorer == scorer_name(kind)) rows.push_back(row);
      sr.summaries.push_back(summarize_rows(rows));
    }
  } catch (const std::exception& e) {
    sr = SeedRun{};
    sr.seed_index = seed_index;
    sr.run_seed = derive_seed(cfg_in.master_seed, static_cast<uint64_t>(seed_index));
    sr.failed = true;
    sr.error = e.what();
  }
  return sr;
}

void compute_aggregates(RunRecord& record) {
  record.aggregate.clear();
  for (ScorerKind kind : record.config.scorers) {
    const std::string name = scorer_name(kind);
    AggregateRow row;
    row.scorer = name;
    std::vector<std::optional<double>> c, r, p, ifd, fod;
    for (const SeedRun& sr : record.seed_runs) {
      if (sr.failed) continue;
      for (const SummaryRow& s : sr.summaries) {
        if (s.scorer != name) continue;
        ++row.n_seeds;
        c.push_back(s.m_c_auc);
        r.push_back(s.m_r_auc);
        p.push_back(s.m_p_auc);
        ifd.push_back(s.m_in_forg_der);
        fod.push_back(s.m_forg_out_der);
      }
    }
    const MeanStd mc = mean_std(c), mr = mean_std(r), mp = mean_std(p), mi = mean_std(ifd),
                  mf = mean_std(fod);
    row.mean_c_auc = mc.mean;
    row.std_c_auc = mc.std;
    row.mean_r_auc = mr.mean;
    row.std_r_auc = mr.std;
    row.mean_p_auc = mp.mean;
    row.std_p_auc = mp.std;
    row.mean_in_forg_der = mi.mean;
    row.std_in_forg_der = mi.std;
    row.mean_forg_out_der = mf.mean;
    row.std_forg_out_der = mf.std;
    record.aggregate.push_back(std::move(row));
  }

  AccuracyAggregate acc;
  std::vector<std::optional<double>> a, f;
  for (const SeedRun& sr : record.seed_runs) {
    if (sr.failed) continue;
    ++acc.n_seeds;
    a.push_back(sr.acc_summary.avg_accuracy);
    f.push_back(sr.acc_summary.avg_forgetting);
  }
  const MeanStd ma = mean_std(a), mf = mean_std(f);
  acc.mean_avg_accuracy = ma.mean;
  acc.std_avg_accuracy = ma.std;
  acc.mean_avg_forgetting = mf.mean;
  acc.std_avg_forgetting = mf.std;
  record.acc_aggregate = acc;
}

// ---- record JSON ------------------------------------------------------------

namespace {

json double_list(const std::vector<double>& v) {
  json a = json::array();
  for (double x : v) a.push_back(num_or_null(x));
  return a;
}

std::vector<double> double_list_from(const json& j, const char* what) {
  std::vector<double> out;
  if (!j.is_array()) throw ConfigError(std::string(what) + " must be an array");
  for (const auto& e : j) {
    if (e.is_null())
      out.push_back(std::numeric_limits<double>::quiet_NaN());
    else if (e.is_number())
      out.push_back(e.get<double>());
    else
      throw ConfigError(std::string(what) + " must hold numbers");
  }
  return out;
}

json seed_run_json(const SeedRun& sr) {
  json j;
  j["seed_index"] = sr.seed_index;
  j["run_seed"] = sr.run_seed;
  j["failed"] = sr.failed;
  j["error"] = sr.error;

  json reports = json::array();
  for (const StageReport& r : sr.stage_reports)
    reports.push_back({{"train_loss", num_or_null(r.train_loss)},
                       {"val_accuracy", num_or_null(r.val_accuracy)},
                       {"best_epoch", r.best_epoch},
                       {"epochs_run", r.epochs_run},
                       {"train_curve", double_list(r.train_curve)},
                       {"val_curve", double_list(r.val_curve)}});
  j["stage_reports"] = std::move(reports);

  json acc = json::array();
  for (const auto& row : sr.accuracy) acc.push_back(double_list(row));
  j["accuracy"] = std::move(acc);

  j["acc_summary"] = {{"avg_accuracy", num_or_null(sr.acc_summary.avg_accuracy)},
                      {"avg_forgetting", opt_or_null(sr.acc_summary.avg_forgetting)},
                      {"final_acc", double_list(sr.acc_summary.final_acc)},
                      {"forgetting", double_list(sr.acc_summary.forgetting)}};

  json metrics = json::array();
  for (const MetricRow& r : sr.metrics)
    metrics.push_back({{"stage", r.stage},
                       {"scorer", r.scorer},
                       {"c_auc", opt_or_null(r.c_auc)},
                       {"r_auc", opt_or_null(r.r_auc)},
                       {"p_auc", opt_or_null(r.p_auc)},
                       {"in_out_aupr", opt_or_null(r.in_out_aupr)},
                       {"in_out_der", opt_or_null(r.in_out_der)},
                       {"in_forg_auc", opt_or_null(r.in_forg_auc)},
                       {"in_forg_aupr", opt_or_null(r.in_forg_aupr)},
                       {"in_forg_der", opt_or_null(r.in_forg_der)},
                       {"forg_out_auc", opt_or_null(r.forg_out_auc)},
                       {"forg_out_aupr", opt_or_null(r.forg_out_aupr)},
                       {"forg_out_der", opt_or_null(r.forg_out_der)},
                       {"n_in", r.n_in},
                       {"n_forg", r.n_forg},
                       {"n_out", r.n_out},
                       {"n_residual", r.n_residual}});
  j["metrics"] = std::move(metrics);

  json summaries = json::array();
  for (const SummaryRow& s : sr.summaries)
    summaries.push_back({{"scorer", s.scorer},
                         {"m_c_auc", opt_or_null(s.m_c_auc)},
                         {"m_r_auc", opt_or_null(s.m_r_auc)},
                         {"m_p_auc", opt_or_null(s.m_p_auc)},
                         {"m_in_forg_der", opt_or_null(s.m_in_forg_der)},
                         {"m_forg_out_der", opt_or_null(s.m_forg_out_der)}});
  j["summaries"] = std::move(summaries);

  json features = json::array();
  for (const FeatureRow& f : sr.feature_rows)
    features.push_back({{"stage", f.stage},
                        {"group", f.group},
                        {"n", f.stats.n},
                        {"norm_mean", num_or_null(f.stats.norm_mean)},
                        {"feat_mean", num_or_null(f.stats.feat_mean)},
                        {"feat_std", num_or_null(f.stats.feat_std)}});
  j["feature_rows"] = std::move(features);

  json calibration = json::array();
  for (const CalibrationRow& c : sr.calibration)
    calibration.push_back(
        {{"stage", c.stage}, {"scorer", c.scorer}, {"auc", num_or_null(c.auc)}});
  j["calibration"] = std::move(calibration);
  return j;
}

SeedRun seed_run_from_json(const json& j) {
  SeedRun sr;
  ObjectReader r(j, "seed_runs");
  r.read_int("seed_index", sr.seed_index);
  r.read_u64("run_seed", sr.run_seed);
  r.read_bool("failed", sr.failed);
  r.read_string("error", sr.error);

  if (const json* a = r.any("stage_reports")) {
    if (!a->is_array()) throw ConfigError("stage_reports must be an array");
    for (const json& e : *a) {
      ObjectReader re(e, "stage_reports");
      StageReport rep;
      re.read_double("train_loss", rep.train_loss);
      re.read_double("val_accuracy", rep.val_accuracy);
      re.read_int("best_epoch", rep.best_epoch);
      re.read_int("epochs_run", rep.epochs_run);
      if (const json* c = re.any("train_curve")) rep.train_curve = double_list_from(*c, "train_curve");
      if (const json* c = re.any("val_curve")) rep.val_curve = double_list_from(*c, "val_curve");
      re.finish();
      sr.stage_reports.push_back(std::move(rep));
    }
  }

  if (const json* a = r.any("accuracy")) {
    if (!a->is_array()) throw ConfigError("accuracy must be an array");
    for (const json& e : *a) sr.accuracy.push_back(double_list_from(e, "accuracy"));
  }

  if (const json* a = r.any("acc_summary")) {
    ObjectReader ra(*a, "acc_summary");
    ra.read_double("avg_accuracy", sr.acc_summary.avg_accuracy);
    ra.read_opt_double("avg_forgetting", sr.acc_summary.avg_forgetting);
    if (const json* v = ra.any("final_acc"))
      sr.acc_summary.final_acc = double_list_from(*v, "final_acc");
    if (const json* v = ra.any("forgetting"))
      sr.acc_summary.forgetting = double_list_from(*v, "forgetting");
    ra.finish();
  }

  if (const json* a = r.any("metrics")) {
    if (!a->is_array()) throw ConfigError("metrics must be an array");
    for (const json& e : *a) {
      ObjectReader re(e, "metrics");
      MetricRow row;
      re.read_int("stage", row.stage);
      re.read_string("scorer", row.scorer);
      re.read_opt_double("c_auc", row.c_auc);
      re.read_opt_double("r_auc", row.r_auc);
      re.read_opt_double("p_auc", row.p_auc);
      re.read_opt_double("in_out_aupr", row.in_out_aupr);
      re.read_opt_double("in_out_der", row.in_out_der);
      re.read_opt_double("in_forg_auc", row.in_forg_auc);
      re.read_opt_double("in_forg_aupr", row.in_forg_aupr);
      re.read_opt_double("in_forg_der", row.in_forg_der);
      re.read_opt_double("forg_out_auc", row.forg_out_auc);
      re.read_opt_double("forg_out_aupr", row.forg_out_aupr);
      re.read_opt_double("forg_out_der", row.forg_out_der);
      re.read_size("n_in", row.n_in);
      re.read_size("n_forg", row.n_forg);
      re.read_size("n_out", row.n_out);
      re.read_size("n_residual", row.n_residual);
      re.finish();
      sr.metrics.push_back(std::move(row));
    }
  }

  if (const json* a = r.any("summaries")) {
    if (!a->is_array()) throw ConfigError("summaries must be an array");
    for (const json& e : *a) {
      ObjectReader re(e, "summaries");
      SummaryRow s;
      re.read_string("scorer", s.scorer);
      re.read_opt_double("m_c_auc", s.m_c_auc);
      re.read_opt_double("m_r_auc", s.m_r_auc);
      re.read_opt_double("m_p_auc", s.m_p_auc);
      re.read_opt_double("m_in_forg_der", s.m_in_forg_der);
      re.read_opt_double("m_forg_out_der", s.m_forg_out_der);
      re.finish();
      sr.summaries.push_back(std::move(s));
    }
  }

  if (const json* a = r.any("feature_rows")) {
    if (!a->is_array()) throw ConfigError("feature_rows must be an array");
    for (const json& e : *a) {
      ObjectReader re(e, "feature_rows");
      FeatureRow f;
      re.read_int("stage", f.stage);
      re.read_string("group", f.group);
      re.read_size("n", f.stats.n);
      re.read_double("norm_mean", f.stats.norm_mean);
      re.read_double("feat_mean", f.stats.feat_mean);
      re.read_double("feat_std", f.stats.feat_std);
      re.finish();
      sr.feature_rows.push_back(std::move(f));
    }
  }

  if (const json* a = r.any("calibration")) {
    if (!a->is_array()) throw ConfigError("calibration must be an array");
    for (const json& e : *a) {
      ObjectReader re(e, "calibration");
      CalibrationRow c;
      re.read_int("stage", c.stage);
      re.read_string("scorer", c.scorer);
      re.read_double("auc", c.auc);
      re.finish();
      sr.calibration.push_back(std::move(c));
    }
  }
  r.finish();
  return sr;
}

std::string hash_hex(uint64_t h) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "0x%016" PRIx64, h);
  return buf;
}

}  // namespace

std::string record_to_json(const RunRecord& record) {
  json j;
  j["config"] = parse_json(config_to_json(record.config), "config");
  j["config_hash"] = hash_hex(record.config_hash);

  json runs = json::array();
  for (const SeedRun& sr : record.seed_runs) runs.push_back(seed_run_json(sr));
  j["seed_runs"] = std::move(runs);

  json agg = json::array();
  for (const AggregateRow& a : record.aggregate)
    agg.push_back({{"scorer", a.scorer},
                   {"n_seeds", a.n_seeds},
                   {"mean_c_auc", opt_or_null(a.mean_c_auc)},
                   {"std_c_auc", opt_or_null(a.std_c_auc)},
                   {"mean_r_auc", opt_or_null(a.mean_r_auc)},
                   {"std_r_auc", opt_or_null(a.std_r_auc)},
                   {"mean_p_auc", opt_or_null(a.mean_p_auc)},
                   {"std_p_auc", opt_or_null(a.std_p_auc)},
                   {"mean_in_forg_der", opt_or_null(a.mean_in_forg_der)},
                   {"std_in_forg_der", opt_or_null(a.std_in_forg_der)},
                   {"mean_forg_out_der", opt_or_null(a.mean_forg_out_der)},
                   {"std_forg_out_der", opt_or_null(a.std_forg_out_der)}});
  j["aggregate"] = std::move(agg);

  j["acc_aggregate"] = {{"n_seeds", record.acc_aggregate.n_seeds},
                        {"mean_avg_accuracy", opt_or_null(record.acc_aggregate.mean_avg_accuracy)},
                        {"std_avg_accuracy", opt_or_null(record.acc_aggregate.std_avg_accuracy)},
                        {"mean_avg_forgetting",
                         opt_or_null(record.acc_aggregate.mean_avg_forgetting)},
                        {"std_avg_forgetting",
                         opt_or_null(record.acc_aggregate.std_avg_forgetting)}};
  return j.dump(2) + "\n";
}

RunRecord record_from_json(const std::string& text) {
  const json j = parse_json(text, "record");
  RunRecord record;
  ObjectReader r(j, "");
  const json* cfg = r.any("config");
  if (!cfg || !cfg->is_object()) throw ConfigError("record needs a \"config\" object");
  record.config = parse_config_text(cfg->dump());

  std::string hash;
  r.read_string("config_hash", hash);
  record.config_hash = config_hash(record.config);
  if (hash != hash_hex(record.config_hash))
    throw ConfigError("record config_hash " + hash + " does not match its config (" +
                      hash_hex(record.config_hash) + "); the record was edited or is stale");

  if (const json* a = r.any("seed_runs")) {
    if (!a->is_array()) throw ConfigError("seed_runs must be an array");
    for (const json& e : *a) record.seed_runs.push_back(seed_run_from_json(e));
  }
  std::sort(record.seed_runs.begin(), record.seed_runs.end(),
            [](const SeedRun& a, const SeedRun& b) { return a.seed_index < b.seed_index; });

  // Aggregates are derived state; consume the keys, then recompute so a
  // loaded record is always self-consistent.
  r.any("aggregate");
  r.any("acc_aggregate");
  r.finish();
  compute_aggregates(record);
  return record;
}

void save_record(const RunRecord& record, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write '" + tmp + "'");
    out << record_to_json(record);
    if (!out) throw Error("failed writing '" + tmp + "'");
  }
  fs::rename(tmp, path);
}

RunRecord load_record(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open record '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return record_from_json(buf.str());
}

RunRecord run_experiment(const ExperimentConfig& cfg_in, int jobs) {
  ExperimentConfig cfg = cfg_in;
  validate_config(cfg);
  if (jobs < 1) throw ConfigError("jobs must be at least 1");

  RunRecord record;
  record.config = cfg;
  record.config_hash = config_hash(cfg);

  fs::create_directories(cfg.output_dir);
  const std::string record_path = cfg.output_dir + "/record.json";

  std::vector<std::optional<SeedRun>> slots(static_cast<size_t>(cfg.seeds));
  if (fs::exists(record_path)) {
    RunRecord prior = load_record(record_path);
    if (prior.config_hash != record.config_hash)
      throw ConfigError("'" + record_path +
                        "' belongs to a different configuration; refusing to overwrite");
    for (SeedRun& s : prior.seed_runs)
      if (s.seed_index >= 0 && s.seed_index < cfg.seeds)
        slots[static_cast<size_t>(s.seed_index)] = std::move(s);
  }

  std::vector<int> todo;
  for (int i = 0; i < cfg.seeds; ++i)
    if (!slots[static_cast<size_t>(i)]) todo.push_back(i);

  std::mutex mu;
  std::atomic<size_t> cursor{0};
  std::exception_ptr first_error;

  // Caller must hold mu. Rebuilds the record from completed slots in seed
  // order and persists it, so a crash at any point can resume.
  auto assemble_and_save = [&]() {
    record.seed_runs.clear();
    for (const auto& s : slots)
      if (s) record.seed_runs.push_back(*s);
    compute_aggregates(record);
    save_record(record, record_path);
  };

  auto work = [&]() {
    try {
      for (;;) {
        const size_t k = cursor.fetch_add(1);
        if (k >= todo.size()) return;
        SeedRun sr = run_single_seed(cfg, todo[k]);
        std::lock_guard<std::mutex> lock(mu);
        slots[static_cast<size_t>(todo[k])] = std::move(sr);
        assemble_and_save();
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(mu);
      if (!first_error) first_error = std::current_exception();
    }
  };

  const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(todo.size())));
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (std::thread& th : pool) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  {
    std::lock_guard<std::mutex> lock(mu);
    assemble_and_save();
  }
  return record;
}

// ---- sweeps -----------------------------------------------------------------

namespace {

// Sets root[...path...] = value where path uses dots for nesting, creating
// intermediate objects as needed. Unknown leaves are caught later by the
// strict config parse of the patched document.
void set_path(json& root, const std::string& dotted, const json& value) {
  json* cur = &root;
  size_t pos = 0;
  for (;;) {
    const size_t dot = dotted.find('.', pos);
    const std::string key =
        dot == std::string::npos ? dotted.substr(pos) : dotted.substr(pos, dot - pos);
    if (key.empty()) throw ConfigError("bad grid key '" + dotted + "'");
    if (dot == std::string::npos) {
      (*cur)[key] = value;
      return;
    }
    json& next = (*cur)[key];
    if (next.is_null()) next = json::object();
    if (!next.is_object())
      throw ConfigError("grid key '" + dotted + "' does not address a config object");
    cur = &next;
    pos = dot + 1;
  }
}

std::string scalar_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

}  // namespace

SweepSpec parse_sweep_text(const std::string& text) {
  const json j = parse_json(text, "sweep");
  ObjectReader r(j, "");
  const json* base = r.any("base");
  if (!base || !base->is_object()) throw ConfigError("sweep needs a \"base\" config object");
  const json* grid = r.any("grid");
  if (grid && !grid->is_object()) throw ConfigError("grid must be an object");
  SweepSpec spec;
  r.read_string("rank_by", spec.rank_by);
  r.finish();
  if (spec.rank_by != "avg_accuracy" && spec.rank_by != "calibration_auc")
    throw ConfigError("rank_by must be \"avg_accuracy\" or \"calibration_auc\"");

  const ExperimentConfig base_cfg = parse_config_text(base->dump());
  spec.output_dir = base_cfg.output_dir;

  std::vector<std::pair<std::string, std::vector<json>>> axes;
  if (grid) {
    for (const auto& [key, values] : grid->items()) {
      if (key == "output_dir") throw ConfigError("output_dir cannot be swept");
      if (!values.is_array() || values.empty())
        throw ConfigError("grid values for \"" + key + "\" must be a nonempty array");
      axes.emplace_back(key, std::vector<json>(values.begin(), values.end()));
    }
  }

  std::vector<size_t> idx(axes.size(), 0);
  for (;;) {
    json patched = *base;
    std::string label;
    for (size_t a = 0; a < axes.size(); ++a) {
      set_path(patched, axes[a].first, axes[a].second[idx[a]]);
      if (a) label += ";";
      label += axes[a].first + "=" + scalar_text(axes[a].second[idx[a]]);
    }
    SweepPoint point;
    point.config = parse_config_text(patched.dump());
    point.label = label.empty() ? "base" : label;
    spec.points.push_back(std::move(point));

    // Odometer over the sorted grid keys, last key fastest.
    size_t a = axes.size();
    for (;;) {
      if (a == 0) return spec;
      --a;
      if (++idx[a] < axes[a].second.size()) break;
      idx[a] = 0;
    }
  }
}

SweepSpec load_sweep(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open sweep file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_sweep_text(buf.str());
}

namespace {

std::optional<double> rank_key(const RunRecord& record, const std::string& rank_by) {
  if (rank_by == "avg_accuracy") return record.acc_aggregate.mean_avg_accuracy;
  double sum = 0.0;
  int n = 0;
  for (const SeedRun& sr : record.seed_runs) {
    if (sr.failed) continue;
    for (const CalibrationRow& c : sr.calibration) {
      sum += c.auc;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += "\"";
  return out;
}

}  // namespace

std::vector<RunRecord> run_sweep(const SweepSpec& spec, int jobs) {
  if (spec.points.empty()) throw ConfigError("sweep has no grid points");
  std::vector<RunRecord> records;
  records.reserve(spec.points.size());
  for (size_t i = 0; i < spec.points.size(); ++i) {
    ExperimentConfig cfg = spec.points[i].config;
    char dir[32];
    std::snprintf(dir, sizeof dir, "grid_%03zu", i);
    cfg.output_dir = spec.output_dir + "/" + dir;
    RunRecord rec = run_experiment(cfg, jobs);
    write_report(rec, cfg.output_dir);
    records.push_back(std::move(rec));
  }

  struct Row {
    size_t point;
    std::optional<double> key;
  };
  std::vector<Row> rows;
  for (size_t i = 0; i < records.size(); ++i) rows.push_back({i, rank_key(records[i], spec.rank_by)});
  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.key.has_value() != b.key.has_value()) return a.key.has_value();
    if (!a.key) return false;
    return *a.key > *b.key;
  });

  std::string csv = "rank,point,dir,label," + spec.rank_by + "\n";
  for (size_t rank = 0; rank < rows.size(); ++rank) {
    const Row& row = rows[rank];
    char dir[32];
    std::snprintf(dir, sizeof dir, "grid_%03zu", row.point);
    char val[32] = "";
    if (row.key) std::snprintf(val, sizeof val, "%.6f", *row.key);
    csv += std::to_string(rank + 1) + "," + std::to_string(row.point) + "," + dir + "," +
           csv_escape(spec.points[row.point].label) + "," + val + "\n";
  }
  const std::string path = spec.output_dir + "/leaderboard.csv";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out << csv;
  if (!out) throw Error("failed writing '" + path + "'");
  return records;
}

}  // namespace cnd
