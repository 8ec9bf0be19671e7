#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "cnd/harness.hpp"

namespace fs = std::filesystem;

namespace cnd {

namespace {

std::string f6(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string cell(const std::optional<double>& v) { return v ? f6(*v) : ""; }

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

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out << text;
  if (!out) throw Error("failed writing '" + path + "'");
}

// One per-stage trajectory: across-seed means, one optional per stage.
struct Trajectory {
  std::string scorer;
  std::vector<std::optional<double>> values;
};

std::optional<double> mean_defined(const std::vector<std::optional<double>>& vals) {
  double sum = 0.0;
  int n = 0;
  for (const auto& v : vals)
    if (v && std::isfinite(*v)) {
      sum += *v;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / n;
}

constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c",
                                    "#d62728", "#9467bd", "#8c564b"};

std::string f2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

// Line chart of per-stage trajectories, one polyline per scorer. Each
// polyline carries its plotted numbers verbatim in a data-values attribute
// so the chart can be diffed against trajectories.csv.
std::string render_svg(const std::string& metric, const std::vector<Trajectory>& trajs,
                       int num_stages) {
  const double x0 = 70.0, x1 = 700.0, y0 = 20.0, y1 = 390.0;
  auto x_of = [&](int t) {
    if (num_stages <= 1) return (x0 + x1) / 2.0;
    return x0 + (x1 - x0) * static_cast<double>(t) / static_cast<double>(num_stages - 1);
  };
  auto y_of = [&](double v) {
    const double c = std::min(1.0, std::max(0.0, v));
    return y1 - (y1 - y0) * c;
  };

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"720\" height=\"440\" "
         "viewBox=\"0 0 720 440\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg += "<rect x=\"0\" y=\"0\" width=\"720\" height=\"440\" fill=\"white\"/>\n";
  svg += "<text x=\"385\" y=\"14\" text-anchor=\"middle\" font-size=\"14\">" + metric +
         "</text>\n";

  for (int g = 0; g <= 10; ++g) {
    const double v = g / 10.0;
    const std::string y = f2(y_of(v));
    svg += "<line x1=\"" + f2(x0) + "\" y1=\"" + y + "\" x2=\"" + f2(x1) + "\" y2=\"" + y +
           "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    svg += "<text x=\"" + f2(x0 - 8.0) + "\" y=\"" + f2(y_of(v) + 4.0) +
           "\" text-anchor=\"end\">" + f2(v).substr(0, 3) + "</text>\n";
  }
  for (int t = 0; t < num_stages; ++t) {
    svg += "<text x=\"" + f2(x_of(t)) + "\" y=\"" + f2(y1 + 18.0) +
           "\" text-anchor=\"middle\">" + std::to_string(t) + "</text>\n";
  }
  svg += "<text x=\"385\" y=\"425\" text-anchor=\"middle\">stage</text>\n";
  svg += "<rect x=\"" + f2(x0) + "\" y=\"" + f2(y0) + "\" width=\"" + f2(x1 - x0) +
         "\" height=\"" + f2(y1 - y0) + "\" fill=\"none\" stroke=\"#333333\" "
         "stroke-width=\"1\"/>\n";

  for (size_t i = 0; i < trajs.size(); ++i) {
    const Trajectory& tr = trajs[i];
    const std::string color = kPalette[i % 6];
    std::string points, values;
    for (int t = 0; t < num_stages; ++t) {
      const std::optional<double>& v = tr.values[static_cast<size_t>(t)];
      if (!values.empty()) values += " ";
      values += v ? f6(*v) : "nan";
      if (v) {
        if (!points.empty()) points += " ";
        points += f2(x_of(t)) + "," + f2(y_of(*v));
      }
    }
    svg += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\" data-scorer=\"" +
           tr.scorer + "\" data-values=\"" + values + "\" points=\"" + points + "\"/>\n";
    for (int t = 0; t < num_stages; ++t) {
      const std::optional<double>& v = tr.values[static_cast<size_t>(t)];
      if (!v) continue;
      svg += "<circle cx=\"" + f2(x_of(t)) + "\" cy=\"" + f2(y_of(*v)) + "\" r=\"3\" fill=\"" +
             color + "\"/>\n";
    }
    const double ly = 30.0 + 18.0 * static_cast<double>(i);
    svg += "<line x1=\"560\" y1=\"" + f2(ly) + "\" x2=\"584\" y2=\"" + f2(ly) + "\" stroke=\"" +
           color + "\" stroke-width=\"2\"/>\n";
    svg += "<text x=\"590\" y=\"" + f2(ly + 4.0) + "\">" + tr.scorer + "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

}  // namespace

void write_report(const RunRecord& record, const std::string& out_dir) {
  fs::create_directories(out_dir);
  fs::create_directories(out_dir + "/plots");

  const int T = record.config.sequence.num_stages;

  std::string metrics = "seed,stage,scorer,c_auc,r_auc,p_auc,in_out_aupr,in_out_der,"
                        "in_forg_auc,in_forg_aupr,in_forg_der,forg_out_auc,forg_out_aupr,"
                        "forg_out_der,n_in,n_forg,n_out,n_residual\n";
  std::string summary = "seed,scorer,m_c_auc,m_r_auc,m_p_auc,m_in_forg_der,m_forg_out_der\n";
  std::string accuracy = "seed,eval_stage,data_stage,accuracy\n";
  std::string cl_summary = "seed,avg_accuracy,avg_forgetting\n";
  std::string features = "seed,stage,group,n,norm_mean,feat_mean,feat_std\n";
  std::string stage_reports = "seed,stage,train_loss,val_accuracy,best_epoch,epochs_run\n";
  std::string calibration = "seed,stage,scorer,calibration_auc\n";
  std::string failures = "seed,error\n";

  for (const SeedRun& sr : record.seed_runs) {
    const std::string seed = std::to_string(sr.seed_index);
    if (sr.failed) {
      failures += seed + "," + csv_escape(sr.error) + "\n";
      continue;
    }
    for (const MetricRow& r : sr.metrics)
      metrics += seed + "," + std::to_string(r.stage) + "," + r.scorer + "," + cell(r.c_auc) +
                 "," + cell(r.r_auc) + "," + cell(r.p_auc) + "," + cell(r.in_out_aupr) + "," +
                 cell(r.in_out_der) + "," + cell(r.in_forg_auc) + "," + cell(r.in_forg_aupr) +
                 "," + cell(r.in_forg_der) + "," + cell(r.forg_out_auc) + "," +
                 cell(r.forg_out_aupr) + "," + cell(r.forg_out_der) + "," +
                 std::to_string(r.n_in) + "," + std::to_string(r.n_forg) + "," +
                 std::to_string(r.n_out) + "," + std::to_string(r.n_residual) + "\n";
    for (const SummaryRow& s : sr.summaries)
      summary += seed + "," + s.scorer + "," + cell(s.m_c_auc) + "," + cell(s.m_r_auc) + "," +
                 cell(s.m_p_auc) + "," + cell(s.m_in_forg_der) + "," + cell(s.m_forg_out_der) +
                 "\n";
    for (size_t t = 0; t < sr.accuracy.size(); ++t)
      for (size_t k = 0; k < sr.accuracy[t].size(); ++k)
        accuracy += seed + "," + std::to_string(t) + "," + std::to_string(k) + "," +
                    f6(sr.accuracy[t][k]) + "\n";
    cl_summary += seed + "," + f6(sr.acc_summary.avg_accuracy) + "," +
                  cell(sr.acc_summary.avg_forgetting) + "\n";
    for (const FeatureRow& f : sr.feature_rows)
      features += seed + "," + std::to_string(f.stage) + "," + f.group + "," +
                  std::to_string(f.stats.n) + "," + f6(f.stats.norm_mean) + "," +
                  f6(f.stats.feat_mean) + "," + f6(f.stats.feat_std) + "\n";
    for (size_t t = 0; t < sr.stage_reports.size(); ++t) {
      const StageReport& r = sr.stage_reports[t];
      stage_reports += seed + "," + std::to_string(t) + "," + f6(r.train_loss) + "," +
                       f6(r.val_accuracy) + "," + std::to_string(r.best_epoch) + "," +
                       std::to_string(r.epochs_run) + "\n";
    }
    for (const CalibrationRow& c : sr.calibration)
      calibration += seed + "," + std::to_string(c.stage) + "," + c.scorer + "," + f6(c.auc) +
                     "\n";
  }

  std::string aggregate = "scorer,n_seeds,mean_c_auc,std_c_auc,mean_r_auc,std_r_auc,"
                          "mean_p_auc,std_p_auc,mean_in_forg_der,std_in_forg_der,"
                          "mean_forg_out_der,std_forg_out_der\n";
  for (const AggregateRow& a : record.aggregate)
    aggregate += a.scorer + "," + std::to_string(a.n_seeds) + "," + cell(a.mean_c_auc) + "," +
                 cell(a.std_c_auc) + "," + cell(a.mean_r_auc) + "," + cell(a.std_r_auc) + "," +
                 cell(a.mean_p_auc) + "," + cell(a.std_p_auc) + "," + cell(a.mean_in_forg_der) +
                 "," + cell(a.std_in_forg_der) + "," + cell(a.mean_forg_out_der) + "," +
                 cell(a.std_forg_out_der) + "\n";

  std::string cl_aggregate = "n_seeds,mean_avg_accuracy,std_avg_accuracy,"
                             "mean_avg_forgetting,std_avg_forgetting\n";
  cl_aggregate += std::to_string(record.acc_aggregate.n_seeds) + "," +
                  cell(record.acc_aggregate.mean_avg_accuracy) + "," +
                  cell(record.acc_aggregate.std_avg_accuracy) + "," +
                  cell(record.acc_aggregate.mean_avg_forgetting) + "," +
                  cell(record.acc_aggregate.std_avg_forgetting) + "\n";

  // Per-stage across-seed mean trajectories, shared between the CSV and the
  // charts so the two always agree.
  struct NamedTraj {
    std::string metric;
    std::vector<Trajectory> trajs;
    int stages;
  };
  const std::pair<const char*, std::optional<double> MetricRow::*> kNdMetrics[] = {
      {"c_auc", &MetricRow::c_auc},
      {"r_auc", &MetricRow::r_auc},
      {"p_auc", &MetricRow::p_auc},
      {"in_out_aupr", &MetricRow::in_out_aupr},
      {"in_out_der", &MetricRow::in_out_der},
      {"in_forg_der", &MetricRow::in_forg_der},
      {"forg_out_der", &MetricRow::forg_out_der},
  };
  std::vector<NamedTraj> all;
  for (const auto& [name, field] : kNdMetrics) {
    NamedTraj nt;
    nt.metric = name;
    nt.stages = T - 1;
    for (ScorerKind kind : record.config.scorers) {
      Trajectory tr;
      tr.scorer = scorer_name(kind);
      for (int t = 0; t < T - 1; ++t) {
        std::vector<std::optional<double>> vals;
        for (const SeedRun& sr : record.seed_runs) {
          if (sr.failed) continue;
          for (const MetricRow& r : sr.metrics)
            if (r.stage == t && r.scorer == tr.scorer) vals.push_back(r.*field);
        }
        tr.values.push_back(mean_defined(vals));
      }
      nt.trajs.push_back(std::move(tr));
    }
    all.push_back(std::move(nt));
  }
  {
    NamedTraj nt;
    nt.metric = "avg_accuracy";
    nt.stages = T;
    Trajectory tr;
    tr.scorer = "cl";
    for (int t = 0; t < T; ++t) {
      std::vector<std::optional<double>> vals;
      for (const SeedRun& sr : record.seed_runs) {
        if (sr.failed || static_cast<size_t>(t) >= sr.accuracy.size()) continue;
        const std::vector<double>& row = sr.accuracy[static_cast<size_t>(t)];
        double sum = 0.0;
        for (double v : row) sum += v;
        vals.push_back(row.empty() ? std::optional<double>()
                                   : std::optional<double>(sum / static_cast<double>(row.size())));
      }
      tr.values.push_back(mean_defined(vals));
    }
    nt.trajs.push_back(std::move(tr));
    all.push_back(std::move(nt));
  }

  std::string trajectories = "metric,scorer,stage,value\n";
  for (const NamedTraj& nt : all)
    for (const Trajectory& tr : nt.trajs)
      for (int t = 0; t < nt.stages; ++t) {
        const std::optional<double>& v = tr.values[static_cast<size_t>(t)];
        trajectories += nt.metric + "," + tr.scorer + "," + std::to_string(t) + "," +
                        (v ? f6(*v) : "nan") + "\n";
      }

  write_file(out_dir + "/metrics.csv", metrics);
  write_file(out_dir + "/summary.csv", summary);
  write_file(out_dir + "/aggregate.csv", aggregate);
  write_file(out_dir + "/accuracy.csv", accuracy);
  write_file(out_dir + "/cl_summary.csv", cl_summary);
  write_file(out_dir + "/cl_aggregate.csv", cl_aggregate);
  write_file(out_dir + "/feature_stats.csv", features);
  write_file(out_dir + "/stage_reports.csv", stage_reports);
  write_file(out_dir + "/calibration.csv", calibration);
  write_file(out_dir + "/failures.csv", failures);
  write_file(out_dir + "/trajectories.csv", trajectories);
  for (const NamedTraj& nt : all)
    write_file(out_dir + "/plots/" + nt.metric + ".svg", render_svg(nt.metric, nt.trajs, nt.stages));
}

}  // namespace cnd
