#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "cnd/harness.hpp"
#include "cnd/rng.hpp"

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw cnd::ConfigError("cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::string hash_hex(uint64_t h) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "0x%016" PRIx64, h);
  return buf;
}

int count_failed(const cnd::RunRecord& rec) {
  int n = 0;
  for (const cnd::SeedRun& sr : rec.seed_runs) n += sr.failed ? 1 : 0;
  return n;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continual novelty detection benchmark"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out;
  int seeds = -1;
  int jobs = 1;

  auto add_common = [&](CLI::App* sub, bool with_out) {
    sub->add_option("--config", config_path, "input file")->required();
    if (with_out) sub->add_option("--out", out, "output destination");
  };

  CLI::App* gen = app.add_subcommand("generate-data",
                                     "export the sequence a run would train on as one CSV pool");
  add_common(gen, true);

  CLI::App* run = app.add_subcommand("run", "run an experiment and write record plus report");
  add_common(run, true);
  run->add_option("--seeds", seeds, "override the number of seeds");
  run->add_option("--jobs", jobs, "parallel seed workers");

  CLI::App* sweep = app.add_subcommand("sweep", "run a config grid and write a leaderboard");
  add_common(sweep, true);
  sweep->add_option("--jobs", jobs, "parallel seed workers per grid point");

  CLI::App* report = app.add_subcommand(
      "report", "emit CSV tables and SVG plots from a record (or a config's saved record)");
  add_common(report, true);

  CLI::App* validate = app.add_subcommand("validate-config", "parse and validate a config");
  add_common(validate, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand(gen)) {
      const cnd::ExperimentConfig cfg = cnd::load_config(config_path);
      cnd::SequenceSpec spec = cfg.sequence;
      spec.seed = cnd::derive_seed(cnd::derive_seed(cfg.master_seed, 0), cnd::kSeedData);
      const cnd::Sequence seq = cnd::generate_sequence(spec);
      std::vector<cnd::LabeledExample> pool;
      for (const auto& stage : seq.stages) {
        pool.insert(pool.end(), stage.train.begin(), stage.train.end());
        pool.insert(pool.end(), stage.val.begin(), stage.val.end());
        pool.insert(pool.end(), stage.test.begin(), stage.test.end());
      }
      pool.insert(pool.end(), seq.ood_calibration.begin(), seq.ood_calibration.end());
      const std::string path = out.empty() ? cfg.output_dir + "/data.csv" : out;
      cnd::export_csv(pool, spec.input_dim, path);
      std::printf("%s (%zu rows)\n", path.c_str(), pool.size());
    } else if (app.got_subcommand(run)) {
      cnd::ExperimentConfig cfg = cnd::load_config(config_path);
      if (!out.empty()) cfg.output_dir = out;
      if (seeds != -1) cfg.seeds = seeds;
      const cnd::RunRecord rec = cnd::run_experiment(cfg, jobs);
      cnd::write_report(rec, cfg.output_dir);
      std::printf("%s/record.json (%zu seeds, %d failed)\n", cfg.output_dir.c_str(),
                  rec.seed_runs.size(), count_failed(rec));
    } else if (app.got_subcommand(sweep)) {
      cnd::SweepSpec spec = cnd::load_sweep(config_path);
      if (!out.empty()) spec.output_dir = out;
      cnd::run_sweep(spec, jobs);
      std::printf("%s/leaderboard.csv (%zu points)\n", spec.output_dir.c_str(),
                  spec.points.size());
    } else if (app.got_subcommand(report)) {
      const std::string text = slurp(config_path);
      cnd::RunRecord rec;
      std::string dest = out;
      if (text.find("\"config_hash\"") != std::string::npos) {
        rec = cnd::record_from_json(text);
        if (dest.empty()) dest = rec.config.output_dir;
      } else {
        const cnd::ExperimentConfig cfg = cnd::parse_config_text(text);
        rec = cnd::load_record(cfg.output_dir + "/record.json");
        if (dest.empty()) dest = cfg.output_dir;
      }
      cnd::write_report(rec, dest);
      std::printf("%s (%zu seeds, %d failed)\n", dest.c_str(), rec.seed_runs.size(),
                  count_failed(rec));
    } else if (app.got_subcommand(validate)) {
      const cnd::ExperimentConfig cfg = cnd::load_config(config_path);
      std::printf("ok %s\n", hash_hex(cnd::config_hash(cfg)).c_str());
    }
  } catch (const cnd::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const cnd::ParseError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
