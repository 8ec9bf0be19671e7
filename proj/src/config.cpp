#include "cnd/config.hpp"

#include <fstream>
#include <sstream>

#include "json_util.hpp"

namespace cnd {

namespace {

using jsonutil::ObjectReader;
using jsonutil::json;
using jsonutil::mat_from_json;
using jsonutil::mat_json;
using jsonutil::parse_json;

std::string regime_name(Regime r) {
  return r == Regime::SameDomain ? "same_domain" : "disjoint_domain";
}

Regime regime_from_string(const std::string& s) {
  if (s == "same_domain") return Regime::SameDomain;
  if (s == "disjoint_domain") return Regime::DisjointDomain;
  throw ConfigError("unknown regime '" + s + "'");
}

std::string setting_name(Setting s) {
  return s == Setting::MultiHead ? "multi_head" : "shared_head";
}

Setting setting_from_string(const std::string& s) {
  if (s == "multi_head") return Setting::MultiHead;
  if (s == "shared_head") return Setting::SharedHead;
  throw ConfigError("unknown setting '" + s + "'");
}

void read_sequence(const json& j, SequenceSpec& s) {
  ObjectReader r(j, "sequence");
  r.read_int("num_stages", s.num_stages);
  r.read_int("classes_per_stage", s.classes_per_stage);
  r.read_int("input_dim", s.input_dim);
  r.read_int("train_per_class", s.train_per_class);
  r.read_int("val_per_class", s.val_per_class);
  r.read_int("test_per_class", s.test_per_class);
  std::string regime = regime_name(s.regime);
  r.read_string("regime", regime);
  s.regime = regime_from_string(regime);
  r.read_double("class_separation", s.class_separation);
  r.read_int("ood_classes", s.ood_classes);
  r.read_int("ood_per_class", s.ood_per_class);
  r.read_double("ood_offset", s.ood_offset);
  r.finish();
}

void read_model(const json& j, ModelConfig& m) {
  ObjectReader r(j, "model");
  r.read_int_list("hidden_dims", m.hidden_dims);
  r.read_int("feature_dim", m.feature_dim);
  r.read_bool("head_bias", m.head_bias);
  r.read_bool("normalized_head", m.normalized_head);
  r.finish();
}

void read_trainer(const json& j, TrainerConfig& t) {
  ObjectReader r(j, "trainer");
  r.read_double("lr", t.lr);
  r.read_int("batch_size", t.batch_size);
  r.read_int("max_epochs", t.max_epochs);
  r.read_int("early_stop_patience", t.early_stop_patience);
  r.read_double("weight_decay", t.weight_decay);
  r.read_double("dropout", t.dropout);
  r.read_double("mas_lambda", t.mas_lambda);
  r.read_double("lwf_lambda", t.lwf_lambda);
  r.read_double("lwf_temperature", t.lwf_temperature);
  r.read_int("buffer_per_class", t.buffer_per_class);
  r.read_double("ssil_kd_temperature", t.ssil_kd_temperature);
  r.read_bool("ssil_replay_kd_only", t.ssil_replay_kd_only);
  r.finish();
}

void read_vae(const json& j, VaeConfig& v) {
  ObjectReader r(j, "vae");
  r.read_int("hidden_dim", v.hidden_dim);
  r.read_int("latent_dim", v.latent_dim);
  r.read_bool("on_features", v.on_features);
  r.read_double("sigma2", v.sigma2);
  r.read_double("lr", v.lr);
  r.read_int("epochs", v.epochs);
  r.read_int("batch_size", v.batch_size);
  r.finish();
}

bool has_scorer(const ExperimentConfig& cfg, ScorerKind k) {
  for (ScorerKind s : cfg.scorers)
    if (s == k) return true;
  return false;
}

json config_json(const ExperimentConfig& cfg, bool run_keys) {
  json j;
  j["sequence"] = {{"num_stages", cfg.sequence.num_stages},
                   {"classes_per_stage", cfg.sequence.classes_per_stage},
                   {"input_dim", cfg.sequence.input_dim},
                   {"train_per_class", cfg.sequence.train_per_class},
                   {"val_per_class", cfg.sequence.val_per_class},
                   {"test_per_class", cfg.sequence.test_per_class},
                   {"regime", regime_name(cfg.sequence.regime)},
                   {"class_separation", cfg.sequence.class_separation},
                   {"ood_classes", cfg.sequence.ood_classes},
                   {"ood_per_class", cfg.sequence.ood_per_class},
                   {"ood_offset", cfg.sequence.ood_offset}};
  j["model"] = {{"hidden_dims", cfg.model.hidden_dims},
                {"feature_dim", cfg.model.feature_dim},
                {"head_bias", cfg.model.head_bias},
                {"normalized_head", cfg.model.normalized_head}};
  j["setting"] = setting_name(cfg.setting);
  j["method"] = method_name(cfg.method);
  j["trainer"] = {{"lr", cfg.trainer.lr},
                  {"batch_size", cfg.trainer.batch_size},
                  {"max_epochs", cfg.trainer.max_epochs},
                  {"early_stop_patience", cfg.trainer.early_stop_patience},
                  {"weight_decay", cfg.trainer.weight_decay},
                  {"dropout", cfg.trainer.dropout},
                  {"mas_lambda", cfg.trainer.mas_lambda},
                  {"lwf_lambda", cfg.trainer.lwf_lambda},
                  {"lwf_temperature", cfg.trainer.lwf_temperature},
                  {"buffer_per_class", cfg.trainer.buffer_per_class},
                  {"ssil_kd_temperature", cfg.trainer.ssil_kd_temperature},
                  {"ssil_replay_kd_only", cfg.trainer.ssil_replay_kd_only}};
  json scorers = json::array();
  for (ScorerKind s : cfg.scorers) scorers.push_back(scorer_name(s));
  j["scorers"] = std::move(scorers);
  j["vae"] = {{"hidden_dim", cfg.vae.hidden_dim},
              {"latent_dim", cfg.vae.latent_dim},
              {"on_features", cfg.vae.on_features},
              {"sigma2", cfg.vae.sigma2},
              {"lr", cfg.vae.lr},
              {"epochs", cfg.vae.epochs},
              {"batch_size", cfg.vae.batch_size}};
  j["vae_samples"] = cfg.vae_samples;
  j["b2_nth"] = cfg.b2_nth;
  j["mahalanobis_ridge"] = cfg.mahalanobis_ridge;
  if (run_keys) {
    j["seeds"] = cfg.seeds;
    j["output_dir"] = cfg.output_dir;
  }
  j["master_seed"] = cfg.master_seed;
  return j;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
  const json j = parse_json(text, "config");
  ExperimentConfig cfg;
  ObjectReader r(j, "");
  if (const json* s = r.object("sequence")) read_sequence(*s, cfg.sequence);
  if (const json* m = r.object("model")) read_model(*m, cfg.model);
  std::string setting = setting_name(cfg.setting);
  r.read_string("setting", setting);
  cfg.setting = setting_from_string(setting);
  std::string method = method_name(cfg.method);
  r.read_string("method", method);
  cfg.method = method_from_string(method);
  if (const json* t = r.object("trainer")) read_trainer(*t, cfg.trainer);
  std::vector<std::string> scorers;
  for (ScorerKind s : cfg.scorers) scorers.push_back(scorer_name(s));
  r.read_string_list("scorers", scorers);
  cfg.scorers.clear();
  for (const std::string& s : scorers) cfg.scorers.push_back(scorer_from_string(s));
  if (const json* v = r.object("vae")) read_vae(*v, cfg.vae);
  r.read_int("vae_samples", cfg.vae_samples);
  r.read_int("b2_nth", cfg.b2_nth);
  r.read_double("mahalanobis_ridge", cfg.mahalanobis_ridge);
  r.read_int("seeds", cfg.seeds);
  r.read_u64("master_seed", cfg.master_seed);
  r.read_string("output_dir", cfg.output_dir);
  r.finish();
  validate_config(cfg);
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string config_to_json(const ExperimentConfig& cfg, bool run_keys) {
  return config_json(cfg, run_keys).dump(2) + "\n";
}

uint64_t config_hash(const ExperimentConfig& cfg) {
  return fnv1a64(config_to_json(cfg, false));
}

void validate_config(ExperimentConfig& cfg) {
  const SequenceSpec& s = cfg.sequence;
  if (s.num_stages < 2) throw ConfigError("sequence.num_stages must be at least 2");
  if (s.classes_per_stage < 2) throw ConfigError("sequence.classes_per_stage must be at least 2");
  if (s.input_dim < 1) throw ConfigError("sequence.input_dim must be positive");
  if (s.train_per_class < 1 || s.val_per_class < 1 || s.test_per_class < 1)
    throw ConfigError("sequence per-class split sizes must be positive");
  if (s.class_separation <= 0.0) throw ConfigError("sequence.class_separation must be positive");
  if (s.ood_classes < 0 || s.ood_per_class < 0)
    throw ConfigError("sequence ood counts must be nonnegative");
  if (s.regime == Regime::DisjointDomain && s.input_dim < s.num_stages)
    throw ConfigError("disjoint_domain needs sequence.input_dim >= sequence.num_stages");

  if (cfg.model.feature_dim < 1) throw ConfigError("model.feature_dim must be positive");
  for (int h : cfg.model.hidden_dims)
    if (h < 1) throw ConfigError("model.hidden_dims entries must be positive");

  const TrainerConfig& t = cfg.trainer;
  if (t.lr <= 0.0) throw ConfigError("trainer.lr must be positive");
  if (t.batch_size < 1) throw ConfigError("trainer.batch_size must be at least 1");
  if (t.max_epochs < 0) throw ConfigError("trainer.max_epochs must be nonnegative");
  if (t.early_stop_patience < 0)
    throw ConfigError("trainer.early_stop_patience must be nonnegative");
  if (t.weight_decay < 0.0) throw ConfigError("trainer.weight_decay must be nonnegative");
  if (t.dropout < 0.0 || t.dropout >= 1.0) throw ConfigError("trainer.dropout must lie in [0, 1)");
  if (t.mas_lambda < 0.0) throw ConfigError("trainer.mas_lambda must be nonnegative");
  if (t.lwf_lambda < 0.0) throw ConfigError("trainer.lwf_lambda must be nonnegative");
  if (t.lwf_temperature <= 0.0) throw ConfigError("trainer.lwf_temperature must be positive");
  if (t.buffer_per_class < 1) throw ConfigError("trainer.buffer_per_class must be at least 1");
  if (t.ssil_kd_temperature <= 0.0)
    throw ConfigError("trainer.ssil_kd_temperature must be positive");

  if (cfg.scorers.empty()) throw ConfigError("scorers must not be empty");
  for (size_t i = 0; i < cfg.scorers.size(); ++i)
    for (size_t k = i + 1; k < cfg.scorers.size(); ++k)
      if (cfg.scorers[i] == cfg.scorers[k])
        throw ConfigError("duplicate scorer '" + scorer_name(cfg.scorers[i]) + "'");

  if ((cfg.method == Method::Er || cfg.method == Method::Ssil) &&
      cfg.setting != Setting::SharedHead)
    throw ConfigError(method_name(cfg.method) + " requires the shared-head setting");

  const bool prototype_scorer = has_scorer(cfg, ScorerKind::B1) || has_scorer(cfg, ScorerKind::B2);
  if (prototype_scorer) {
    if (cfg.model.head_bias)
      throw ConfigError("b1/b2 need a bias-free head (model.head_bias = false)");
    if (cfg.setting == Setting::SharedHead) cfg.model.normalized_head = true;
  }
  if (has_scorer(cfg, ScorerKind::B2) && (cfg.b2_nth < 1 || cfg.b2_nth > s.classes_per_stage))
    throw ConfigError("b2_nth must lie in [1, classes_per_stage]");

  if (has_scorer(cfg, ScorerKind::Odin) && (s.ood_classes < 1 || s.ood_per_class < 1))
    throw ConfigError("odin calibration needs a nonempty ood set");

  if (has_scorer(cfg, ScorerKind::Vae)) {
    const VaeConfig& v = cfg.vae;
    if (v.hidden_dim < 1 || v.latent_dim < 1) throw ConfigError("vae dims must be positive");
    if (v.sigma2 <= 0.0) throw ConfigError("vae.sigma2 must be positive");
    if (v.lr <= 0.0) throw ConfigError("vae.lr must be positive");
    if (v.epochs < 0) throw ConfigError("vae.epochs must be nonnegative");
    if (v.batch_size < 1) throw ConfigError("vae.batch_size must be at least 1");
    if (cfg.vae_samples < 1) throw ConfigError("vae_samples must be at least 1");
  }

  if (cfg.mahalanobis_ridge < 0.0) throw ConfigError("mahalanobis_ridge must be nonnegative");
  if (cfg.seeds < 1) throw ConfigError("seeds must be at least 1");
  if (cfg.output_dir.empty()) throw ConfigError("output_dir must not be empty");

  cfg.model.input_dim = s.input_dim;
  cfg.vae.input_dim = cfg.vae.on_features ? cfg.model.feature_dim : s.input_dim;
}

std::string scorer_context_to_json(const ScorerContext& ctx) {
  json j;
  j["odin"] = {{"epsilon", ctx.odin.epsilon}, {"temperature", ctx.odin.temperature}};
  json mahala;
  mahala["fitted"] = ctx.mahala.fitted;
  mahala["ridge"] = ctx.mahala.ridge;
  mahala["intercept"] = ctx.mahala.intercept;
  mahala["weights"] = ctx.mahala.weights;
  mahala["layer_index"] = ctx.mahala.layer_index;
  json layers = json::array();
  for (const LayerStats& ls : ctx.mahala.layers) {
    json l;
    l["class_ids"] = ls.class_ids;
    l["count"] = ls.count;
    l["means"] = mat_json(ls.means);
    l["scatter"] = mat_json(ls.scatter);
    layers.push_back(std::move(l));
  }
  mahala["layers"] = std::move(layers);
  j["mahalanobis"] = std::move(mahala);
  return j.dump(2) + "\n";
}

void scorer_context_from_json(const std::string& text, ScorerContext& ctx) {
  const json j = parse_json(text, "scorer context");
  ObjectReader r(j, "");
  if (const json* o = r.object("odin")) {
    ObjectReader ro(*o, "odin");
    ro.read_double("epsilon", ctx.odin.epsilon);
    ro.read_double("temperature", ctx.odin.temperature);
    ro.finish();
  }
  if (const json* m = r.object("mahalanobis")) {
    ObjectReader rm(*m, "mahalanobis");
    MahalanobisState st;
    rm.read_bool("fitted", st.fitted);
    rm.read_double("ridge", st.ridge);
    rm.read_double("intercept", st.intercept);
    rm.read_double_list("weights", st.weights);
    rm.read_int_list("layer_index", st.layer_index);
    if (const json* jls = rm.any("layers")) {
      if (!jls->is_array()) throw ConfigError("mahalanobis.layers must be an array");
      for (const json& l : *jls) {
        ObjectReader rl(l, "mahalanobis.layers");
        LayerStats ls;
        rl.read_int_list("class_ids", ls.class_ids);
        rl.read_size("count", ls.count);
        if (const json* jm = rl.any("means"))
          ls.means = mat_from_json(*jm, "mahalanobis.layers.means");
        if (const json* js = rl.any("scatter"))
          ls.scatter = mat_from_json(*js, "mahalanobis.layers.scatter");
        rl.finish();
        if (st.fitted && ls.count > 0) ls.update_inverse(st.ridge);
        st.layers.push_back(std::move(ls));
      }
    }
    rm.finish();
    ctx.mahala = std::move(st);
  }
  r.finish();
}

}  // namespace cnd
