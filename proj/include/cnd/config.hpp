#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cnd/dataset.hpp"
#include "cnd/model.hpp"
#include "cnd/scorer.hpp"
#include "cnd/trainer.hpp"
#include "cnd/vae.hpp"

namespace cnd {

/// Everything a full experiment needs. JSON schema mirrors the nesting here;
/// see README for the field list. Three fields are derived, not configured:
/// model.input_dim and vae.input_dim follow the sequence (and the feature
/// dim when the VAE runs on features), and sequence.seed is overwritten per
/// run from master_seed.
struct ExperimentConfig {
  SequenceSpec sequence;
  ModelConfig model;
  Setting setting = Setting::MultiHead;
  Method method = Method::FineTune;
  TrainerConfig trainer;
  std::vector<ScorerKind> scorers = {ScorerKind::Softmax};
  VaeConfig vae;
  int vae_samples = 8;
  int b2_nth = 2;
  double mahalanobis_ridge = 1e-3;
  int seeds = 10;
  uint64_t master_seed = 1234;
  std::string output_dir = "out";
};

/// FNV-1a, 64 bit.
inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Parses the strict JSON schema. Unknown keys anywhere raise ConfigError
/// naming the offending path; malformed JSON raises ParseError; wrong value
/// types raise ConfigError. Fields left out keep their defaults. The result
/// is already resolved and validated (see validate_config).
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);

/// Canonical JSON (sorted keys, 2-space indent, trailing newline). With
/// run_keys=false the output_dir and seeds fields are left out; that string
/// is what config_hash digests, so where results land and how many seeds ran
/// never change a record's identity.
std::string config_to_json(const ExperimentConfig& cfg, bool run_keys = true);

uint64_t config_hash(const ExperimentConfig& cfg);

/// Resolves derived fields and checks cross-field rules:
///  - model/vae input dims synced to the sequence;
///  - er and ssil require the shared-head setting;
///  - b1/b2 require a bias-free head, and under shared-head force the
///    normalized head variant;
///  - b2_nth must land in [1, classes_per_stage] and duplicate scorers are
///    rejected (their report rows would collide);
///  - positivity checks on counts so bad values fail before any compute.
/// Mutates cfg (dim sync, normalized-head forcing) and throws ConfigError.
void validate_config(ExperimentConfig& cfg);

// ---- calibrated scorer state ----------------------------------------------

/// Serializes the fitted, data-dependent parts of a ScorerContext: the odin
/// grid choice and the mahalanobis statistics (per-layer class ids, means,
/// scatter, count, combiner weights, intercept, ridge). The vae pointer,
/// active head and seeds are call-time inputs, not fitted state, and are not
/// included.
std::string scorer_context_to_json(const ScorerContext& ctx);

/// Inverse of scorer_context_to_json. Rebuilds sigma_inv from the stored
/// statistics rather than trusting the file. Throws ParseError on malformed
/// JSON and ConfigError on schema violations.
void scorer_context_from_json(const std::string& text, ScorerContext& ctx);

}  // namespace cnd
