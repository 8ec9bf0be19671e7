#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cnd/tape.hpp"

namespace cnd {

enum class Setting { MultiHead, SharedHead };

/// Dense layer computing x * W (+ b), optionally followed by ReLU.
struct DenseLayer {
  Tensor weight;  // [in x out]
  Tensor bias;    // [1 x out]
  bool relu_after = true;
};

/// Classification head. The weight's column j is the prototype of the j-th
/// class of this head; class_ids maps columns to global class ids.
struct Head {
  Tensor weight;  // [feature_dim x classes]
  std::optional<Tensor> bias;  // [1 x classes]
  bool normalized = false;     // unit-norm prototypes at forward time
  std::vector<int> class_ids;
};

struct ModelConfig {
  int input_dim = 16;
  std::vector<int> hidden_dims = {64, 64};
  int feature_dim = 32;
  bool head_bias = false;
  bool normalized_head = false;
};

/// Feature extractor (hidden layers with ReLU, then a linear projection to
/// feature space) plus one head per stage (multi-head) or one growing head
/// (shared-head).
struct Model {
  ModelConfig config;
  Setting setting = Setting::MultiHead;
  std::vector<DenseLayer> layers;
  std::vector<Head> heads;

  int num_heads() const { return static_cast<int>(heads.size()); }
};

/// A deep copy of the model as it stood right after a stage finished.
struct ModelSnapshot {
  Model model;
  int stage = -1;
};

/// Fresh model with no heads. Weights and biases are drawn uniformly from
/// [-sqrt(1/fan_in), sqrt(1/fan_in)], row by row, from a stream seeded by
/// `seed`.
Model make_model(const ModelConfig& cfg, Setting setting, uint64_t seed);

/// Multi-head: appends a new head over `class_ids`. Shared-head: appends
/// columns for `class_ids` to the single head, leaving existing columns
/// bit-unchanged (the head is created on first call). Duplicate global ids
/// are a ConfigError.
void add_stage_head(Model& m, const std::vector<int>& class_ids, uint64_t seed);

/// All trainable tensors: feature layers first, then heads in stage order
/// (within each: weight, then bias if present). The order is the
/// declaration order used by the checkpoint format.
std::vector<Tensor*> trainable_params(Model& m);

/// Tensors of the feature extractor only.
std::vector<Tensor*> feature_params(Model& m);

/// Tensors of one head.
std::vector<Tensor*> head_params(Model& m, int head);

// ---- plain (tape-free) evaluation ----------------------------------------

/// Post-activation output of every layer; back() is the feature matrix.
std::vector<Mat> eval_all_layers(const Model& m, const Mat& x);

/// Feature matrix [m x feature_dim].
Mat features_eval(const Model& m, const Mat& x);

/// Logits of one head on already-computed features.
Mat head_logits_eval(const Model& m, const Mat& features, int head);

/// Predicted global class ids for each row of x under one head
/// (the only head for shared-head models). Ties break to the lowest
/// column index.
std::vector<int> predict(const Model& m, const Mat& x, int head);

// ---- taped evaluation ------------------------------------------------------

/// Forward pass whose parameters are watched leaves (training mode).
/// dropout > 0 draws one mask per hidden activation from `rng`.
VarId features_train(Tape& t, Model& m, VarId x, double dropout, Rng& rng);
VarId head_logits_train(Tape& t, Model& m, VarId features, int head);

/// Forward pass whose parameters enter as constants: gradients flow only
/// to the input. Used for input-gradient scores.
VarId features_frozen(Tape& t, const Model& m, VarId x);
VarId head_logits_frozen(Tape& t, const Model& m, VarId features, int head);

/// Gradient of the per-row cross entropy sum (logits scaled by
/// 1/temperature) with respect to the input rows. Model parameters are
/// untouched.
Mat input_gradient_ce(const Model& m, const Mat& x, int head, const std::vector<int>& labels,
                      double temperature);

// ---- checkpoints -----------------------------------------------------------

/// Binary checkpoint, little-endian. Layout:
///   magic "CNDMODEL" | u32 version=1 | u8 setting | u32 input_dim
///   | u32 feature_dim | u32 n_layers | per layer {u32 in, u32 out, u8 relu}
///   | u32 n_heads | per head {u32 classes, u8 normalized, u8 has_bias,
///     i32 class_ids[classes]} | i32 stage
///   | parameter arrays as f64, row-major, in trainable_params order.
void save_checkpoint(const Model& m, int stage, const std::string& path);
std::pair<Model, int> load_checkpoint(const std::string& path);

}  // namespace cnd
