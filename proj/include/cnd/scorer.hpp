#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cnd/dataset.hpp"
#include "cnd/model.hpp"
#include "cnd/vae.hpp"

namespace cnd {

/// Novelty scores follow one convention everywhere: higher means more
/// familiar. Softmax/Odin/B1/B2 read the classifier head(s); Mahalanobis and
/// Vae read only the feature extractor.
enum class ScorerKind { Softmax, Odin, Mahalanobis, Vae, B1, B2 };

ScorerKind scorer_from_string(const std::string& name);
std::string scorer_name(ScorerKind kind);

struct OdinParams {
  double epsilon = 0.0;
  double temperature = 1.0;
};

/// Class-conditional Gaussian statistics of one probed layer. Means and the
/// pooled within-class scatter accumulate class by class; a class added at
/// stage k keeps the statistics computed from stage-k features forever, even
/// though the layer itself keeps moving. That staleness is deliberate: the
/// benchmark measures it.
struct LayerStats {
  Mat means;                   // one row per class, insertion order
  std::vector<int> class_ids;  // global id of each row
  Mat scatter;                 // accumulated within-class scatter
  size_t count = 0;            // samples behind `scatter`
  Mat sigma_inv;               // cached inverse of scatter/count + ridge*I

  /// Recomputes sigma_inv for the given ridge. NumericError if
  /// scatter/count + ridge*I is not positive definite.
  void update_inverse(double ridge);
};

/// Folds one class's feature rows (at least 2) into the stats.
/// ConfigError if the class is already present.
void accumulate_class(LayerStats& ls, int class_id, const Mat& rows);

/// -min over classes of (f - mu_c)^T sigma_inv (f - mu_c). Zero exactly when
/// f hits a class mean; more negative further out. StateError before any
/// class is accumulated or before update_inverse.
double layer_score(const LayerStats& ls, const Vec& f);

struct MahalanobisState {
  std::vector<int> layer_index;    // entries of eval_all_layers to probe
  std::vector<LayerStats> layers;  // parallel to layer_index
  std::vector<double> weights;     // combiner weight per layer
  double intercept = 0.0;          // combiner bias; not part of the score
  double ridge = 1e-3;
  bool fitted = false;
};

/// The probed layers for a model: the last hidden activation and the feature
/// projection (just the features when there is no hidden layer).
std::vector<int> mahalanobis_layer_indices(const Model& m);

/// Stage-wise fit. Classes seen for the first time get their mean and their
/// scatter contribution computed from `available` (current stage data plus
/// any replay content); classes already in the state are left untouched.
/// Then the per-layer score combiner is refit: a ridge-stabilized logistic
/// regression (deterministic Newton iterations) separating `available`
/// (positive) from `ood_calibration` (negative) on the per-layer scores.
/// Requires at least 2 samples for every new class (ValueError).
void fit_mahalanobis(const Model& m, const std::vector<LabeledExample>& available,
                     const std::vector<LabeledExample>& ood_calibration,
                     MahalanobisState& state);

/// Everything a scorer may need besides the model. Fit/calibration state
/// lives here so scoring itself never mutates anything.
struct ScorerContext {
  /// Head to score with. Unset means no task oracle: head-dependent scorers
  /// take the maximum score over all heads.
  std::optional<int> active_head;
  OdinParams odin;
  MahalanobisState mahala;
  const VaeModel* vae = nullptr;
  /// B2 perturbs toward the n-th closest prototype by cosine.
  int b2_nth = 2;
  int vae_samples = 8;
  uint64_t score_seed = 0;
};

/// Scores one sample. Pure: neither the model nor the context changes, so
/// calls are safe to run in parallel and independent of call order.
///  - Softmax: top class probability, in [1/k, 1].
///  - Odin: top probability at temperature T after nudging x by
///    -epsilon * sign of the input gradient of the scaled cross entropy at
///    the predicted class. epsilon=0, T=1 reproduces Softmax bit for bit.
///  - Mahalanobis: weighted sum of layer_score over the probed layers
///    (StateError before fit_mahalanobis).
///  - Vae: Monte-Carlo evidence bound, vae_samples seeded draws
///    (StateError when ctx.vae is null).
///  - B1: cosine between the normalized features and the probability-weighted
///    sum of normalized prototypes, in [-1, 1]; exactly -1 for zero features.
///    ConfigError on a biased head.
///  - B2: B1 plus the cosine margin (predicted minus n-th closest class)
///    after stepping the features against the cross-entropy gradient toward
///    the n-th closest prototype, computed through the final layer only.
///    ConfigError on a biased head or a head with fewer than 2 classes.
double score_sample(const Model& m, ScorerKind kind, const Vec& x, const ScorerContext& ctx);

/// Tunes whatever `kind` needs, on training data of classes the model has
/// seen plus the held-out calibration set; evaluation Out data never enters.
///  - Odin: exhaustive grid over epsilon {0, 5e-4, 1e-3, 2e-3, 5e-3} and
///    T {1, 10, 100, 1000}, maximizing in-vs-calibration AUC; earliest grid
///    point wins ties, so the Softmax-equivalent corner is the default.
///    In-side samples are scored with their own stage's head when the model
///    is multi-head; calibration samples with the no-oracle rule.
///  - Mahalanobis: fit_mahalanobis.
///  - Softmax, B1, B2, Vae: nothing to tune.
void calibrate_scorer(ScorerKind kind, const Model& m,
                      const std::vector<LabeledExample>& in_train,
                      const std::vector<LabeledExample>& ood_calibration, ScorerContext& ctx);

}  // namespace cnd
