#pragma once

#include <string>
#include <vector>

#include "cnd/dataset.hpp"
#include "cnd/model.hpp"

namespace cnd {

/// How parameters are updated when a new stage arrives.
///   FineTune: plain cross entropy on the new stage.
///   Mas:      cross entropy + importance-weighted quadratic pull toward the
///             previous stage's parameters. Importance is accumulated from
///             the gradient magnitude of the squared logit norm.
///   Lwf:      cross entropy + distillation of the previous model's logits
///             on the new stage's inputs.
///   Er:       replays stored old examples 1:1 with new ones in every
///             minibatch under a single shared-head cross entropy.
///   Ssil:     replay with a separated softmax (each sample's cross entropy
///             is confined to its own stage's class block) plus per-block
///             distillation of the previous model.
enum class Method { FineTune, Mas, Lwf, Er, Ssil };

Method method_from_string(const std::string& name);
std::string method_name(Method m);

struct TrainerConfig {
  double lr = 0.05;
  int batch_size = 32;
  int max_epochs = 100;
  /// Stop after this many consecutive epochs without a strict improvement
  /// of validation accuracy; the best epoch's parameters are restored.
  int early_stop_patience = 10;
  double weight_decay = 0.0;
  double dropout = 0.0;
  double mas_lambda = 0.3;
  double lwf_lambda = 1.0;
  double lwf_temperature = 2.0;
  /// Stored examples per class for Er and Ssil.
  int buffer_per_class = 25;
  double ssil_kd_temperature = 2.0;
  /// Restrict Ssil's distillation to replayed rows (default distills both
  /// new and replayed rows).
  bool ssil_replay_kd_only = false;
};

struct StageReport {
  double train_loss = 0.0;    // mean per-batch objective of the last epoch run
  double val_accuracy = 0.0;  // accuracy of the restored parameters
  int best_epoch = -1;        // epoch whose parameters were kept; -1 if none ran
  int epochs_run = 0;
  std::vector<double> train_curve;  // mean objective per epoch, in epoch order
  std::vector<double> val_curve;    // validation accuracy per epoch
};

/// Class-balanced reservoir of past training examples. Each add_stage call
/// stores at most `per_class` examples of every class it sees, sampled
/// without replacement; earlier stages' entries are never evicted.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(int per_class);
  void add_stage(const std::vector<LabeledExample>& train, Rng& rng);
  const std::vector<LabeledExample>& examples() const { return examples_; }
  bool empty() const { return examples_.empty(); }
  int per_class() const { return per_class_; }

 private:
  int per_class_;
  std::vector<LabeledExample> examples_;
};

/// Importance and anchor values for the quadratic penalty, aligned with
/// trainable_params order. Entries for parameters that grew (a shared head
/// gaining columns) are zero-padded; brand-new parameters get zero
/// importance, so the penalty never touches them.
struct MasState {
  std::vector<Mat> omega;
  std::vector<Mat> anchor;
  bool initialized = false;
};

/// Accumulate importance on `data` into `state` and re-anchor at the
/// model's current parameters. Importance of parameter i grows by the mean
/// over inputs of |d ||logits_head(x)||^2 / d theta_i|, logits taken from
/// `head` (the head of the stage just trained). Called by train_stage after
/// a Mas stage; exposed for tests. Parameters and gradients are unchanged.
void mas_accumulate(Model& m, const std::vector<LabeledExample>& data, int head,
                    MasState& state);

/// Optional inputs; which ones are required depends on the method.
struct TrainInputs {
  /// Model as it was before this stage (teacher). Required by Lwf and Ssil
  /// for every stage after the first.
  const ModelSnapshot* previous = nullptr;
  /// Replay storage. Required by Er and Ssil (may be empty at stage 0).
  const ReplayBuffer* buffer = nullptr;
  /// Penalty state. Required by Mas.
  MasState* mas = nullptr;
  /// Class ids per stage trained so far (including this one). Required by
  /// Ssil to locate each stage's column block inside the shared head.
  const std::vector<std::vector<int>>* stage_classes = nullptr;
};

/// Fraction of `data` whose label matches the head-restricted prediction.
double head_accuracy(const Model& m, const std::vector<LabeledExample>& data, int head);

/// Train the model's current stage. The head for `stage` must already have
/// been added. Epoch order, minibatch composition and replay draws are all
/// derived from `seed`, so a rerun is bit-identical. Validation accuracy
/// (active head under MultiHead, the full shared head otherwise) drives
/// early stopping. Er and Ssil require a SharedHead model.
StageReport train_stage(Model& m, Method method, const TrainerConfig& cfg, int stage,
                        const std::vector<LabeledExample>& train,
                        const std::vector<LabeledExample>& val, uint64_t seed,
                        const TrainInputs& inputs = {});

}  // namespace cnd
