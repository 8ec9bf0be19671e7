#include "cnd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "cnd/tape.hpp"

namespace cnd {

namespace {

void validate_config(const TrainerConfig& c) {
  if (c.lr <= 0.0) throw ConfigError("lr must be positive");
  if (c.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (c.max_epochs < 0) throw ConfigError("max_epochs must be nonnegative");
  if (c.early_stop_patience < 0) throw ConfigError("early_stop_patience must be nonnegative");
  if (c.weight_decay < 0.0) throw ConfigError("weight_decay must be nonnegative");
  if (c.dropout < 0.0 || c.dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
  if (c.mas_lambda < 0.0) throw ConfigError("mas_lambda must be nonnegative");
  if (c.lwf_lambda < 0.0) throw ConfigError("lwf_lambda must be nonnegative");
  if (c.lwf_temperature <= 0.0) throw ConfigError("lwf_temperature must be positive");
  if (c.buffer_per_class < 1) throw ConfigError("buffer_per_class must be at least 1");
  if (c.ssil_kd_temperature <= 0.0) throw ConfigError("ssil_kd_temperature must be positive");
}

std::map<int, int> head_columns(const Head& h) {
  std::map<int, int> col;
  for (size_t j = 0; j < h.class_ids.size(); ++j)
    col[h.class_ids[j]] = static_cast<int>(j);
  return col;
}

int column_of(const std::map<int, int>& col, int label) {
  const auto it = col.find(label);
  if (it == col.end())
    throw IndexError("class id " + std::to_string(label) + " is not served by this head");
  return it->second;
}

// Same stabilized form as the taped softmax, for teacher targets.
Mat softened_probs(const Mat& logits, double temperature) {
  Mat p(logits.rows(), logits.cols());
  for (int i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    Eigen::ArrayXd e = ((logits.row(i).array() - mx) / temperature).exp();
    p.row(i) = (e / e.sum()).matrix();
  }
  return p;
}

std::vector<Mat> copy_values(const std::vector<Tensor*>& params) {
  std::vector<Mat> out;
  out.reserve(params.size());
  for (const Tensor* t : params) out.push_back(t->value);
  return out;
}

// Grow the state to the current parameter list. Feature entries must match
// exactly; head entries may gain columns (shared head growth) and brand-new
// tail entries (new heads) start with zero importance. Returns which entries
// were created just now, so the penalty can skip them.
std::vector<bool> align_state(MasState& st, const std::vector<Tensor*>& params,
                              size_t n_feature) {
  if (st.omega.size() != st.anchor.size())
    throw StateError("importance state is internally inconsistent");
  if (st.omega.size() > params.size())
    throw DimensionError("importance state has more entries than the model");
  std::vector<bool> is_new(params.size(), false);
  for (size_t i = 0; i < st.omega.size(); ++i) {
    const Mat& v = params[i]->value;
    Mat& o = st.omega[i];
    Mat& a = st.anchor[i];
    if (o.rows() == v.rows() && o.cols() == v.cols()) continue;
    const bool head_growth = i >= n_feature && o.rows() == v.rows() && o.cols() < v.cols();
    if (!head_growth) throw DimensionError("importance state does not match the model");
    Mat grown_o = Mat::Zero(v.rows(), v.cols());
    grown_o.leftCols(o.cols()) = o;
    o = std::move(grown_o);
    Mat grown_a = v;  // new columns anchor where they are: zero pull
    grown_a.leftCols(a.cols()) = a;
    a = std::move(grown_a);
  }
  for (size_t i = st.omega.size(); i < params.size(); ++i) {
    const Mat& v = params[i]->value;
    st.omega.push_back(Mat::Zero(v.rows(), v.cols()));
    st.anchor.push_back(v);
    is_new[i] = true;
  }
  return is_new;
}

struct Batch {
  Mat x;                        // new rows first, then replay rows
  std::vector<int> labels;     // global class ids, parallel to x's rows
  std::vector<int> stages;     // source stage per row (replay rows differ)
  int n_new = 0;
};

Batch assemble_batch(const std::vector<LabeledExample>& train,
                     const std::vector<size_t>& order, size_t begin, size_t end,
                     const ReplayBuffer* buffer, bool with_replay, int stage, Rng& rng) {
  Batch b;
  b.n_new = static_cast<int>(end - begin);
  std::vector<const LabeledExample*> rows;
  rows.reserve(static_cast<size_t>(2 * b.n_new));
  for (size_t i = begin; i < end; ++i) rows.push_back(&train[order[i]]);
  if (with_replay && buffer != nullptr && !buffer->empty()) {
    const auto& pool = buffer->examples();
    const size_t k = static_cast<size_t>(b.n_new);
    if (pool.size() >= k) {
      for (size_t idx : rng.sample_without_replacement(pool.size(), k))
        rows.push_back(&pool[idx]);
    } else {
      for (size_t i = 0; i < k; ++i)
        rows.push_back(&pool[rng.uniform_int(pool.size())]);
    }
  }
  b.x = Mat(static_cast<int>(rows.size()), rows.front()->x.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    b.x.row(static_cast<int>(i)) = rows[i]->x.transpose();
    b.labels.push_back(rows[i]->label);
    // new rows always belong to the stage being trained; replayed rows keep
    // their own stage so the separated softmax can find their block
    b.stages.push_back(i < static_cast<size_t>(b.n_new) ? stage : rows[i]->stage);
  }
  return b;
}

}  // namespace

Method method_from_string(const std::string& name) {
  if (name == "finetune") return Method::FineTune;
  if (name == "mas") return Method::Mas;
  if (name == "lwf") return Method::Lwf;
  if (name == "er") return Method::Er;
  if (name == "ssil") return Method::Ssil;
  throw ConfigError("unknown method '" + name + "'");
}

std::string method_name(Method m) {
  switch (m) {
    case Method::FineTune: return "finetune";
    case Method::Mas: return "mas";
    case Method::Lwf: return "lwf";
    case Method::Er: return "er";
    case Method::Ssil: return "ssil";
  }
  throw ValueError("unknown method enum value");
}

ReplayBuffer::ReplayBuffer(int per_class) : per_class_(per_class) {
  if (per_class < 1) throw ConfigError("replay buffer capacity must be at least 1 per class");
}

void ReplayBuffer::add_stage(const std::vector<LabeledExample>& train, Rng& rng) {
  std::set<int> already;
  for (const auto& e : examples_) already.insert(e.label);
  std::map<int, std::vector<size_t>> by_class;
  for (size_t i = 0; i < train.size(); ++i)
    if (already.count(train[i].label) == 0) by_class[train[i].label].push_back(i);
  for (const auto& [label, idxs] : by_class) {
    (void)label;
    if (static_cast<int>(idxs.size()) <= per_class_) {
      for (size_t i : idxs) examples_.push_back(train[i]);
    } else {
      for (size_t pick : rng.sample_without_replacement(idxs.size(),
                                                        static_cast<size_t>(per_class_)))
        examples_.push_back(train[idxs[pick]]);
    }
  }
}

double head_accuracy(const Model& m, const std::vector<LabeledExample>& data, int head) {
  if (data.empty()) throw ValueError("accuracy over an empty set");
  const auto pred = predict(m, examples_matrix(data), head);
  int hit = 0;
  for (size_t i = 0; i < data.size(); ++i)
    if (pred[i] == data[i].label) ++hit;
  return static_cast<double>(hit) / static_cast<double>(data.size());
}

void mas_accumulate(Model& m, const std::vector<LabeledExample>& data, int head,
                    MasState& state) {
  if (data.empty()) throw ConfigError("importance estimation needs data");
  if (head < 0 || head >= m.num_heads()) throw IndexError("head out of range");
  auto params = trainable_params(m);
  align_state(state, params, feature_params(m).size());

  std::vector<Mat> acc(params.size());
  for (size_t i = 0; i < params.size(); ++i)
    acc[i] = Mat::Zero(params[i]->value.rows(), params[i]->value.cols());

  Rng no_dropout(0);
  for (const auto& e : data) {
    Tape tape;
    const VarId x = tape.constant(e.x.transpose());
    const VarId feat = features_train(tape, m, x, 0.0, no_dropout);
    const VarId norm2 = sum_squares(tape, head_logits_train(tape, m, feat, head));
    tape.backward(norm2);
    for (size_t i = 0; i < params.size(); ++i) {
      if (params[i]->has_grad()) {
        acc[i] += params[i]->grad.cwiseAbs();
        params[i]->grad = Mat();
      }
    }
  }
  const double n = static_cast<double>(data.size());
  for (size_t i = 0; i < params.size(); ++i) {
    state.omega[i] += acc[i] / n;
    state.anchor[i] = params[i]->value;
  }
  state.initialized = true;
}

StageReport train_stage(Model& m, Method method, const TrainerConfig& cfg, int stage,
                        const std::vector<LabeledExample>& train,
                        const std::vector<LabeledExample>& val, uint64_t seed,
                        const TrainInputs& inputs) {
  validate_config(cfg);
  if (train.empty()) throw ConfigError("stage train split is empty");
  if (val.empty()) throw ConfigError("stage val split is empty");
  if (stage < 0) throw IndexError("stage must be nonnegative");
  if (m.num_heads() == 0) throw StateError("model has no heads yet");

  const bool shared = m.setting == Setting::SharedHead;
  if (shared && m.num_heads() != 1)
    throw StateError("a shared-head model must have exactly one head");
  if (!shared && stage >= m.num_heads())
    throw ConfigError("no head exists for stage " + std::to_string(stage));
  const int active = shared ? 0 : stage;

  const bool is_replay = method == Method::Er || method == Method::Ssil;
  if (is_replay && !shared)
    throw ConfigError(method_name(method) + " requires the shared-head setting");
  if (is_replay && inputs.buffer == nullptr)
    throw ConfigError(method_name(method) + " requires a replay buffer");
  if (method == Method::Mas && inputs.mas == nullptr)
    throw ConfigError("mas requires importance state");
  if ((method == Method::Lwf || method == Method::Ssil) && stage > 0 &&
      inputs.previous == nullptr)
    throw ConfigError(method_name(method) + " needs the previous stage's model");
  if (method == Method::Ssil && inputs.stage_classes == nullptr)
    throw ConfigError("ssil needs the class ids of every stage");

  // Column blocks of the shared head, one per stage, for the separated softmax.
  std::vector<int> block_off, block_len;
  if (method == Method::Ssil) {
    const auto& sc = *inputs.stage_classes;
    if (static_cast<int>(sc.size()) <= stage)
      throw ConfigError("stage_classes must cover the current stage");
    std::vector<int> flat;
    for (int t = 0; t <= stage; ++t) {
      block_off.push_back(static_cast<int>(flat.size()));
      block_len.push_back(static_cast<int>(sc[static_cast<size_t>(t)].size()));
      flat.insert(flat.end(), sc[static_cast<size_t>(t)].begin(),
                  sc[static_cast<size_t>(t)].end());
    }
    if (flat != m.heads[0].class_ids)
      throw ConfigError("stage_classes disagree with the shared head's class layout");
  }

  const bool lwf_kd = method == Method::Lwf && stage > 0 && cfg.lwf_lambda > 0.0;
  const bool ssil_kd = method == Method::Ssil && stage > 0;
  const Model* teacher = nullptr;
  if (lwf_kd || ssil_kd) {
    teacher = &inputs.previous->model;
    if (teacher->config.input_dim != m.config.input_dim || teacher->num_heads() == 0)
      throw ConfigError("teacher architecture does not match the student");
    if (!shared && teacher->num_heads() < stage)
      throw ConfigError("teacher lacks heads for the earlier stages");
    if (shared) {
      const int k_old = static_cast<int>(teacher->heads[0].weight.value.cols());
      const int k_now = static_cast<int>(m.heads[0].weight.value.cols());
      if (k_old >= k_now) throw ConfigError("teacher head is not older than the student head");
      if (method == Method::Ssil && k_old != block_off[static_cast<size_t>(stage)])
        throw ConfigError("teacher head width disagrees with stage_classes");
    }
  }

  auto all_params = trainable_params(m);
  const size_t n_feature = feature_params(m).size();

  bool penalty = false;
  std::vector<bool> state_is_new;
  if (method == Method::Mas && inputs.mas->initialized && cfg.mas_lambda > 0.0) {
    state_is_new = align_state(*inputs.mas, all_params, n_feature);
    penalty = true;
  }

  // Parameters stepped each batch: exactly those the objective can reach.
  std::set<const Tensor*> reachable;
  for (Tensor* t : feature_params(m)) reachable.insert(t);
  for (Tensor* t : head_params(m, active)) reachable.insert(t);
  if (lwf_kd && !shared)
    for (int h = 0; h < stage; ++h)
      for (Tensor* t : head_params(m, h)) reachable.insert(t);
  if (penalty)
    for (size_t i = 0; i < all_params.size(); ++i)
      if (!state_is_new[i]) reachable.insert(all_params[i]);
  std::vector<Tensor*> step;
  for (Tensor* t : all_params)
    if (reachable.count(t)) step.push_back(t);

  const std::map<int, int> col = head_columns(m.heads[static_cast<size_t>(active)]);
  const int eval_head = active;

  StageReport report;
  if (cfg.max_epochs == 0) {
    report.val_accuracy = head_accuracy(m, val, eval_head);
    return report;
  }

  Rng rng(derive_seed(seed, kSeedTrain, static_cast<uint64_t>(stage)));
  std::vector<size_t> order(train.size());
  std::iota(order.begin(), order.end(), size_t{0});

  double best_acc = -1.0;
  std::vector<Mat> best;
  int bad_epochs = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    int batches = 0;
    for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), begin + static_cast<size_t>(cfg.batch_size));
      const Batch b =
          assemble_batch(train, order, begin, end, inputs.buffer, is_replay, stage, rng);
      const int n_total = static_cast<int>(b.x.rows());

      Tape tape;
      const VarId x = tape.constant(b.x);
      const VarId feat = features_train(tape, m, x, cfg.dropout, rng);
      VarId obj;

      if (method == Method::Ssil) {
        const VarId logits = head_logits_train(tape, m, feat, 0);
        // classification: every row's cross entropy confined to its stage block
        std::map<int, std::vector<int>> rows_of_stage;
        for (int r = 0; r < n_total; ++r) rows_of_stage[b.stages[static_cast<size_t>(r)]].push_back(r);
        bool have_cls = false;
        VarId cls{};
        for (const auto& [s, rows] : rows_of_stage) {
          if (s < 0 || s > stage)
            throw IndexError("replayed example from stage " + std::to_string(s) +
                             " is outside the trained range");
          const int off = block_off[static_cast<size_t>(s)];
          const int len = block_len[static_cast<size_t>(s)];
          std::vector<int> local;
          local.reserve(rows.size());
          for (int r : rows)
            local.push_back(column_of(col, b.labels[static_cast<size_t>(r)]) - off);
          const VarId blk = slice_cols(tape, gather_rows(tape, logits, rows), off, len);
          const VarId ce = cross_entropy_sum(tape, blk, local);
          cls = have_cls ? add(tape, cls, ce) : ce;
          have_cls = true;
        }
        obj = scale(tape, cls, 1.0 / static_cast<double>(n_total));

        if (ssil_kd) {
          std::vector<int> kd_rows;
          const int first = cfg.ssil_replay_kd_only ? b.n_new : 0;
          for (int r = first; r < n_total; ++r) kd_rows.push_back(r);
          if (!kd_rows.empty()) {
            Mat kd_x(static_cast<int>(kd_rows.size()), b.x.cols());
            for (size_t i = 0; i < kd_rows.size(); ++i) kd_x.row(static_cast<int>(i)) = b.x.row(kd_rows[i]);
            const Mat t_logits = head_logits_eval(*teacher, features_eval(*teacher, kd_x), 0);
            const VarId s_rows = gather_rows(tape, logits, kd_rows);
            bool have_kd = false;
            VarId kd{};
            for (int s = 0; s < stage; ++s) {
              const int off = block_off[static_cast<size_t>(s)];
              const int len = block_len[static_cast<size_t>(s)];
              const VarId s_blk = slice_cols(tape, s_rows, off, len);
              const Mat target =
                  softened_probs(t_logits.middleCols(off, len), cfg.ssil_kd_temperature);
              const VarId term =
                  soft_cross_entropy_sum(tape, s_blk, target, cfg.ssil_kd_temperature);
              kd = have_kd ? add(tape, kd, term) : term;
              have_kd = true;
            }
            obj = add(tape, obj,
                      scale(tape, kd, 1.0 / static_cast<double>(kd_rows.size())));
          }
        }
      } else {
        const VarId logits = head_logits_train(tape, m, feat, active);
        std::vector<int> local;
        local.reserve(b.labels.size());
        for (int lab : b.labels) local.push_back(column_of(col, lab));
        obj = scale(tape, cross_entropy_sum(tape, logits, local),
                    1.0 / static_cast<double>(n_total));

        if (penalty) {
          bool have_pen = false;
          VarId pen{};
          for (size_t i = 0; i < all_params.size(); ++i) {
            if (state_is_new[i]) continue;
            const VarId w = tape.watch(*all_params[i]);
            const VarId term =
                weighted_sq_diff(tape, w, inputs.mas->anchor[i], inputs.mas->omega[i]);
            pen = have_pen ? add(tape, pen, term) : term;
            have_pen = true;
          }
          if (have_pen) obj = add(tape, obj, scale(tape, pen, cfg.mas_lambda));
        }

        if (lwf_kd) {
          const Mat t_feat = features_eval(*teacher, b.x);
          bool have_kd = false;
          VarId kd{};
          if (shared) {
            const Mat t_logits = head_logits_eval(*teacher, t_feat, 0);
            const int k_old = static_cast<int>(t_logits.cols());
            const VarId s_old = slice_cols(tape, logits, 0, k_old);
            kd = soft_cross_entropy_sum(tape, s_old,
                                        softened_probs(t_logits, cfg.lwf_temperature),
                                        cfg.lwf_temperature);
            have_kd = true;
          } else {
            for (int h = 0; h < stage; ++h) {
              const Mat t_logits = head_logits_eval(*teacher, t_feat, h);
              const VarId s_logits = head_logits_train(tape, m, feat, h);
              const VarId term = soft_cross_entropy_sum(
                  tape, s_logits, softened_probs(t_logits, cfg.lwf_temperature),
                  cfg.lwf_temperature);
              kd = have_kd ? add(tape, kd, term) : term;
              have_kd = true;
            }
          }
          if (have_kd)
            obj = add(tape, obj,
                      scale(tape, kd, cfg.lwf_lambda / static_cast<double>(n_total)));
        }
      }

      loss_sum += tape.value(obj)(0, 0);
      ++batches;
      tape.backward(obj);
      sgd_step(step, cfg.lr, cfg.weight_decay);
    }
    report.train_loss = loss_sum / static_cast<double>(batches);
    report.epochs_run = epoch + 1;
    report.train_curve.push_back(report.train_loss);

    const double acc = head_accuracy(m, val, eval_head);
    report.val_curve.push_back(acc);
    if (acc > best_acc) {
      best_acc = acc;
      best = copy_values(all_params);
      report.best_epoch = epoch;
      bad_epochs = 0;
    } else if (++bad_epochs >= cfg.early_stop_patience) {
      break;
    }
  }

  for (size_t i = 0; i < all_params.size(); ++i) {
    all_params[i]->value = best[i];
    all_params[i]->grad = Mat();
  }
  report.val_accuracy = best_acc;

  if (method == Method::Mas) mas_accumulate(m, train, active, *inputs.mas);
  return report;
}

}  // namespace cnd
