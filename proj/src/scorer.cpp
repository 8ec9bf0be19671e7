#include "cnd/scorer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "cnd/metrics.hpp"

namespace cnd {

namespace {

double top_prob(const Eigen::RowVectorXd& logits, double temperature) {
  Eigen::RowVectorXd z = logits / temperature;
  const double mx = z.maxCoeff();
  return 1.0 / (z.array() - mx).exp().sum();
}

int argmax_col(const Eigen::RowVectorXd& row) {
  int best = 0;
  for (int j = 1; j < row.size(); ++j)
    if (row(j) > row(best)) best = j;
  return best;
}

double cosine(const Vec& a, const Vec& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

Mat normalized_cols(const Mat& w) {
  Mat out(w.rows(), w.cols());
  for (int j = 0; j < w.cols(); ++j) {
    const double n = w.col(j).norm();
    if (n == 0.0)
      out.col(j).setZero();
    else
      out.col(j) = w.col(j) / n;
  }
  return out;
}

const Head& prototype_head(const Model& m, int head) {
  const Head& h = m.heads[static_cast<size_t>(head)];
  if (h.bias.has_value())
    throw ConfigError("scorer: prototype scores need a bias-free head");
  return h;
}

double softmax_head(const Model& m, const Mat& feat, int head) {
  return top_prob(head_logits_eval(m, feat, head).row(0), 1.0);
}

double odin_head(const Model& m, const Mat& xrow, int head, const OdinParams& od) {
  if (od.epsilon < 0.0) throw ConfigError("scorer: odin epsilon must be nonnegative");
  if (!(od.temperature > 0.0)) throw ConfigError("scorer: odin temperature must be positive");
  Mat x_tilde = xrow;
  if (od.epsilon > 0.0) {
    const Eigen::RowVectorXd logits = head_logits_eval(m, features_eval(m, xrow), head).row(0);
    const int yhat = argmax_col(logits);
    const Mat g = input_gradient_ce(m, xrow, head, {yhat}, od.temperature);
    x_tilde -= od.epsilon * g.unaryExpr([](double v) {
      return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
    });
  }
  return top_prob(head_logits_eval(m, features_eval(m, x_tilde), head).row(0), od.temperature);
}

// Row-stabilized class probabilities of one feature row under one head.
Eigen::RowVectorXd head_probs(const Model& m, const Mat& feat, int head) {
  Eigen::RowVectorXd logits = head_logits_eval(m, feat, head).row(0);
  Eigen::RowVectorXd p = (logits.array() - logits.maxCoeff()).exp();
  p /= p.sum();
  return p;
}

double b1_head(const Model& m, const Mat& feat, int head) {
  const Head& h = prototype_head(m, head);
  const Vec phi = feat.row(0).transpose();
  const double pn = phi.norm();
  if (pn == 0.0) return -1.0;
  const Mat w_eff = h.normalized ? normalized_cols(h.weight.value) : h.weight.value;
  const Eigen::RowVectorXd p = head_probs(m, feat, head);
  const Vec z = normalized_cols(w_eff) * p.transpose();
  return phi.dot(z) / pn;
}

double b2_head(const Model& m, const Mat& feat, int head, int nth) {
  const Head& h = prototype_head(m, head);
  const int k = static_cast<int>(h.weight.value.cols());
  if (k < 2) throw ConfigError("scorer: b2 needs at least two classes in the head");
  if (nth < 1 || nth > k)
    throw ConfigError("scorer: b2 nth-closest class " + std::to_string(nth) +
                      " out of range for " + std::to_string(k) + " classes");
  const Vec phi = feat.row(0).transpose();
  if (phi.norm() == 0.0) return -1.0;
  const Mat w_eff = h.normalized ? normalized_cols(h.weight.value) : h.weight.value;

  std::vector<int> order(static_cast<size_t>(k));
  for (int j = 0; j < k; ++j) order[static_cast<size_t>(j)] = j;
  std::stable_sort(order.begin(), order.end(), [&](int i, int j) {
    return cosine(phi, w_eff.col(i)) > cosine(phi, w_eff.col(j));
  });
  const int yn = order[static_cast<size_t>(nth - 1)];

  const Eigen::RowVectorXd p = head_probs(m, feat, head);
  const int c = argmax_col(head_logits_eval(m, feat, head).row(0));
  Eigen::RowVectorXd residual = p;
  residual(yn) -= 1.0;
  const Vec grad = w_eff * residual.transpose();
  const Vec phi_prime = phi - grad;
  const double delta = cosine(phi_prime, w_eff.col(c)) - cosine(phi_prime, w_eff.col(yn));
  return b1_head(m, feat, head) + delta;
}

std::vector<int> resolve_heads(const Model& m, const ScorerContext& ctx) {
  if (ctx.active_head.has_value()) {
    const int h = *ctx.active_head;
    if (h < 0 || h >= m.num_heads())
      throw IndexError("scorer: head " + std::to_string(h) + " out of range (have " +
                       std::to_string(m.num_heads()) + ")");
    return {h};
  }
  if (m.num_heads() == 0) throw StateError("scorer: model has no heads to score with");
  std::vector<int> all(static_cast<size_t>(m.num_heads()));
  for (int h = 0; h < m.num_heads(); ++h) all[static_cast<size_t>(h)] = h;
  return all;
}

double mahalanobis_score(const Model& m, const Mat& xrow, const MahalanobisState& st) {
  if (!st.fitted) throw StateError("scorer: mahalanobis statistics not fitted");
  const auto acts = eval_all_layers(m, xrow);
  double s = 0.0;
  for (size_t l = 0; l < st.layers.size(); ++l) {
    const int idx = st.layer_index[l];
    if (idx < 0 || idx >= static_cast<int>(acts.size()))
      throw IndexError("scorer: probed layer " + std::to_string(idx) +
                       " out of range for this model");
    s += st.weights[l] * layer_score(st.layers[l], acts[static_cast<size_t>(idx)].row(0).transpose());
  }
  return s;
}

// Ridge-stabilized logistic regression on standardized columns, deterministic
// Newton iterations. Returns weights in the original column scale.
void fit_logistic(const Mat& scores, const std::vector<int>& labels, std::vector<double>& weights,
                  double& intercept) {
  const int n = static_cast<int>(scores.rows());
  const int d = static_cast<int>(scores.cols());
  Eigen::RowVectorXd mean = scores.colwise().mean();
  Eigen::RowVectorXd sd(d);
  for (int j = 0; j < d; ++j)
    sd(j) = std::sqrt((scores.col(j).array() - mean(j)).square().sum() / n);

  Mat x(n, d + 1);
  for (int j = 0; j < d; ++j) {
    if (sd(j) > 0.0)
      x.col(j) = ((scores.col(j).array() - mean(j)) / sd(j)).matrix();
    else
      x.col(j).setZero();
  }
  x.col(d).setOnes();
  Vec y(n);
  for (int i = 0; i < n; ++i) y(i) = labels[static_cast<size_t>(i)];

  const double lambda = 1e-3;
  Vec w = Vec::Zero(d + 1);
  for (int iter = 0; iter < 50; ++iter) {
    Vec eta = (x * w).cwiseMax(-30.0).cwiseMin(30.0);
    Vec p = (1.0 + (-eta.array()).exp()).inverse();
    Vec r = (p.array() * (1.0 - p.array())).max(1e-9);
    const Mat h = x.transpose() * r.asDiagonal() * x + lambda * Mat::Identity(d + 1, d + 1);
    const Vec g = x.transpose() * (y - p) - lambda * w;
    const Vec step = h.ldlt().solve(g);
    w += step;
    if (step.cwiseAbs().maxCoeff() < 1e-10) break;
  }

  weights.assign(static_cast<size_t>(d), 0.0);
  intercept = w(d);
  for (int j = 0; j < d; ++j) {
    if (sd(j) > 0.0) {
      weights[static_cast<size_t>(j)] = w(j) / sd(j);
      intercept -= w(j) * mean(j) / sd(j);
    }
  }
}

}  // namespace

ScorerKind scorer_from_string(const std::string& name) {
  if (name == "softmax") return ScorerKind::Softmax;
  if (name == "odin") return ScorerKind::Odin;
  if (name == "mahalanobis") return ScorerKind::Mahalanobis;
  if (name == "vae") return ScorerKind::Vae;
  if (name == "b1") return ScorerKind::B1;
  if (name == "b2") return ScorerKind::B2;
  throw ConfigError("scorer: unknown scorer '" + name + "'");
}

std::string scorer_name(ScorerKind kind) {
  switch (kind) {
    case ScorerKind::Softmax: return "softmax";
    case ScorerKind::Odin: return "odin";
    case ScorerKind::Mahalanobis: return "mahalanobis";
    case ScorerKind::Vae: return "vae";
    case ScorerKind::B1: return "b1";
    case ScorerKind::B2: return "b2";
  }
  throw ConfigError("scorer: unknown scorer kind");
}

void LayerStats::update_inverse(double ridge) {
  if (count == 0) throw StateError("scorer: no classes accumulated yet");
  if (ridge < 0.0) throw ConfigError("scorer: ridge must be nonnegative");
  const int d = static_cast<int>(scatter.cols());
  const Mat sigma = scatter / static_cast<double>(count) + ridge * Mat::Identity(d, d);
  Eigen::LLT<Mat> llt(sigma);
  if (llt.info() != Eigen::Success)
    throw NumericError("scorer: covariance not positive definite despite ridge");
  sigma_inv = llt.solve(Mat::Identity(d, d));
  if (!sigma_inv.allFinite())
    throw NumericError("scorer: covariance not positive definite despite ridge");
}

void accumulate_class(LayerStats& ls, int class_id, const Mat& rows) {
  if (rows.rows() < 2)
    throw ValueError("scorer: class " + std::to_string(class_id) +
                     " needs at least 2 samples to estimate statistics");
  if (std::find(ls.class_ids.begin(), ls.class_ids.end(), class_id) != ls.class_ids.end())
    throw ConfigError("scorer: class " + std::to_string(class_id) + " already has statistics");
  const int d = static_cast<int>(rows.cols());
  if (!ls.class_ids.empty() && ls.means.cols() != d)
    throw DimensionError("scorer: feature width changed between classes");

  const Eigen::RowVectorXd mu = rows.colwise().mean();
  if (ls.class_ids.empty()) {
    ls.means = Mat(0, d);
    ls.scatter = Mat::Zero(d, d);
  }
  ls.means.conservativeResize(ls.means.rows() + 1, Eigen::NoChange);
  ls.means.row(ls.means.rows() - 1) = mu;
  ls.class_ids.push_back(class_id);
  const Mat centered = rows.rowwise() - mu;
  ls.scatter += centered.transpose() * centered;
  ls.count += static_cast<size_t>(rows.rows());
  ls.sigma_inv = Mat();  // stale until the next update_inverse
}

double layer_score(const LayerStats& ls, const Vec& f) {
  if (ls.count == 0 || ls.sigma_inv.size() == 0)
    throw StateError("scorer: layer statistics incomplete (accumulate classes, then update_inverse)");
  if (f.size() != ls.means.cols())
    throw DimensionError("scorer: feature has " + std::to_string(f.size()) +
                         " entries, statistics expect " + std::to_string(ls.means.cols()));
  double best = std::numeric_limits<double>::infinity();
  for (int r = 0; r < ls.means.rows(); ++r) {
    const Vec d = f - ls.means.row(r).transpose();
    best = std::min(best, d.dot(ls.sigma_inv * d));
  }
  return -best;
}

std::vector<int> mahalanobis_layer_indices(const Model& m) {
  const int n = static_cast<int>(m.layers.size());
  if (n >= 2) return {n - 2, n - 1};
  return {n - 1};
}

void fit_mahalanobis(const Model& m, const std::vector<LabeledExample>& available,
                     const std::vector<LabeledExample>& ood_calibration,
                     MahalanobisState& state) {
  if (available.empty()) throw ConfigError("scorer: nothing to fit mahalanobis statistics on");
  if (state.layers.empty()) {
    state.layer_index = mahalanobis_layer_indices(m);
    state.layers.resize(state.layer_index.size());
    state.weights.assign(state.layer_index.size(), 1.0);
  }
  if (state.layer_index.size() != state.layers.size())
    throw StateError("scorer: mahalanobis state layer bookkeeping out of sync");

  const Mat x = examples_matrix(available);
  const auto acts = eval_all_layers(m, x);
  for (size_t l = 0; l < state.layers.size(); ++l) {
    const int idx = state.layer_index[l];
    if (idx < 0 || idx >= static_cast<int>(acts.size()))
      throw IndexError("scorer: probed layer " + std::to_string(idx) +
                       " out of range for this model");
    if (state.layers[l].count > 0 &&
        state.layers[l].means.cols() != acts[static_cast<size_t>(idx)].cols())
      throw DimensionError("scorer: model layer widths do not match the fitted statistics");
  }

  const std::vector<int> labels = examples_labels(available);
  std::set<int> known(state.layers[0].class_ids.begin(), state.layers[0].class_ids.end());
  std::set<int> present(labels.begin(), labels.end());
  for (int c : present) {
    if (known.count(c)) continue;
    std::vector<int> rows;
    for (size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) rows.push_back(static_cast<int>(i));
    for (size_t l = 0; l < state.layers.size(); ++l) {
      const Mat& act = acts[static_cast<size_t>(state.layer_index[l])];
      Mat class_rows(static_cast<int>(rows.size()), act.cols());
      for (size_t i = 0; i < rows.size(); ++i) class_rows.row(static_cast<int>(i)) = act.row(rows[i]);
      accumulate_class(state.layers[l], c, class_rows);
    }
  }
  for (LayerStats& ls : state.layers) ls.update_inverse(state.ridge);
  state.fitted = true;

  if (ood_calibration.empty()) {
    state.weights.assign(state.layers.size(), 1.0);
    state.intercept = 0.0;
    return;
  }
  const Mat x_ood = examples_matrix(ood_calibration);
  const auto acts_ood = eval_all_layers(m, x_ood);
  const int n_in = static_cast<int>(available.size());
  const int n_ood = static_cast<int>(ood_calibration.size());
  const int n_layers = static_cast<int>(state.layers.size());
  Mat scores(n_in + n_ood, n_layers);
  std::vector<int> y(static_cast<size_t>(n_in + n_ood), 0);
  for (int i = 0; i < n_in; ++i) y[static_cast<size_t>(i)] = 1;
  for (int l = 0; l < n_layers; ++l) {
    const Mat& a_in = acts[static_cast<size_t>(state.layer_index[static_cast<size_t>(l)])];
    const Mat& a_ood = acts_ood[static_cast<size_t>(state.layer_index[static_cast<size_t>(l)])];
    for (int i = 0; i < n_in; ++i)
      scores(i, l) = layer_score(state.layers[static_cast<size_t>(l)], a_in.row(i).transpose());
    for (int i = 0; i < n_ood; ++i)
      scores(n_in + i, l) =
          layer_score(state.layers[static_cast<size_t>(l)], a_ood.row(i).transpose());
  }
  fit_logistic(scores, y, state.weights, state.intercept);
}

double score_sample(const Model& m, ScorerKind kind, const Vec& x, const ScorerContext& ctx) {
  if (x.size() != m.config.input_dim)
    throw DimensionError("scorer: input has " + std::to_string(x.size()) + " entries, expected " +
                         std::to_string(m.config.input_dim));
  const Mat xrow = x.transpose();

  if (kind == ScorerKind::Mahalanobis) return mahalanobis_score(m, xrow, ctx.mahala);
  if (kind == ScorerKind::Vae) {
    if (ctx.vae == nullptr) throw StateError("scorer: no generative model in the context");
    const Vec v = ctx.vae->config.on_features ? Vec(features_eval(m, xrow).row(0).transpose()) : x;
    Rng rng(derive_seed(ctx.score_seed, kSeedScore, 0));
    return vae_elbo(*ctx.vae, v, ctx.vae_samples, rng).elbo;
  }

  const std::vector<int> heads = resolve_heads(m, ctx);
  const Mat feat = features_eval(m, xrow);
  double best = -std::numeric_limits<double>::infinity();
  for (int h : heads) {
    double s = 0.0;
    switch (kind) {
      case ScorerKind::Softmax: s = softmax_head(m, feat, h); break;
      case ScorerKind::Odin: s = odin_head(m, xrow, h, ctx.odin); break;
      case ScorerKind::B1: s = b1_head(m, feat, h); break;
      case ScorerKind::B2: s = b2_head(m, feat, h, ctx.b2_nth); break;
      default: throw ConfigError("scorer: unknown scorer kind");
    }
    best = std::max(best, s);
  }
  return best;
}

void calibrate_scorer(ScorerKind kind, const Model& m,
                      const std::vector<LabeledExample>& in_train,
                      const std::vector<LabeledExample>& ood_calibration, ScorerContext& ctx) {
  switch (kind) {
    case ScorerKind::Softmax:
    case ScorerKind::B1:
    case ScorerKind::B2:
    case ScorerKind::Vae:
      return;
    case ScorerKind::Mahalanobis:
      fit_mahalanobis(m, in_train, ood_calibration, ctx.mahala);
      return;
    case ScorerKind::Odin: break;
  }

  if (in_train.empty() || ood_calibration.empty())
    throw ConfigError("scorer: odin calibration needs both seen-class data and a calibration set");
  const double eps_grid[] = {0.0, 5e-4, 1e-3, 2e-3, 5e-3};
  const double t_grid[] = {1.0, 10.0, 100.0, 1000.0};
  double best = -std::numeric_limits<double>::infinity();
  OdinParams best_params;
  for (double eps : eps_grid) {
    for (double temp : t_grid) {
      ScorerContext trial;
      trial.odin.epsilon = eps;
      trial.odin.temperature = temp;
      std::vector<double> in_scores, ood_scores;
      in_scores.reserve(in_train.size());
      ood_scores.reserve(ood_calibration.size());
      for (const LabeledExample& ex : in_train) {
        const int head = m.setting == Setting::MultiHead ? ex.stage : 0;
        if (head < 0 || head >= m.num_heads())
          throw IndexError("scorer: calibration example from stage " + std::to_string(ex.stage) +
                           " has no head");
        trial.active_head = head;
        in_scores.push_back(score_sample(m, ScorerKind::Odin, ex.x, trial));
      }
      trial.active_head.reset();
      for (const LabeledExample& ex : ood_calibration)
        ood_scores.push_back(score_sample(m, ScorerKind::Odin, ex.x, trial));
      const double a = auc(in_scores, ood_scores);
      if (a > best) {
        best = a;
        best_params = trial.odin;
      }
    }
  }
  ctx.odin = best_params;
}

}  // namespace cnd
