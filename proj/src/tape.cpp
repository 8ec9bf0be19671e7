#include "cnd/tape.hpp"

#include <cmath>
#include <utility>

namespace cnd {

namespace {

void check_finite(const Mat& m, const char* who) {
  if (!m.allFinite()) throw NumericError(std::string(who) + ": non-finite values");
}

void check_same_shape(const Mat& a, const Mat& b, const char* who) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(who) + ": shape mismatch (" + std::to_string(a.rows()) +
                         "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                         "x" + std::to_string(b.cols()) + ")");
}

// Row softmax of a/T with max subtraction; always finite for finite input.
Mat stable_softmax_rows(const Mat& a, double temperature) {
  Mat p(a.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i) {
    Eigen::RowVectorXd row = a.row(i) / temperature;
    const double m = row.maxCoeff();
    Eigen::RowVectorXd e = (row.array() - m).exp();
    p.row(i) = e / e.sum();
  }
  return p;
}

}  // namespace

// ---- Tape ----------------------------------------------------------------

VarId Tape::emplace(Mat value, bool requires_grad,
                    std::function<void(Tape&, const Mat&)> backprop) {
  if (consumed_) throw StateError("tape: already consumed by backward");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return VarId{static_cast<int>(nodes_.size()) - 1};
}

Tape::Node& Tape::node(int idx) {
  if (idx < 0 || idx >= static_cast<int>(nodes_.size())) throw IndexError("tape: bad node id");
  return nodes_[static_cast<size_t>(idx)];
}

const Tape::Node& Tape::node(int idx) const {
  if (idx < 0 || idx >= static_cast<int>(nodes_.size())) throw IndexError("tape: bad node id");
  return nodes_[static_cast<size_t>(idx)];
}

VarId Tape::watch(Tensor& t) {
  check_finite(t.value, "watch");
  const VarId id = emplace(t.value, t.requires_grad, nullptr);
  node(id.idx).bound = &t;
  return id;
}

VarId Tape::constant(Mat v) {
  check_finite(v, "constant");
  return emplace(std::move(v), false, nullptr);
}

Mat Tape::node_grad(VarId id) const {
  const Node& n = node(id.idx);
  if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(int idx, const Mat& g) {
  Node& n = node(idx);
  if (!n.requires_grad) return;
  check_same_shape(n.value, g, "accumulate");
  if (n.grad.size() == 0)
    n.grad = g;
  else
    n.grad += g;
}

void Tape::backward(VarId root) {
  if (consumed_) throw StateError("backward: tape already consumed");
  Node& r = node(root.idx);
  if (r.value.size() != 1) throw DimensionError("backward: root must be scalar (1x1)");
  consumed_ = true;
  r.grad = Mat::Ones(1, 1);
  // reverse insertion order is a topological order by construction
  for (int i = root.idx; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.grad.size() == 0 || !n.requires_grad) continue;  // unreached or constant
    if (n.backprop) n.backprop(*this, n.grad);
  }
  for (Node& n : nodes_) {
    if (n.bound != nullptr && n.bound->requires_grad && n.grad.size() != 0) {
      n.bound->ensure_grad();
      n.bound->grad += n.grad;
    }
  }
}

// ---- ops -------------------------------------------------------------------

VarId matmul(Tape& t, VarId a, VarId b) {
  const Mat& av = t.value(a);
  const Mat& bv = t.value(b);
  if (av.cols() != bv.rows())
    throw DimensionError("matmul: inner dimensions differ (" + std::to_string(av.cols()) +
                         " vs " + std::to_string(bv.rows()) + ")");
  Mat out = av * bv;
  check_finite(out, "matmul");
  const bool req = t.requires_grad(a) || t.requires_grad(b);
  const int ai = a.idx, bi = b.idx;
  return t.emplace(std::move(out), req, [ai, bi](Tape& tp, const Mat& g) {
    tp.accumulate(ai, g * tp.node(bi).value.transpose());
    tp.accumulate(bi, tp.node(ai).value.transpose() * g);
  });
}

VarId add(Tape& t, VarId a, VarId b) {
  check_same_shape(t.value(a), t.value(b), "add");
  Mat out = t.value(a) + t.value(b);
  check_finite(out, "add");
  const bool req = t.requires_grad(a) || t.requires_grad(b);
  const int ai = a.idx, bi = b.idx;
  return t.emplace(std::move(out), req, [ai, bi](Tape& tp, const Mat& g) {
    tp.accumulate(ai, g);
    tp.accumulate(bi, g);
  });
}

VarId sub(Tape& t, VarId a, VarId b) {
  check_same_shape(t.value(a), t.value(b), "sub");
  Mat out = t.value(a) - t.value(b);
  check_finite(out, "sub");
  const bool req = t.requires_grad(a) || t.requires_grad(b);
  const int ai = a.idx, bi = b.idx;
  return t.emplace(std::move(out), req, [ai, bi](Tape& tp, const Mat& g) {
    tp.accumulate(ai, g);
    tp.accumulate(bi, -g);
  });
}

VarId add_rowwise(Tape& t, VarId a, VarId bias) {
  const Mat& av = t.value(a);
  const Mat& bv = t.value(bias);
  if (bv.rows() != 1 || bv.cols() != av.cols())
    throw DimensionError("add_rowwise: bias must be 1x" + std::to_string(av.cols()));
  Mat out = av.rowwise() + Eigen::RowVectorXd(bv.row(0));
  check_finite(out, "add_rowwise");
  const bool req = t.requires_grad(a) || t.requires_grad(bias);
  const int ai = a.idx, bi = bias.idx;
  return t.emplace(std::move(out), req, [ai, bi](Tape& tp, const Mat& g) {
    tp.accumulate(ai, g);
    tp.accumulate(bi, Mat(g.colwise().sum()));
  });
}

VarId scale(Tape& t, VarId a, double c) {
  if (!std::isfinite(c)) throw NumericError("scale: non-finite factor");
  Mat out = c * t.value(a);
  check_finite(out, "scale");
  const int ai = a.idx;
  return t.emplace(std::move(out), t.requires_grad(a),
                   [ai, c](Tape& tp, const Mat& g) { tp.accumulate(ai, c * g); });
}

VarId cmul(Tape& t, VarId a, const Mat& m) {
  check_finite(m, "cmul");
  check_same_shape(t.value(a), m, "cmul");
  Mat out = t.value(a).cwiseProduct(m);
  check_finite(out, "cmul");
  const int ai = a.idx;
  return t.emplace(std::move(out), t.requires_grad(a),
                   [ai, m](Tape& tp, const Mat& g) { tp.accumulate(ai, g.cwiseProduct(m)); });
}

VarId relu(Tape& t, VarId a) {
  Mat out = t.value(a).cwiseMax(0.0);
  const int ai = a.idx;
  return t.emplace(std::move(out), t.requires_grad(a), [ai](Tape& tp, const Mat& g) {
    const Mat mask = (tp.node(ai).value.array() > 0.0).cast<double>();
    tp.accumulate(ai, g.cwiseProduct(mask));
  });
}

VarId exp_elem(Tape& t, VarId a) {
  Mat out = t.value(a).array().exp();
  check_finite(out, "exp");
  const int ai = a.idx;
  return t.emplace(out, t.requires_grad(a), [ai, out](Tape& tp, const Mat& g) {
    tp.accumulate(ai, g.cwiseProduct(out));
  });
}

VarId square_elem(Tape& t, VarId a) {
  Mat out = t.value(a).array().square();
  check_finite(out, "square");
  const int ai = a.idx;
  return t.emplace(std::move(out), t.requires_grad(a), [ai](Tape& tp, const Mat& g) {
    tp.accumulate(ai, g.cwiseProduct(2.0 * tp.node(ai).value));
  });
}

VarId row_normalize(Tape& t, VarId a) {
  const Mat& av = t.value(a);
  Mat out(av.rows(), av.cols());
  Vec norms(av.rows());
  for (int i = 0; i < av.rows(); ++i) {
    const double n = av.row(i).norm();
    norms(i) = n;
    if (n == 0.0)
      out.row(i).setZero();
    else
      out.row(i) = av.row(i) / n;
  }
  check_finite(out, "row_normalize");
  const int ai = a.idx;
  return t.emplace(out, t.requires_grad(a), [ai, out, norms](Tape& tp, const Mat& g) {
    Mat da(out.rows(), out.cols());
    for (int i = 0; i < out.rows(); ++i) {
      if (norms(i) == 0.0) {
        da.row(i).setZero();
        continue;
      }
      const double dot = g.row(i).dot(out.row(i));
      da.row(i) = (g.row(i) - dot * out.row(i)) / norms(i);
    }
    tp.accumulate(ai, da);
  });
}

VarId col_normalize(Tape& t, VarId a) {
  const Mat& av = t.value(a);
  Mat out(av.rows(), av.cols());
  Vec norms(av.cols());
  for (int j = 0; j < av.cols(); ++j) {
    const double n = av.col(j).norm();
    norms(j) = n;
    if (n == 0.0)
      out.col(j).setZero();
    else
      out.col(j) = av.col(j) / n;
  }
  check_finite(out, "col_normalize");
  const int ai = a.idx;
  return t.emplace(out, t.requires_grad(a), [ai, out, norms](Tape& tp, const Mat& g) {
    Mat da(out.rows(), out.cols());
    for (int j = 0; j < out.cols(); ++j) {
      if (norms(j) == 0.0) {
        da.col(j).setZero();
        continue;
      }
      const double dot = g.col(j).dot(out.col(j));
      da.col(j) = (g.col(j) - dot * out.col(j)) / norms(j);
    }
    tp.accumulate(ai, da);
  });
}

VarId softmax_rows(Tape& t, VarId a, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw ValueError("softmax: temperature must be positive");
  Mat p = stable_softmax_rows(t.value(a), temperature);
  const int ai = a.idx;
  return t.emplace(p, t.requires_grad(a), [ai, p, temperature](Tape& tp, const Mat& g) {
    Mat da(p.rows(), p.cols());
    for (int i = 0; i < p.rows(); ++i) {
      const double dot = g.row(i).dot(p.row(i));
      da.row(i) = p.row(i).cwiseProduct((g.row(i).array() - dot).matrix()) / temperature;
    }
    tp.accumulate(ai, da);
  });
}

VarId cross_entropy_sum(Tape& t, VarId logits, const std::vector<int>& labels) {
  const Mat& lv = t.value(logits);
  if (static_cast<int>(labels.size()) != lv.rows())
    throw DimensionError("cross_entropy: labels count (" + std::to_string(labels.size()) +
                         ") != logit rows (" + std::to_string(lv.rows()) + ")");
  for (int y : labels)
    if (y < 0 || y >= lv.cols())
      throw IndexError("cross_entropy: label " + std::to_string(y) + " out of range [0, " +
                       std::to_string(lv.cols()) + ")");
  const Mat p = stable_softmax_rows(lv, 1.0);
  double total = 0.0;
  for (int i = 0; i < lv.rows(); ++i) {
    const double m = lv.row(i).maxCoeff();
    const double lse = m + std::log((lv.row(i).array() - m).exp().sum());
    total += lse - lv(i, labels[static_cast<size_t>(i)]);
  }
  if (!std::isfinite(total)) throw NumericError("cross_entropy: non-finite loss");
  const int li = logits.idx;
  return t.emplace(Mat::Constant(1, 1, total), t.requires_grad(logits),
                   [li, p, labels](Tape& tp, const Mat& g) {
                     Mat da = p;
                     for (int i = 0; i < da.rows(); ++i)
                       da(i, labels[static_cast<size_t>(i)]) -= 1.0;
                     tp.accumulate(li, g(0, 0) * da);
                   });
}

VarId soft_cross_entropy_sum(Tape& t, VarId student_logits, const Mat& target_probs,
                             double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw ValueError("soft_cross_entropy: temperature must be positive");
  check_finite(target_probs, "soft_cross_entropy targets");
  const Mat& sv = t.value(student_logits);
  check_same_shape(sv, target_probs, "soft_cross_entropy");
  const double T = temperature;
  const Mat q = stable_softmax_rows(sv, T);
  double total = 0.0;
  Vec target_row_sum(sv.rows());
  for (int i = 0; i < sv.rows(); ++i) {
    Eigen::RowVectorXd st = sv.row(i) / T;
    const double m = st.maxCoeff();
    const double lse = m + std::log((st.array() - m).exp().sum());
    target_row_sum(i) = target_probs.row(i).sum();
    total += T * T * (lse * target_row_sum(i) - target_probs.row(i).dot(st));
  }
  if (!std::isfinite(total)) throw NumericError("soft_cross_entropy: non-finite loss");
  const int si = student_logits.idx;
  return t.emplace(Mat::Constant(1, 1, total), t.requires_grad(student_logits),
                   [si, q, target_probs, target_row_sum, T](Tape& tp, const Mat& g) {
                     Mat da(q.rows(), q.cols());
                     for (int i = 0; i < q.rows(); ++i)
                       da.row(i) = T * (q.row(i) * target_row_sum(i) - target_probs.row(i));
                     tp.accumulate(si, g(0, 0) * da);
                   });
}

VarId sum_all(Tape& t, VarId a) {
  const Mat& av = t.value(a);
  const double s = av.sum();
  if (!std::isfinite(s)) throw NumericError("sum: non-finite");
  const int ai = a.idx;
  const long r = av.rows(), c = av.cols();
  return t.emplace(Mat::Constant(1, 1, s), t.requires_grad(a),
                   [ai, r, c](Tape& tp, const Mat& g) {
                     tp.accumulate(ai, Mat::Constant(r, c, g(0, 0)));
                   });
}

VarId sum_squares(Tape& t, VarId a) {
  const Mat& av = t.value(a);
  const double s = av.squaredNorm();
  if (!std::isfinite(s)) throw NumericError("sum_squares: non-finite");
  const int ai = a.idx;
  return t.emplace(Mat::Constant(1, 1, s), t.requires_grad(a), [ai](Tape& tp, const Mat& g) {
    tp.accumulate(ai, 2.0 * g(0, 0) * tp.node(ai).value);
  });
}

VarId weighted_sq_diff(Tape& t, VarId a, const Mat& anchor, const Mat& weights) {
  const Mat& av = t.value(a);
  check_same_shape(av, anchor, "weighted_sq_diff anchor");
  check_same_shape(av, weights, "weighted_sq_diff weights");
  check_finite(anchor, "weighted_sq_diff anchor");
  check_finite(weights, "weighted_sq_diff weights");
  const Mat diff = av - anchor;
  const double s = (weights.array() * diff.array().square()).sum();
  if (!std::isfinite(s)) throw NumericError("weighted_sq_diff: non-finite");
  const int ai = a.idx;
  return t.emplace(Mat::Constant(1, 1, s), t.requires_grad(a),
                   [ai, diff, weights](Tape& tp, const Mat& g) {
                     tp.accumulate(ai, 2.0 * g(0, 0) * weights.cwiseProduct(diff));
                   });
}

VarId slice_cols(Tape& t, VarId a, int c0, int len) {
  const Mat& av = t.value(a);
  if (c0 < 0 || len < 1 || c0 + len > av.cols())
    throw IndexError("slice_cols: range [" + std::to_string(c0) + ", " +
                     std::to_string(c0 + len) + ") not within " + std::to_string(av.cols()) +
                     " columns");
  Mat out = av.middleCols(c0, len);
  const int ai = a.idx;
  const long rows = av.rows(), cols = av.cols();
  return t.emplace(std::move(out), t.requires_grad(a),
                   [ai, c0, len, rows, cols](Tape& tp, const Mat& g) {
                     Mat da = Mat::Zero(rows, cols);
                     da.middleCols(c0, len) = g;
                     tp.accumulate(ai, da);
                   });
}

VarId gather_rows(Tape& t, VarId a, const std::vector<int>& rows) {
  const Mat& av = t.value(a);
  for (int r : rows)
    if (r < 0 || r >= av.rows())
      throw IndexError("gather_rows: row " + std::to_string(r) + " out of range");
  Mat out(static_cast<long>(rows.size()), av.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(static_cast<long>(i)) = av.row(rows[i]);
  const int ai = a.idx;
  const long nrows = av.rows(), ncols = av.cols();
  return t.emplace(std::move(out), t.requires_grad(a),
                   [ai, rows, nrows, ncols](Tape& tp, const Mat& g) {
                     Mat da = Mat::Zero(nrows, ncols);
                     for (size_t i = 0; i < rows.size(); ++i)
                       da.row(rows[i]) += g.row(static_cast<long>(i));
                     tp.accumulate(ai, da);
                   });
}

VarId dropout(Tape& t, VarId a, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ValueError("dropout: rate must lie in [0, 1)");
  if (rate == 0.0) return a;  // identity, draws nothing
  const Mat& av = t.value(a);
  Mat mask(av.rows(), av.cols());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (int i = 0; i < av.rows(); ++i)
    for (int j = 0; j < av.cols(); ++j) mask(i, j) = rng.uniform() >= rate ? keep_scale : 0.0;
  return cmul(t, a, mask);
}

void sgd_step(const std::vector<Tensor*>& params, double lr, double weight_decay) {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ValueError("sgd_step: lr must be positive");
  if (weight_decay < 0.0 || !std::isfinite(weight_decay))
    throw ValueError("sgd_step: weight_decay must be non-negative");
  for (Tensor* p : params) {
    if (p == nullptr) throw StateError("sgd_step: null parameter");
    if (!p->requires_grad) throw StateError("sgd_step: parameter does not require grad");
    if (!p->has_grad()) throw StateError("sgd_step: parameter has no gradient");
  }
  for (Tensor* p : params) {
    p->value -= lr * (p->grad + weight_decay * p->value);
    if (!p->value.allFinite()) throw NumericError("sgd_step: parameters became non-finite");
    p->zero_grad();
  }
}

}  // namespace cnd
