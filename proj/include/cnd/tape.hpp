#pragma once

#include <functional>
#include <vector>

#include "cnd/error.hpp"
#include "cnd/linalg.hpp"
#include "cnd/rng.hpp"

namespace cnd {

/// A persistent differentiable value (typically a model parameter or an
/// input being perturbed). Tensors outlive tapes; backward() accumulates
/// into `grad`, sgd_step() consumes and re-zeroes it.
struct Tensor {
  Mat value;
  Mat grad;  // empty until a backward pass touches this tensor
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Mat v, bool req = false) : value(std::move(v)), requires_grad(req) {}

  bool has_grad() const { return grad.size() > 0; }
  void ensure_grad() {
    if (!has_grad()) grad = Mat::Zero(value.rows(), value.cols());
  }
  void zero_grad() {
    if (has_grad()) grad.setZero();
  }
};

/// Handle to a node on a Tape.
struct VarId {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a
/// topological order by construction; backward() walks it once in reverse.
/// A tape is single-use: after backward() it is consumed and a second
/// backward() throws StateError.
class Tape {
 public:
  /// Register a leaf bound to an external tensor. Gradients reaching the
  /// leaf are added into `t.grad` at the end of backward().
  VarId watch(Tensor& t);

  /// Register a gradient-free leaf (data, labels-as-matrix, masks).
  VarId constant(Mat v);

  const Mat& value(VarId id) const { return node(id.idx).value; }
  bool requires_grad(VarId id) const { return node(id.idx).requires_grad; }

  /// Gradient accumulated at a node during backward(); zero matrix if the
  /// node was never reached. Mostly for tests; bound tensors are the
  /// normal way to read gradients out.
  Mat node_grad(VarId id) const;

  /// Reverse sweep from a scalar (1x1) root. Visits each node at most once,
  /// in reverse insertion order, then flushes leaf gradients into their
  /// bound tensors. Throws StateError on a consumed tape, DimensionError
  /// if the root is not scalar.
  void backward(VarId root);

  bool consumed() const { return consumed_; }
  size_t size() const { return nodes_.size(); }

  // --- internals shared with the free-function ops ---
  // backprop receives the tape and the node's accumulated output gradient.
  struct Node {
    Mat value;
    Mat grad;  // lazily allocated during backward
    bool requires_grad = false;
    Tensor* bound = nullptr;
    std::function<void(Tape&, const Mat&)> backprop;  // null for leaves
  };

  VarId emplace(Mat value, bool requires_grad, std::function<void(Tape&, const Mat&)> backprop);
  Node& node(int idx);
  const Node& node(int idx) const;
  void accumulate(int idx, const Mat& g);

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// ---- ops -------------------------------------------------------------
// All ops validate shapes (DimensionError) and reject non-finite results
// (NumericError). Gradients flow only from operands with requires_grad.

/// a[m×k] * b[k×n]
VarId matmul(Tape& t, VarId a, VarId b);

/// Elementwise sum, identical shapes.
VarId add(Tape& t, VarId a, VarId b);

/// Elementwise difference, identical shapes.
VarId sub(Tape& t, VarId a, VarId b);

/// a[m×n] + row broadcast of bias[1×n]. The only broadcast in the engine.
VarId add_rowwise(Tape& t, VarId a, VarId bias);

/// c * a for a finite scalar c.
VarId scale(Tape& t, VarId a, double c);

/// Elementwise product with a constant matrix of identical shape.
VarId cmul(Tape& t, VarId a, const Mat& m);

VarId relu(Tape& t, VarId a);
VarId exp_elem(Tape& t, VarId a);
VarId square_elem(Tape& t, VarId a);

/// Rows rescaled to unit L2 norm; all-zero rows pass through unchanged.
VarId row_normalize(Tape& t, VarId a);

/// Columns rescaled to unit L2 norm; all-zero columns pass through.
VarId col_normalize(Tape& t, VarId a);

/// Row-wise softmax of a/temperature, max-subtraction stabilized.
/// temperature must be > 0 (ValueError).
VarId softmax_rows(Tape& t, VarId a, double temperature = 1.0);

/// Sum over rows of -log softmax(logits_row)[label], fused log-softmax.
/// labels.size() must equal logits rows; labels must lie in [0, cols).
VarId cross_entropy_sum(Tape& t, VarId logits, const std::vector<int>& labels);

/// Distillation: sum over rows of
///   T^2 * sum_c target(r,c) * (logsumexp(s_r/T) - s(r,c)/T)
/// i.e. temperature-softened cross entropy against fixed target rows,
/// scaled by T^2 so the gradient magnitude stays comparable across T.
VarId soft_cross_entropy_sum(Tape& t, VarId student_logits, const Mat& target_probs,
                             double temperature);

/// Scalar sum of all entries.
VarId sum_all(Tape& t, VarId a);

/// Scalar sum of squared entries.
VarId sum_squares(Tape& t, VarId a);

/// Scalar sum_i w_i * (a_i - anchor_i)^2 with constant anchor and weights.
VarId weighted_sq_diff(Tape& t, VarId a, const Mat& anchor, const Mat& weights);

/// Columns [c0, c0+len) as a new node; gradient scatters back.
VarId slice_cols(Tape& t, VarId a, int c0, int len);

/// Rows picked by index (duplicates allowed); gradient scatter-adds.
VarId gather_rows(Tape& t, VarId a, const std::vector<int>& rows);

/// Inverted-dropout mask applied to a. rate == 0 is the identity and
/// consumes no randomness; rate must lie in [0, 1).
VarId dropout(Tape& t, VarId a, double rate, Rng& rng);

/// SGD over persistent tensors: v <- v - lr * (grad + weight_decay * v).
/// Every tensor must carry a gradient (StateError otherwise); gradients
/// are zeroed after the step.
void sgd_step(const std::vector<Tensor*>& params, double lr, double weight_decay);

}  // namespace cnd
