#pragma once

// Define-by-run reverse-mode differentiation over dense f64 matrices.
//
// A Tape records every operation as it is evaluated. Each recorded node keeps
// its forward value, the ids of its inputs and a closure that maps the
// upstream gradient to contributions for those inputs. Tape::backward seeds the
// scalar loss with 1 and walks the nodes in reverse recording order, so every
// operation is visited exactly once and fan-out gradients are summed.
//
//   ad::Tape tape;
//   auto w = tape.leaf(W);
//   auto loss = ad::sum(ad::relu(ad::matmul(tape.constant(X), w)));
//   tape.backward(loss);
//   Matrix dw = tape.grad(w);

#include "invarnet/common.hpp"

#include <functional>
#include <string_view>

namespace invarnet::ad {

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
// tape that produced it is alive.
class Var {
 public:
  Var() = default;

  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using BackwardFn = std::function<void(Tape&, const Matrix& upstream)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable input; its gradient is populated by backward().
  Var leaf(Matrix value);
  // Input that never receives a gradient.
  Var constant(Matrix value);

  const Matrix& value(Var v) const;
  // Gradient of the last backward() loss with respect to v. Zero (with the
  // shape of v) when v does not influence the loss.
  Matrix grad(Var v) const;
  bool requires_grad(Var v) const;

  // Reverse sweep from a 1x1 loss. Clears gradients from earlier sweeps.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

  // Used by operations. `op` names the operation in NaN/Inf diagnostics.
  Var record(std::string_view op, Matrix value, std::vector<Var> inputs, BackwardFn backward);
  // Adds `g` into the gradient of `v` if v requires one.
  void accumulate(Var v, const Matrix& g);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  void check_owned(Var v) const;

  std::vector<Node> nodes_;
};

// Running statistics and mode for one batch-norm layer.
struct BatchNormState {
  enum class Mode { train, eval };

  RowVector running_mean;
  RowVector running_var;
  double momentum = 0.9;
  double epsilon = 1e-5;
  Mode mode = Mode::train;

  static BatchNormState for_features(Eigen::Index d) {
    BatchNormState s;
    s.running_mean = RowVector::Zero(d);
    s.running_var = RowVector::Ones(d);
    return s;
  }
};

Var matmul(Var a, Var b);
// x*W + b with b (1 x k) broadcast over the rows of x.
Var affine(Var x, Var w, Var b);
Var add(Var a, Var b);
Var scale(Var a, double c);
// Sum of all entries as a 1x1 tensor.
Var sum(Var a);
Var relu(Var x);
Var tanh_act(Var x);
Var concat_features(Var a, Var b);
// Row gather from table; backward scatter-adds into the table gradient.
Var embedding_lookup(Var table, LabelSpan idx);
// Train mode normalizes with biased batch statistics and updates the running
// estimates in `state`; eval mode uses the running estimates.
Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state);

struct CrossEntropy {
  Var loss;      // 1x1, mean over rows of -log softmax(logits)[label]
  Matrix probs;  // row-wise softmax
};
CrossEntropy softmax_cross_entropy(Var logits, LabelSpan labels);

// Identity forward; backward multiplies the upstream gradient by `coeff`.
Var grad_scale(Var x, double coeff);
// Identity forward; backward multiplies the upstream gradient by -lambda.
Var grad_reversal(Var x, double lambda);

// Row-wise softmax with max subtraction, no tape involved.
Matrix softmax_rows(const Matrix& logits);

}  // namespace invarnet::ad
