#include "invarnet/autodiff.hpp"

#include <algorithm>

namespace invarnet::ad {

const Matrix& Var::value() const { return tape_->value(*this); }

Var Tape::leaf(Matrix value) {
  if (!all_finite(value)) throw NumericalError("leaf: non-finite value");
  nodes_.push_back(Node{std::move(value), Matrix(), true, {}, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  if (!all_finite(value)) throw NumericalError("constant: non-finite value");
  nodes_.push_back(Node{std::move(value), Matrix(), false, {}, nullptr});
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owned(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) {
    throw Error("tape: variable does not belong to this tape");
  }
}

const Matrix& Tape::value(Var v) const {
  check_owned(v);
  return nodes_[v.id_].value;
}

bool Tape::requires_grad(Var v) const {
  check_owned(v);
  return nodes_[v.id_].requires_grad;
}

Matrix Tape::grad(Var v) const {
  check_owned(v);
  const Node& n = nodes_[v.id_];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Var Tape::record(std::string_view op, Matrix value, std::vector<Var> inputs,
                 BackwardFn backward) {
  if (!all_finite(value)) {
    throw NumericalError(std::string(op) + ": non-finite output " + shape_str(value));
  }
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    check_owned(in);
    n.inputs.push_back(in.id_);
    n.requires_grad = n.requires_grad || nodes_[in.id_].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(Var v, const Matrix& g) {
  check_owned(v);
  Node& n = nodes_[v.id_];
  if (!n.requires_grad) return;
  if (!all_finite(g)) throw NumericalError("backward: non-finite gradient");
  if (g.rows() != n.value.rows() || g.cols() != n.value.cols()) {
    throw ShapeError("accumulate: gradient " + shape_str(g) + " vs value " + shape_str(n.value));
  }
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var loss) {
  check_owned(loss);
  const Matrix& lv = nodes_[loss.id_].value;
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ShapeError("backward: loss must be 1x1, got " + shape_str(lv));
  }
  for (Node& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[loss.id_].requires_grad) return;
  nodes_[loss.id_].grad = Matrix::Ones(1, 1);
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    const Matrix upstream = n.grad;
    n.backward(*this, upstream);
  }
}

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

}  // namespace

Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    p.row(r) = (logits.row(r).array() - mx).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(),
          "matmul: " + shape_str(a.value()) + " * " + shape_str(b.value()));
  Matrix out = a.value() * b.value();
  return a.tape().record("matmul", std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g * b.value().transpose());
    t.accumulate(b, a.value().transpose() * g);
  });
}

Var affine(Var x, Var w, Var b) {
  require(x.cols() == w.rows() && b.rows() == 1 && b.cols() == w.cols(),
          "affine: x" + shape_str(x.value()) + " W" + shape_str(w.value()) + " b" +
              shape_str(b.value()));
  Matrix out = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  return x.tape().record("affine", std::move(out), {x, w, b},
                         [x, w, b](Tape& t, const Matrix& g) {
                           t.accumulate(x, g * w.value().transpose());
                           t.accumulate(w, x.value().transpose() * g);
                           t.accumulate(b, g.colwise().sum());
                         });
}

Var add(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          "add: " + shape_str(a.value()) + " + " + shape_str(b.value()));
  Matrix out = a.value() + b.value();
  return a.tape().record("add", std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var scale(Var a, double c) {
  Matrix out = a.value() * c;
  return a.tape().record("scale", std::move(out), {a},
                         [a, c](Tape& t, const Matrix& g) { t.accumulate(a, g * c); });
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().record("sum", std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var relu(Var x) {
  Matrix out = x.value().cwiseMax(0.0);
  return x.tape().record("relu", std::move(out), {x}, [x](Tape& t, const Matrix& g) {
    // Subgradient 0 at x == 0.
    t.accumulate(x, (x.value().array() > 0.0).select(g, 0.0));
  });
}

Var tanh_act(Var x) {
  Matrix out = x.value().array().tanh().matrix();
  Matrix local = (1.0 - out.array().square()).matrix();
  return x.tape().record("tanh", std::move(out), {x},
                         [x, local = std::move(local)](Tape& t, const Matrix& g) {
                           t.accumulate(x, g.cwiseProduct(local));
                         });
}

Var concat_features(Var a, Var b) {
  require(a.rows() == b.rows(),
          "concat_features: row mismatch " + shape_str(a.value()) + " | " + shape_str(b.value()));
  const Eigen::Index d1 = a.cols(), d2 = b.cols();
  Matrix out(a.rows(), d1 + d2);
  out.leftCols(d1) = a.value();
  out.rightCols(d2) = b.value();
  return a.tape().record("concat_features", std::move(out), {a, b},
                         [a, b, d1, d2](Tape& t, const Matrix& g) {
                           t.accumulate(a, g.leftCols(d1));
                           t.accumulate(b, g.rightCols(d2));
                         });
}

Var embedding_lookup(Var table, LabelSpan idx) {
  const Eigen::Index rows = table.rows();
  Matrix out(static_cast<Eigen::Index>(idx.size()), table.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= rows) {
      throw RangeError("embedding_lookup: index " + std::to_string(idx[i]) +
                       " outside table of " + std::to_string(rows) + " rows");
    }
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(idx[i]);
  }
  Labels ids(idx.begin(), idx.end());
  return table.tape().record("embedding_lookup", std::move(out), {table},
                             [table, ids = std::move(ids)](Tape& t, const Matrix& g) {
                               Matrix dt = Matrix::Zero(table.rows(), table.cols());
                               for (std::size_t i = 0; i < ids.size(); ++i) {
                                 dt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
                               }
                               t.accumulate(table, dt);
                             });
}

Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state) {
  const Eigen::Index m = x.rows(), d = x.cols();
  require(gamma.rows() == 1 && gamma.cols() == d && beta.rows() == 1 && beta.cols() == d,
          "batch_norm: gamma/beta must be 1x" + std::to_string(d));
  require(state.running_mean.size() == d && state.running_var.size() == d,
          "batch_norm: state has wrong feature count");
  const double eps = state.epsilon;

  if (state.mode == BatchNormState::Mode::eval) {
    const RowVector inv_std = (state.running_var.array() + eps).rsqrt().matrix();
    Matrix xhat = (x.value().rowwise() - state.running_mean).array().rowwise() * inv_std.array();
    Matrix out = xhat.array().rowwise() * gamma.value().row(0).array();
    out.rowwise() += beta.value().row(0);
    return x.tape().record(
        "batch_norm", std::move(out), {x, gamma, beta},
        [x, gamma, beta, inv_std, xhat = std::move(xhat)](Tape& t, const Matrix& g) {
          t.accumulate(x, (g.array().rowwise() * (gamma.value().row(0).array() * inv_std.array()))
                              .matrix());
          t.accumulate(gamma, (g.array() * xhat.array()).colwise().sum().matrix());
          t.accumulate(beta, g.colwise().sum());
        });
  }

  if (m < 2) throw ShapeError("batch_norm: train mode needs at least 2 rows, got " + std::to_string(m));
  const RowVector mean = x.value().colwise().mean();
  const Matrix centered = x.value().rowwise() - mean;
  const RowVector var = centered.array().square().colwise().mean().matrix();
  if (!var.allFinite()) throw NumericalError("batch_norm: batch variance is not finite");
  const RowVector inv_std = (var.array() + eps).rsqrt().matrix();
  Matrix xhat = centered.array().rowwise() * inv_std.array();
  Matrix out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);

  state.running_mean = state.momentum * state.running_mean + (1.0 - state.momentum) * mean;
  state.running_var = state.momentum * state.running_var + (1.0 - state.momentum) * var;

  return x.tape().record(
      "batch_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, inv_std, m, xhat = std::move(xhat)](Tape& t, const Matrix& g) {
        const Matrix dxhat = g.array().rowwise() * gamma.value().row(0).array();
        const RowVector sum_dxhat = dxhat.colwise().sum();
        const RowVector sum_dxhat_xhat = (dxhat.array() * xhat.array()).colwise().sum().matrix();
        Matrix dx = (static_cast<double>(m) * dxhat).rowwise() - sum_dxhat;
        dx -= (xhat.array().rowwise() * sum_dxhat_xhat.array()).matrix();
        dx = (dx.array().rowwise() * inv_std.array()).matrix() / static_cast<double>(m);
        t.accumulate(x, dx);
        t.accumulate(gamma, (g.array() * xhat.array()).colwise().sum().matrix());
        t.accumulate(beta, g.colwise().sum());
      });
}

CrossEntropy softmax_cross_entropy(Var logits, LabelSpan labels) {
  const Eigen::Index m = logits.rows(), k = logits.cols();
  if (static_cast<Eigen::Index>(labels.size()) != m) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(m) + " rows");
  }
  if (m == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  for (int l : labels) {
    if (l < 0 || l >= k) {
      throw RangeError("softmax_cross_entropy: label " + std::to_string(l) + " outside [0, " +
                       std::to_string(k) + ")");
    }
  }
  const Matrix& z = logits.value();
  Matrix probs(m, k);
  double total = 0.0;
  for (Eigen::Index r = 0; r < m; ++r) {
    const double mx = z.row(r).maxCoeff();
    const auto shifted = (z.row(r).array() - mx).eval();
    const double lse = std::log(shifted.exp().sum());
    probs.row(r) = (shifted - lse).exp().matrix();
    total += lse - shifted(labels[static_cast<std::size_t>(r)]);
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(m);

  Labels ids(labels.begin(), labels.end());
  Var loss = logits.tape().record(
      "softmax_cross_entropy", std::move(out), {logits},
      [logits, probs, ids = std::move(ids), m](Tape& t, const Matrix& g) {
        Matrix d = probs;
        for (Eigen::Index r = 0; r < m; ++r) d(r, ids[static_cast<std::size_t>(r)]) -= 1.0;
        t.accumulate(logits, d * (g(0, 0) / static_cast<double>(m)));
      });
  return CrossEntropy{loss, std::move(probs)};
}

Var grad_scale(Var x, double coeff) {
  return x.tape().record("grad_scale", x.value(), {x}, [x, coeff](Tape& t, const Matrix& g) {
    t.accumulate(x, g * coeff);
  });
}

Var grad_reversal(Var x, double lambda) {
  if (!(lambda >= 0.0)) throw RangeError("grad_reversal: lambda must be >= 0");
  return grad_scale(x, -lambda);
}

}  // namespace invarnet::ad
