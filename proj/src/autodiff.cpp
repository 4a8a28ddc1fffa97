#include "dpe/autodiff.hpp"

#include <cmath>
#include <limits>
#include <memory>

namespace dpe::ad {

const Eigen::MatrixXd& Var::value() const { return tape_->value(*this); }
const Eigen::MatrixXd& Var::grad() const { return tape_->grad(*this); }

const Eigen::MatrixXd& Tape::value(Var v) const { return nodes_[v.idx_].value; }

const Eigen::MatrixXd& Tape::grad(Var v) const {
  const Node& n = nodes_[v.idx_];
  if (!n.grad_init)
    throw NumericError("gradient read before backward touched this node", v.idx_);
  return n.grad;
}

Eigen::MatrixXd Tape::grad_or_zero(Var v) const {
  const Node& n = nodes_[v.idx_];
  if (!n.grad_init) return Eigen::MatrixXd::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Var Tape::push(Eigen::MatrixXd value, bool needs_grad, std::function<void(Tape&)> backprop) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(int idx, const Eigen::MatrixXd& g) {
  Node& n = nodes_[idx];
  if (!n.needs_grad) return;
  if (!n.grad_init) {
    n.grad = g;
    n.grad_init = true;
  } else {
    n.grad += g;
  }
}

Eigen::MatrixXd& Tape::grad_ref(int idx) { return nodes_[idx].grad; }

Var Tape::leaf(Eigen::MatrixXd value) { return push(std::move(value), true, nullptr); }
Var Tape::constant(Eigen::MatrixXd value) { return push(std::move(value), false, nullptr); }

Var Tape::matmul(Var a, Var b) {
  const int ia = a.idx_, ib = b.idx_;
  if (nodes_[ia].value.cols() != nodes_[ib].value.rows())
    throw ShapeError("matmul inner dimension mismatch");
  Eigen::MatrixXd v = nodes_[ia].value * nodes_[ib].value;
  bool ng = nodes_[ia].needs_grad || nodes_[ib].needs_grad;
  int self = static_cast<int>(nodes_.size());
  return push(std::move(v), ng, [self, ia, ib](Tape& t) {
    const Eigen::MatrixXd& g = t.nodes_[self].grad;
    t.accumulate(ia, g * t.nodes_[ib].value.transpose());
    t.accumulate(ib, t.nodes_[ia].value.transpose() * g);
  });
}

Var Tape::transpose(Var a) {
  const int ia = a.idx_;
  int self = static_cast<int>(nodes_.size());
  return push(nodes_[ia].value.transpose(), nodes_[ia].needs_grad, [self, ia](Tape& t) {
    t.accumulate(ia, t.nodes_[self].grad.transpose());
  });
}

Var Tape::add(Var a, Var b) {
  const int ia = a.idx_, ib = b.idx_;
  if (nodes_[ia].value.rows() != nodes_[ib].value.rows() ||
      nodes_[ia].value.cols() != nodes_[ib].value.cols())
    throw ShapeError("add shape mismatch");
  int self = static_cast<int>(nodes_.size());
  return push(nodes_[ia].value + nodes_[ib].value,
              nodes_[ia].needs_grad || nodes_[ib].needs_grad, [self, ia, ib](Tape& t) {
                t.accumulate(ia, t.nodes_[self].grad);
                t.accumulate(ib, t.nodes_[self].grad);
              });
}

Var Tape::sub(Var a, Var b) {
  const int ia = a.idx_, ib = b.idx_;
  if (nodes_[ia].value.rows() != nodes_[ib].value.rows() ||
      nodes_[ia].value.cols() != nodes_[ib].value.cols())
    throw ShapeError("sub shape mismatch");
  int self = static_cast<int>(nodes_.size());
  return push(nodes_[ia].value - nodes_[ib].value,
              nodes_[ia].needs_grad || nodes_[ib].needs_grad, [self, ia, ib](Tape& t) {
                t.accumulate(ia, t.nodes_[self].grad);
                t.accumulate(ib, -t.nodes_[self].grad);
              });
}

Var Tape::hadamard(Var a, Var b) {
  const int ia = a.idx_, ib = b.idx_;
  if (nodes_[ia].value.rows() != nodes_[ib].value.rows() ||
      nodes_[ia].value.cols() != nodes_[ib].value.cols())
    throw ShapeError("hadamard shape mismatch");
  int self = static_cast<int>(nodes_.size());
  return push(nodes_[ia].value.cwiseProduct(nodes_[ib].value),
              nodes_[ia].needs_grad || nodes_[ib].needs_grad, [self, ia, ib](Tape& t) {
                const Eigen::MatrixXd& g = t.nodes_[self].grad;
                t.accumulate(ia, g.cwiseProduct(t.nodes_[ib].value));
                t.accumulate(ib, g.cwiseProduct(t.nodes_[ia].value));
              });
}

Var Tape::add_rowvec(Var a, Var row) {
  const int ia = a.idx_, ir = row.idx_;
  if (nodes_[ir].value.rows() != 1 || nodes_[ir].value.cols() != nodes_[ia].value.cols())
    throw ShapeError("add_rowvec needs a 1 x C row matching a's columns");
  Eigen::MatrixXd v = nodes_[ia].value.rowwise() + nodes_[ir].value.row(0);
  int self = static_cast<int>(nodes_.size());
  return push(std::move(v), nodes_[ia].needs_grad || nodes_[ir].needs_grad,
              [self, ia, ir](Tape& t) {
                const Eigen::MatrixXd& g = t.nodes_[self].grad;
                t.accumulate(ia, g);
                t.accumulate(ir, g.colwise().sum());
              });
}

Var Tape::mul_rowvec(Var a, Var row) {
  const int ia = a.idx_, ir = row.idx_;
  if (nodes_[ir].value.rows() != 1 || nodes_[ir].value.cols() != nodes_[ia].value.cols())
    throw ShapeError("mul_rowvec needs a 1 x C row matching a's columns");
  Eigen::MatrixXd v =
      nodes_[ia].value.array().rowwise() * nodes_[ir].value.row(0).array();
  int self = static_cast<int>(nodes_.size());
  return push(std::move(v), nodes_[ia].needs_grad || nodes_[ir].needs_grad,
              [self, ia, ir](Tape& t) {
                const Eigen::MatrixXd& g = t.nodes_[self].grad;
                Eigen::MatrixXd ga =
                    g.array().rowwise() * t.nodes_[ir].value.row(0).array();
                t.accumulate(ia, ga);
                Eigen::MatrixXd gr =
                    (g.cwiseProduct(t.nodes_[ia].value)).colwise().sum();
                t.accumulate(ir, gr);
              });
}

Var Tape::mul_rows(Var a, Eigen::VectorXd weights) {
  const int ia = a.idx_;
  if (weights.size() != nodes_[ia].value.rows())
    throw ShapeError("mul_rows weight count must equal row count");
  Eigen::MatrixXd v = weights.asDiagonal() * nodes_[ia].value;
  int self = static_cast<int>(nodes_.size());
  auto w = std::make_shared<Eigen::VectorXd>(std::move(weights));
  return push(std::move(v), nodes_[ia].needs_grad, [self, ia, w](Tape& t) {
    t.accumulate(ia, w->asDiagonal() * t.nodes_[self].grad);
  });
}

Var Tape::scale(Var a, double s) {
  const int ia = a.idx_;
  int self = static_cast<int>(nodes_.size());
  return push(nodes_[ia].value * s, nodes_[ia].needs_grad, [self, ia, s](Tape& t) {
    t.accumulate(ia, t.nodes_[self].grad * s);
  });
}

Var Tape::exp(Var a) {
  const int ia = a.idx_;
  Eigen::MatrixXd v = nodes_[ia].value.array().exp();
  int self = static_cast<int>(nodes_.size());
  return push(std::move(v), nodes_[ia].needs_grad, [self, ia](Tape& t) {
    t.accumulate(ia, t.nodes_[self].grad.cwiseProduct(t.nodes_[self].value));
  });
}

Var Tape::log(Var a) {
  const int ia = a.idx_;
  Eigen::MatrixXd v = nodes_[ia].value.array().log();
  int self = static_cast<int>(nodes_.size());
  return push(std::move(v), nodes_[ia].needs_grad, [self, ia](Tape& t) {
    t.accumulate(ia, t.nodes_[self].grad.cwiseQuotient(t.nodes_[ia].value));
  });
}

Var Tape::tanh(Var a) {
  const int ia = a.idx_;
  Eigen::MatrixXd v = nodes_[ia].value.array().tanh();
  int self = static_cast<int>(nodes_.size());
  return push(std::move(v), nodes_[ia].needs_grad, [self, ia](Tape& t) {
    Eigen::MatrixXd one_minus =
        1.0 - t.nodes_[self].value.array().square();
    t.accumulate(ia, t.nodes_[self].grad.cwiseProduct(one_minus.matrix()));
  });
}

Var Tape::relu(Var a) {
  const int ia = a.idx_;
  Eigen::MatrixXd v = nodes_[ia].value.cwiseMax(0.0);
  int self = static_cast<int>(nodes_.size());
  return push(std::move(v), nodes_[ia].needs_grad, [self, ia](Tape& t) {
    Eigen::MatrixXd mask =
        (t.nodes_[ia].value.array() > 0.0).cast<double>();
    t.accumulate(ia, t.nodes_[self].grad.cwiseProduct(mask));
  });
}

Var Tape::square(Var a) {
  const int ia = a.idx_;
  Eigen::MatrixXd v = nodes_[ia].value.array().square();
  int self = static_cast<int>(nodes_.size());
  return push(std::move(v), nodes_[ia].needs_grad, [self, ia](Tape& t) {
    t.accumulate(ia, 2.0 * t.nodes_[self].grad.cwiseProduct(t.nodes_[ia].value));
  });
}

Var Tape::cwise_inverse(Var a) {
  const int ia = a.idx_;
  Eigen::MatrixXd v = nodes_[ia].value.cwiseInverse();
  int self = static_cast<int>(nodes_.size());
  return push(std::move(v), nodes_[ia].needs_grad, [self, ia](Tape& t) {
    Eigen::MatrixXd neg_inv_sq = -t.nodes_[self].value.array().square();
    t.accumulate(ia, t.nodes_[self].grad.cwiseProduct(neg_inv_sq.matrix()));
  });
}

Var Tape::cwise_max(Var a, double floor) {
  const int ia = a.idx_;
  Eigen::MatrixXd v = nodes_[ia].value.cwiseMax(floor);
  int self = static_cast<int>(nodes_.size());
  return push(std::move(v), nodes_[ia].needs_grad, [self, ia, floor](Tape& t) {
    Eigen::MatrixXd mask =
        (t.nodes_[ia].value.array() > floor).cast<double>();
    t.accumulate(ia, t.nodes_[self].grad.cwiseProduct(mask));
  });
}

Var Tape::rows(Var a, std::vector<int> index) {
  const int ia = a.idx_;
  const Eigen::MatrixXd& src = nodes_[ia].value;
  for (int r : index) {
    if (r < 0 || r >= src.rows()) throw IndexError("row gather index out of range");
  }
  Eigen::MatrixXd v(static_cast<Eigen::Index>(index.size()), src.cols());
  for (std::size_t i = 0; i < index.size(); ++i) v.row(static_cast<Eigen::Index>(i)) = src.row(index[i]);
  int self = static_cast<int>(nodes_.size());
  auto idx = std::make_shared<std::vector<int>>(std::move(index));
  return push(std::move(v), nodes_[ia].needs_grad, [self, ia, idx](Tape& t) {
    const Eigen::MatrixXd& g = t.nodes_[self].grad;
    Eigen::MatrixXd ga = Eigen::MatrixXd::Zero(t.nodes_[ia].value.rows(),
                                               t.nodes_[ia].value.cols());
    for (std::size_t i = 0; i < idx->size(); ++i)
      ga.row((*idx)[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(ia, ga);
  });
}

Var Tape::cols(Var a, int start, int count) {
  const int ia = a.idx_;
  const Eigen::MatrixXd& src = nodes_[ia].value;
  if (start < 0 || count < 0 || start + count > src.cols())
    throw IndexError("column block out of range");
  int self = static_cast<int>(nodes_.size());
  return push(src.middleCols(start, count), nodes_[ia].needs_grad,
              [self, ia, start, count](Tape& t) {
                Eigen::MatrixXd ga = Eigen::MatrixXd::Zero(
                    t.nodes_[ia].value.rows(), t.nodes_[ia].value.cols());
                ga.middleCols(start, count) = t.nodes_[self].grad;
                t.accumulate(ia, ga);
              });
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows needs at least one part");
  Eigen::Index total = 0;
  const Eigen::Index c = nodes_[parts[0].idx_].value.cols();
  bool ng = false;
  std::vector<int> ids;
  for (Var p : parts) {
    if (nodes_[p.idx_].value.cols() != c) throw ShapeError("concat_rows column mismatch");
    total += nodes_[p.idx_].value.rows();
    ng = ng || nodes_[p.idx_].needs_grad;
    ids.push_back(p.idx_);
  }
  Eigen::MatrixXd v(total, c);
  Eigen::Index at = 0;
  for (int id : ids) {
    v.middleRows(at, nodes_[id].value.rows()) = nodes_[id].value;
    at += nodes_[id].value.rows();
  }
  int self = static_cast<int>(nodes_.size());
  auto shared = std::make_shared<std::vector<int>>(std::move(ids));
  return push(std::move(v), ng, [self, shared](Tape& t) {
    const Eigen::MatrixXd& g = t.nodes_[self].grad;
    Eigen::Index at = 0;
    for (int id : *shared) {
      const Eigen::Index r = t.nodes_[id].value.rows();
      t.accumulate(id, g.middleRows(at, r));
      at += r;
    }
  });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols needs at least one part");
  Eigen::Index total = 0;
  const Eigen::Index r = nodes_[parts[0].idx_].value.rows();
  bool ng = false;
  std::vector<int> ids;
  for (Var p : parts) {
    if (nodes_[p.idx_].value.rows() != r) throw ShapeError("concat_cols row mismatch");
    total += nodes_[p.idx_].value.cols();
    ng = ng || nodes_[p.idx_].needs_grad;
    ids.push_back(p.idx_);
  }
  Eigen::MatrixXd v(r, total);
  Eigen::Index at = 0;
  for (int id : ids) {
    v.middleCols(at, nodes_[id].value.cols()) = nodes_[id].value;
    at += nodes_[id].value.cols();
  }
  int self = static_cast<int>(nodes_.size());
  auto shared = std::make_shared<std::vector<int>>(std::move(ids));
  return push(std::move(v), ng, [self, shared](Tape& t) {
    const Eigen::MatrixXd& g = t.nodes_[self].grad;
    Eigen::Index at = 0;
    for (int id : *shared) {
      const Eigen::Index c = t.nodes_[id].value.cols();
      t.accumulate(id, g.middleCols(at, c));
      at += c;
    }
  });
}

Var Tape::sum(Var a) {
  const int ia = a.idx_;
  Eigen::MatrixXd v(1, 1);
  v(0, 0) = nodes_[ia].value.sum();
  int self = static_cast<int>(nodes_.size());
  return push(std::move(v), nodes_[ia].needs_grad, [self, ia](Tape& t) {
    const double g = t.nodes_[self].grad(0, 0);
    t.accumulate(ia, Eigen::MatrixXd::Constant(t.nodes_[ia].value.rows(),
                                               t.nodes_[ia].value.cols(), g));
  });
}

Var Tape::softmax_rows(Var a, const Eigen::MatrixXd& mask) {
  const int ia = a.idx_;
  const Eigen::MatrixXd& src = nodes_[ia].value;
  if (mask.rows() != src.rows() || mask.cols() != src.cols())
    throw ShapeError("softmax mask shape mismatch");
  Eigen::MatrixXd logits = src + mask;
  Eigen::MatrixXd v(src.rows(), src.cols());
  for (Eigen::Index r = 0; r < src.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    Eigen::ArrayXd e = (logits.row(r).array() - m).exp();
    v.row(r) = (e / e.sum()).matrix();
  }
  int self = static_cast<int>(nodes_.size());
  return push(std::move(v), nodes_[ia].needs_grad, [self, ia](Tape& t) {
    const Eigen::MatrixXd& p = t.nodes_[self].value;
    const Eigen::MatrixXd& g = t.nodes_[self].grad;
    Eigen::MatrixXd ga(p.rows(), p.cols());
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      const double dot = g.row(r).dot(p.row(r));
      ga.row(r) = p.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
    }
    t.accumulate(ia, ga);
  });
}

Var Tape::layer_norm_rows(Var x, Var gain, Var bias, double eps) {
  const int ix = x.idx_, ig = gain.idx_, ib = bias.idx_;
  const Eigen::MatrixXd& src = nodes_[ix].value;
  const Eigen::Index c = src.cols();
  if (nodes_[ig].value.rows() != 1 || nodes_[ig].value.cols() != c ||
      nodes_[ib].value.rows() != 1 || nodes_[ib].value.cols() != c)
    throw ShapeError("layer_norm gain/bias must be 1 x C");

  // Cache per-row inv-std and the normalized activations for the backward.
  auto xhat = std::make_shared<Eigen::MatrixXd>(src.rows(), c);
  auto inv_std = std::make_shared<Eigen::VectorXd>(src.rows());
  Eigen::MatrixXd v(src.rows(), c);
  for (Eigen::Index r = 0; r < src.rows(); ++r) {
    const double mean = src.row(r).mean();
    const double var = (src.row(r).array() - mean).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    xhat->row(r) = ((src.row(r).array() - mean) * is).matrix();
    v.row(r) = (xhat->row(r).cwiseProduct(nodes_[ig].value.row(0)) + nodes_[ib].value.row(0));
  }
  bool ng = nodes_[ix].needs_grad || nodes_[ig].needs_grad || nodes_[ib].needs_grad;
  int self = static_cast<int>(nodes_.size());
  return push(std::move(v), ng, [self, ix, ig, ib, xhat, inv_std](Tape& t) {
    const Eigen::MatrixXd& g = t.nodes_[self].grad;
    const Eigen::MatrixXd& gain_v = t.nodes_[ig].value;
    const Eigen::Index n = g.cols();
    Eigen::MatrixXd gx(g.rows(), n);
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      Eigen::RowVectorXd gh = g.row(r).cwiseProduct(gain_v.row(0));
      const double mean_gh = gh.mean();
      const double mean_ghx = gh.cwiseProduct(xhat->row(r)).mean();
      gx.row(r) = ((gh.array() - mean_gh - xhat->row(r).array() * mean_ghx) * (*inv_std)[r]).matrix();
    }
    t.accumulate(ix, gx);
    t.accumulate(ig, (g.cwiseProduct(*xhat)).colwise().sum());
    t.accumulate(ib, g.colwise().sum());
  });
}

void Tape::zero_grads() {
  for (Node& n : nodes_) {
    n.grad_init = false;
    n.grad.resize(0, 0);
  }
}

void Tape::backward(Var output) {
  Node& out = nodes_[output.idx_];
  if (out.value.rows() != 1 || out.value.cols() != 1)
    throw ShapeError("backward expects a 1x1 output");
  if (!out.needs_grad)
    throw InvalidInput("backward on a node with no gradient path to any leaf");
  out.grad = Eigen::MatrixXd::Ones(1, 1);
  out.grad_init = true;
  for (int i = output.idx_; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.needs_grad && n.grad_init && n.backprop) n.backprop(*this);
  }
}

}  // namespace dpe::ad
