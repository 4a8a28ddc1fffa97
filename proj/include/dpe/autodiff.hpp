#pragma once

#include <Eigen/Core>
#include <functional>
#include <vector>

#include "dpe/common.hpp"

namespace dpe::ad {

class Tape;

// Handle to a tape node. Valid only while its tape is alive.
class Var {
 public:
  Var() = default;
  const Eigen::MatrixXd& value() const;
  const Eigen::MatrixXd& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, int idx) : tape_(tape), idx_(idx) {}
  Tape* tape_ = nullptr;
  int idx_ = -1;
};

// Reverse-mode tape over dense matrices. Build a scalar (1x1) output with
// the ops below, call backward(out), then read grads off the leaves.
class Tape {
 public:
  Var leaf(Eigen::MatrixXd value);      // gradient tracked
  Var constant(Eigen::MatrixXd value);  // gradient not tracked

  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var hadamard(Var a, Var b);
  Var add_rowvec(Var a, Var row);  // row: 1 x C, broadcast over rows of a
  Var mul_rowvec(Var a, Var row);  // elementwise, row broadcast
  Var mul_rows(Var a, Eigen::VectorXd weights);  // row r scaled by weights[r]
  Var scale(Var a, double s);
  Var exp(Var a);
  Var log(Var a);
  Var tanh(Var a);
  Var relu(Var a);
  Var square(Var a);
  Var cwise_inverse(Var a);
  Var cwise_max(Var a, double floor);
  Var rows(Var a, std::vector<int> index);        // gather rows
  Var cols(Var a, int start, int count);          // contiguous column block
  Var concat_rows(const std::vector<Var>& parts);
  Var concat_cols(const std::vector<Var>& parts);
  Var sum(Var a);  // 1x1 total
  // Row-wise softmax of (a + mask); mask entries of -inf knock positions out
  // exactly (their weight is a hard 0.0, which keeps masked columns from
  // perturbing the output in even the last bit).
  Var softmax_rows(Var a, const Eigen::MatrixXd& mask);
  // Per-row layer norm with learned gain/bias (both 1 x C).
  Var layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-5);

  void backward(Var output);  // output must be 1x1
  void zero_grads();          // clear accumulated gradients for another backward

  const Eigen::MatrixXd& value(Var v) const;
  const Eigen::MatrixXd& grad(Var v) const;
  // Zero matrix when backward never reached v (an unused leaf).
  Eigen::MatrixXd grad_or_zero(Var v) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Eigen::MatrixXd value;
    Eigen::MatrixXd grad;
    bool needs_grad = false;
    bool grad_init = false;
    std::function<void(Tape&)> backprop;  // pulls this node's grad into parents
  };

  friend class Var;
  Var push(Eigen::MatrixXd value, bool needs_grad, std::function<void(Tape&)> backprop);
  void accumulate(int idx, const Eigen::MatrixXd& g);
  Eigen::MatrixXd& grad_ref(int idx);
  Node& node(int idx) { return nodes_[idx]; }

  std::vector<Node> nodes_;
};

}  // namespace dpe::ad
