#pragma once

// Minimal reverse-mode differentiation over dense matrices.
//
// A Tape records every operation applied to its Vars together with a
// hand-written backward rule. Tape::backward() sweeps the record in reverse
// and accumulates gradients into every node that depends on a parameter.
// A tape built with record_gradients=false only evaluates values, which is
// what inference uses.

#include "ultraad/tensor.hpp"

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <vector>

namespace ultraad::ad {

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  // Leaf whose gradient is kept after backward(). Behaves like a constant
  // on a non-recording tape.
  Var parameter(Matrix value);

  // Seeds d(root)/d(root) = 1; root must be 1x1.
  void backward(Var root);

  const Matrix& value(Var v) const { return nodes_[v.id_].value; }
  // Zero matrix of the right shape when no gradient reached the node.
  const Matrix& grad(Var v);
  bool requires_grad(Var v) const { return nodes_[v.id_].requires_grad; }
  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  // Records an op. `fn` is dropped unless some input requires a gradient.
  Var push(Matrix value, std::initializer_list<Var> inputs, Backward fn);
  Var push(Matrix value, const std::vector<Var>& inputs, Backward fn);
  void accumulate(Var v, const Matrix& g);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  bool recording_;
  std::vector<Node> nodes_;
};

Var matmul(Var a, Var b);
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, double s);
Var operator*(double s, Var a);
Var add_scalar(Var a, double s);
// a (n x k) plus row (1 x k) broadcast over rows.
Var add_row(Var a, Var row);
Var transpose(Var a);
Var tanh(Var a);
Var exp(Var a);
Var sum(Var a);
Var normalize_rows(Var a);
Var softmax_rows(Var a);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);

// sims is n x 2 with column 0 = similarity to the normal prompt and column 1
// to the abnormal prompt. Returns n x 1 abnormal probabilities
// exp(s1/tau) / (exp(s0/tau) + exp(s1/tau)).
Var two_way_softmax(Var sims, double tau);

// Dice loss 1 - (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps).
Var dice_loss(Var pred, const Matrix& gt, double eps = 1.0);
// Mean focal loss with predictions clamped to [1e-7, 1 - 1e-7].
Var focal_loss(Var pred, const Matrix& gt, double gamma, double alpha);
// -log softmax(scores)[label]; scores is 1 x C.
Var cross_entropy(Var scores, int label);

}  // namespace ultraad::ad
