#include "ultraad/autograd.hpp"

#include "ultraad/error.hpp"

#include <algorithm>
#include <cmath>

namespace ultraad::ad {

const Matrix& Var::value() const { return tape_->value(*this); }
const Matrix& Var::grad() const { return tape_->grad(*this); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, recording_, false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::push(Matrix value, std::initializer_list<Var> inputs, Backward fn) {
  return push(std::move(value), std::vector<Var>(inputs), std::move(fn));
}

Var Tape::push(Matrix value, const std::vector<Var>& inputs, Backward fn) {
  bool needs = false;
  for (Var v : inputs) {
    if (v.tape_ != this) throw ValidationError("autograd: mixing vars from different tapes");
    needs = needs || nodes_[v.id_].requires_grad;
  }
  needs = needs && recording_;
  nodes_.push_back(Node{std::move(value), {}, needs, false, needs ? std::move(fn) : Backward{}});
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& n = nodes_[v.id_];
  if (!n.requires_grad) return;
  if (n.has_grad) {
    n.grad += g;
  } else {
    n.grad = g;
    n.has_grad = true;
  }
}

const Matrix& Tape::grad(Var v) {
  Node& n = nodes_[v.id_];
  if (!n.has_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var root) {
  if (!recording_) throw ValidationError("autograd: backward on a non-recording tape");
  if (value(root).rows() != 1 || value(root).cols() != 1) {
    throw ValidationError("autograd: backward root must be a scalar");
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  accumulate(root, Matrix::Ones(1, 1));
  for (std::size_t i = root.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.has_grad && n.backward) n.backward(*this, n.grad);
  }
}

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ValidationError(std::string("autograd: shape mismatch in ") + op);
  }
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw ValidationError("autograd: shape mismatch in matmul");
  Tape& t = *a.tape();
  return t.push(a.value() * b.value(), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
    if (tp.requires_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
  });
}

Var operator+(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  return a.tape()->push(a.value() + b.value(), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var operator-(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  return a.tape()->push(a.value() - b.value(), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, -g);
  });
}

Var operator*(Var a, double s) {
  return a.tape()->push(a.value() * s, {a}, [a, s](Tape& tp, const Matrix& g) { tp.accumulate(a, g * s); });
}

Var operator*(double s, Var a) { return a * s; }

Var add_scalar(Var a, double s) {
  Matrix v = a.value().array() + s;
  return a.tape()->push(std::move(v), {a}, [a](Tape& tp, const Matrix& g) { tp.accumulate(a, g); });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ValidationError("autograd: shape mismatch in add_row");
  Matrix v = a.value().rowwise() + row.value().row(0);
  return a.tape()->push(std::move(v), {a, row}, [a, row](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    if (tp.requires_grad(row)) tp.accumulate(row, g.colwise().sum());
  });
}

Var transpose(Var a) {
  return a.tape()->push(a.value().transpose(), {a},
                        [a](Tape& tp, const Matrix& g) { tp.accumulate(a, g.transpose()); });
}

Var tanh(Var a) {
  Matrix y = a.value().array().tanh();
  return a.tape()->push(y, {a}, [a, y](Tape& tp, const Matrix& g) {
    tp.accumulate(a, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

Var exp(Var a) {
  Matrix y = a.value().array().exp();
  return a.tape()->push(y, {a}, [a, y](Tape& tp, const Matrix& g) {
    tp.accumulate(a, (g.array() * y.array()).matrix());
  });
}

Var sum(Var a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  const auto r = a.rows(), c = a.cols();
  return a.tape()->push(std::move(v), {a},
                        [a, r, c](Tape& tp, const Matrix& g) { tp.accumulate(a, Matrix::Constant(r, c, g(0, 0))); });
}

Var normalize_rows(Var a) {
  const Matrix& x = a.value();
  Eigen::VectorXd norms = x.rowwise().norm();
  for (Eigen::Index r = 0; r < norms.size(); ++r) {
    if (!(norms[r] > 0.0)) throw ValidationError("cannot normalize a zero vector");
  }
  Matrix y = x.array().colwise() / norms.array();
  return a.tape()->push(y, {a}, [a, y, norms](Tape& tp, const Matrix& g) {
    Eigen::VectorXd proj = (g.array() * y.array()).rowwise().sum();
    Matrix ga = g - (y.array().colwise() * proj.array()).matrix();
    tp.accumulate(a, (ga.array().colwise() / norms.array()).matrix());
  });
}

Var softmax_rows(Var a) {
  const Matrix& x = a.value();
  Matrix y = (x.colwise() - x.rowwise().maxCoeff()).array().exp();
  y.array().colwise() /= y.rowwise().sum().array();
  return a.tape()->push(y, {a}, [a, y](Tape& tp, const Matrix& g) {
    Eigen::VectorXd dot = (g.array() * y.array()).rowwise().sum();
    tp.accumulate(a, (y.array() * (g.array().colwise() - dot.array())).matrix());
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ValidationError("autograd: slice_cols out of range");
  const auto r = a.rows(), c = a.cols();
  return a.tape()->push(a.value().middleCols(start, count), {a}, [a, start, count, r, c](Tape& tp, const Matrix& g) {
    Matrix full = Matrix::Zero(r, c);
    full.middleCols(start, count) = g;
    tp.accumulate(a, full);
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ValidationError("autograd: slice_rows out of range");
  const auto r = a.rows(), c = a.cols();
  return a.tape()->push(a.value().middleRows(start, count), {a}, [a, start, count, r, c](Tape& tp, const Matrix& g) {
    Matrix full = Matrix::Zero(r, c);
    full.middleRows(start, count) = g;
    tp.accumulate(a, full);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("autograd: concat of nothing");
  Eigen::Index total = 0;
  for (Var p : parts) {
    if (p.rows() != parts.front().rows()) throw ValidationError("autograd: shape mismatch in concat_cols");
    total += p.cols();
  }
  Matrix v(parts.front().rows(), total);
  Eigen::Index at = 0;
  for (Var p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts.front().tape()->push(std::move(v), parts, [parts](Tape& tp, const Matrix& g) {
    Eigen::Index off = 0;
    for (Var p : parts) {
      const auto n = tp.value(p).cols();
      if (tp.requires_grad(p)) tp.accumulate(p, g.middleCols(off, n));
      off += n;
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("autograd: concat of nothing");
  Eigen::Index total = 0;
  for (Var p : parts) {
    if (p.cols() != parts.front().cols()) throw ValidationError("autograd: shape mismatch in concat_rows");
    total += p.rows();
  }
  Matrix v(total, parts.front().cols());
  Eigen::Index at = 0;
  for (Var p : parts) {
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return parts.front().tape()->push(std::move(v), parts, [parts](Tape& tp, const Matrix& g) {
    Eigen::Index off = 0;
    for (Var p : parts) {
      const auto n = tp.value(p).rows();
      if (tp.requires_grad(p)) tp.accumulate(p, g.middleRows(off, n));
      off += n;
    }
  });
}

Var two_way_softmax(Var sims, double tau) {
  if (sims.cols() != 2) throw ValidationError("autograd: two_way_softmax expects n x 2 similarities");
  if (!(tau > 0.0)) throw ValidationError("temperature must be positive");
  const Matrix& s = sims.value();
  Matrix y(s.rows(), 1);
  for (Eigen::Index i = 0; i < s.rows(); ++i) y(i, 0) = sigmoid((s(i, 1) - s(i, 0)) / tau);
  return sims.tape()->push(y, {sims}, [sims, y, tau](Tape& tp, const Matrix& g) {
    Matrix gs(y.rows(), 2);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const double d = g(i, 0) * y(i, 0) * (1.0 - y(i, 0)) / tau;
      gs(i, 0) = -d;
      gs(i, 1) = d;
    }
    tp.accumulate(sims, gs);
  });
}

Var dice_loss(Var pred, const Matrix& gt, double eps) {
  require_same_shape(pred.value(), gt, "dice_loss");
  const Matrix& p = pred.value();
  const double inter = (p.array() * gt.array()).sum();
  const double denom = p.sum() + gt.sum() + eps;
  Matrix v(1, 1);
  v(0, 0) = 1.0 - (2.0 * inter + eps) / denom;
  return pred.tape()->push(std::move(v), {pred}, [pred, gt, inter, denom, eps](Tape& tp, const Matrix& g) {
    Matrix gp = (-(2.0 * gt.array() * denom - (2.0 * inter + eps)) / (denom * denom)).matrix();
    tp.accumulate(pred, gp * g(0, 0));
  });
}

Var focal_loss(Var pred, const Matrix& gt, double gamma, double alpha) {
  require_same_shape(pred.value(), gt, "focal_loss");
  if (gamma < 0.0) throw ValidationError("focal gamma must be non-negative");
  constexpr double lo = 1e-7, hi = 1.0 - 1e-7;
  const Matrix& p = pred.value();
  const auto n = static_cast<double>(p.size());
  Matrix dloss(p.rows(), p.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double raw = p.data()[i];
    const double pc = std::clamp(raw, lo, hi);
    const bool positive = gt.data()[i] > 0.5;
    const double pt = positive ? pc : 1.0 - pc;
    const double at = positive ? alpha : 1.0 - alpha;
    const double q = 1.0 - pt;
    const double log_pt = std::log(pt);
    total += -at * std::pow(q, gamma) * log_pt;
    double d_pt = -at * std::pow(q, gamma) / pt;
    if (gamma > 0.0) d_pt += at * gamma * std::pow(q, gamma - 1.0) * log_pt;
    const bool clamped = raw < lo || raw > hi;
    dloss.data()[i] = clamped ? 0.0 : (positive ? d_pt : -d_pt) / n;
  }
  Matrix v(1, 1);
  v(0, 0) = total / n;
  return pred.tape()->push(std::move(v), {pred},
                           [pred, dloss](Tape& tp, const Matrix& g) { tp.accumulate(pred, dloss * g(0, 0)); });
}

Var cross_entropy(Var scores, int label) {
  const Matrix& s = scores.value();
  if (s.rows() != 1) throw ValidationError("cross_entropy expects a 1 x C score row");
  if (label < 0 || label >= s.cols()) throw ValidationError("cross_entropy: label out of range");
  const double m = s.maxCoeff();
  Matrix e = (s.array() - m).exp();
  const double z = e.sum();
  Matrix prob = e / z;
  Matrix v(1, 1);
  v(0, 0) = m + std::log(z) - s(0, label);
  return scores.tape()->push(std::move(v), {scores}, [scores, prob, label](Tape& tp, const Matrix& g) {
    Matrix gs = prob;
    gs(0, label) -= 1.0;
    tp.accumulate(scores, gs * g(0, 0));
  });
}

}  // namespace ultraad::ad
