#pragma once

// Reverse-mode tape over dense row-major matrices.
//
// A Tape records one forward pass. Each op computes its value eagerly, checks it
// for NaN/Inf, and registers a closure that pushes the node's gradient back
// into its inputs. Tape::backward seeds d(loss)/d(loss) = 1 and replays the
// closures in reverse; gradients reaching parameter nodes are accumulated into
// the owning ParamTensor.
//
// The scalar type T is float for training and double for gradient checks.
// Row reductions (means, softmax normalizers, layer-norm moments) always
// accumulate in double; matrix products use Eigen's kernels in T.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "milengine/errors.hpp"

namespace milengine::nn {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// x * 0 is NaN exactly when x is NaN or +-Inf, so one vectorized sum checks
// every element.
template <class T>
bool all_finite(const Matrix<T>& m) {
  return (m.array() * T(0)).sum() == T(0);
}

template <class T>
struct ParamTensor {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;

  ParamTensor() = default;
  ParamTensor(std::string n, Matrix<T> v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix<T>::Zero(value.rows(), value.cols())) {}

  std::size_t size() const { return static_cast<std::size_t>(value.size()); }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }

  template <class U>
  ParamTensor<U> cast() const {
    return ParamTensor<U>(name, value.template cast<U>());
  }
};

struct Var {
  std::size_t id = 0;
};

template <class T>
class Tape {
 public:
  using Mat = Matrix<T>;
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Var constant(Mat value, std::string name = "input") {
    return push(std::move(name), std::move(value), {}, false);
  }

  // Parameter nodes alias the tensor's value; their gradient accumulates
  // straight into ParamTensor::grad.
  Var param(ParamTensor<T>& p) {
    nodes_.push_back(Node{p.name, Mat(), Mat(), {}, &p, true});
    return Var{nodes_.size() - 1};
  }

  // Registers an op result; ops pass needs_grad = any input needs a gradient.
  Var push(std::string name, Mat value, Backward backward, bool needs_grad) {
    if (!all_finite(value)) throw NumericError("non-finite value produced by node '" + name + "'");
    nodes_.push_back(Node{std::move(name), std::move(value), Mat(), std::move(backward), nullptr, needs_grad});
    return Var{nodes_.size() - 1};
  }

  const Mat& value(Var v) const { return value_of(v.id); }
  const Mat& grad(Var v) const {
    const Node& n = nodes_[v.id];
    return n.param != nullptr ? n.param->grad : n.grad;
  }
  Mat& grad_mut(std::size_t id) { return nodes_[id].grad; }
  const Mat& value_of(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.param != nullptr ? n.param->value : n.value;
  }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  const std::string& name(Var v) const { return nodes_[v.id].name; }
  std::size_t size() const { return nodes_.size(); }

  T scalar(Var v) const {
    const Mat& m = value(v);
    if (m.rows() != 1 || m.cols() != 1) throw DimensionError("node '" + name(v) + "' is not a scalar");
    return m(0, 0);
  }

  // Gradient accumulation target for node `id`; allocated on first use.
  Mat& accum(std::size_t id) {
    Node& n = nodes_[id];
    if (n.param != nullptr) return n.param->grad;
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void backward(Var loss) {
    if (value(loss).size() != 1) throw DimensionError("backward() needs a scalar loss");
    if (nodes_[loss.id].param != nullptr) throw DimensionError("backward() needs a computed loss node");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    accum(loss.id)(0, 0) = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.param != nullptr || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, i);
    }
  }

  // Branch states of every kinked op (clamps) in this pass; grad_check uses it
  // to detect perturbations that cross a non-differentiable point.
  const std::vector<std::int8_t>& kink_signature() const { return kinks_; }
  void record_kink(std::int8_t state) { kinks_.push_back(state); }

 private:
  struct Node {
    std::string name;
    Mat value;
    Mat grad;
    Backward backward;
    ParamTensor<T>* param;
    bool needs_grad;
  };
  std::vector<Node> nodes_;
  std::vector<std::int8_t> kinks_;
};

namespace detail {

inline void require(bool ok, const std::string& op, const std::string& what) {
  if (!ok) throw DimensionError(op + ": " + what);
}

inline std::string shape(long r, long c) { return std::to_string(r) + "x" + std::to_string(c); }

}  // namespace detail

// a (n x k) * b (k x m)
template <class T>
Var matmul(Tape<T>& t, Var a, Var b, std::string name = "matmul") {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  detail::require(A.cols() == B.rows(), name,
                  "shape mismatch " + detail::shape(A.rows(), A.cols()) + " * " + detail::shape(B.rows(), B.cols()));
  Matrix<T> out = A * B;
  return t.push(std::move(name), std::move(out),
                [a, b](Tape<T>& tp, std::size_t self) {
                  const auto& G = tp.grad_mut(self);
                  if (tp.needs_grad(a)) tp.accum(a.id).noalias() += G * tp.value(b).transpose();
                  if (tp.needs_grad(b)) tp.accum(b.id).noalias() += tp.value(a).transpose() * G;
                },
                t.needs_grad(a) || t.needs_grad(b));
}

// a (n x k) * b^T, b is (m x k)
template <class T>
Var matmul_nt(Tape<T>& t, Var a, Var b, std::string name = "matmul_nt") {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  detail::require(A.cols() == B.cols(), name,
                  "shape mismatch " + detail::shape(A.rows(), A.cols()) + " * (" +
                      detail::shape(B.rows(), B.cols()) + ")^T");
  Matrix<T> out = A * B.transpose();
  return t.push(std::move(name), std::move(out),
                [a, b](Tape<T>& tp, std::size_t self) {
                  const auto& G = tp.grad_mut(self);
                  if (tp.needs_grad(a)) tp.accum(a.id).noalias() += G * tp.value(b);
                  if (tp.needs_grad(b)) tp.accum(b.id).noalias() += G.transpose() * tp.value(a);
                },
                t.needs_grad(a) || t.needs_grad(b));
}

template <class T>
Var transpose(Tape<T>& t, Var a, std::string name = "transpose") {
  Matrix<T> out = t.value(a).transpose();
  return t.push(std::move(name), std::move(out),
                [a](Tape<T>& tp, std::size_t self) { tp.accum(a.id) += tp.grad_mut(self).transpose(); },
                t.needs_grad(a));
}

// x (n x m) + bias (1 x m), broadcast over rows
template <class T>
Var add_bias(Tape<T>& t, Var x, Var bias, std::string name = "add_bias") {
  const auto& X = t.value(x);
  const auto& B = t.value(bias);
  detail::require(B.rows() == 1 && B.cols() == X.cols(), name,
                  "bias " + detail::shape(B.rows(), B.cols()) + " vs input " + detail::shape(X.rows(), X.cols()));
  Matrix<T> out = X.rowwise() + B.row(0);
  return t.push(std::move(name), std::move(out),
                [x, bias](Tape<T>& tp, std::size_t self) {
                  const auto& G = tp.grad_mut(self);
                  if (tp.needs_grad(x)) tp.accum(x.id) += G;
                  if (tp.needs_grad(bias)) {
                    auto& gb = tp.accum(bias.id);
                    for (Eigen::Index j = 0; j < G.cols(); ++j) {
                      double s = 0.0;
                      for (Eigen::Index i = 0; i < G.rows(); ++i) s += G(i, j);
                      gb(0, j) += static_cast<T>(s);
                    }
                  }
                },
                t.needs_grad(x) || t.needs_grad(bias));
}

template <class T>
Var add(Tape<T>& t, Var a, Var b, std::string name = "add") {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  detail::require(A.rows() == B.rows() && A.cols() == B.cols(), name,
                  "shape mismatch " + detail::shape(A.rows(), A.cols()) + " + " + detail::shape(B.rows(), B.cols()));
  Matrix<T> out = A + B;
  return t.push(std::move(name), std::move(out),
                [a, b](Tape<T>& tp, std::size_t self) {
                  const auto& G = tp.grad_mut(self);
                  if (tp.needs_grad(a)) tp.accum(a.id) += G;
                  if (tp.needs_grad(b)) tp.accum(b.id) += G;
                },
                t.needs_grad(a) || t.needs_grad(b));
}

template <class T>
Var scale(Tape<T>& t, Var x, double factor, std::string name = "scale") {
  Matrix<T> out = t.value(x) * static_cast<T>(factor);
  return t.push(std::move(name), std::move(out),
                [x, factor](Tape<T>& tp, std::size_t self) {
                  tp.accum(x.id) += tp.grad_mut(self) * static_cast<T>(factor);
                },
                t.needs_grad(x));
}

template <class T>
Var tanh(Tape<T>& t, Var x, std::string name = "tanh") {
  Matrix<T> out = t.value(x).array().tanh().matrix();
  return t.push(std::move(name), std::move(out),
                [x](Tape<T>& tp, std::size_t self) {
                  const auto& Y = tp.value_of(self);
                  tp.accum(x.id).array() += tp.grad_mut(self).array() * (T(1) - Y.array().square());
                },
                t.needs_grad(x));
}

template <class T>
Var sigmoid(Tape<T>& t, Var x, std::string name = "sigmoid") {
  const auto& X = t.value(x);
  Matrix<T> out(X.rows(), X.cols());
  for (Eigen::Index i = 0; i < X.size(); ++i) {
    const T v = X.data()[i];
    // Split by sign so exp never overflows.
    out.data()[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  return t.push(std::move(name), std::move(out),
                [x](Tape<T>& tp, std::size_t self) {
                  const auto& Y = tp.value_of(self);
                  tp.accum(x.id).array() += tp.grad_mut(self).array() * Y.array() * (T(1) - Y.array());
                },
                t.needs_grad(x));
}

template <class T>
Var hadamard(Tape<T>& t, Var a, Var b, std::string name = "hadamard") {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  detail::require(A.rows() == B.rows() && A.cols() == B.cols(), name,
                  "shape mismatch " + detail::shape(A.rows(), A.cols()) + " .* " + detail::shape(B.rows(), B.cols()));
  Matrix<T> out = A.cwiseProduct(B);
  return t.push(std::move(name), std::move(out),
                [a, b](Tape<T>& tp, std::size_t self) {
                  const auto& G = tp.grad_mut(self);
                  if (tp.needs_grad(a)) tp.accum(a.id) += G.cwiseProduct(tp.value(b));
                  if (tp.needs_grad(b)) tp.accum(b.id) += G.cwiseProduct(tp.value(a));
                },
                t.needs_grad(a) || t.needs_grad(b));
}

// Softmax along each row, max-subtracted, normalizer accumulated in double.
template <class T>
Matrix<T> softmax_rows_value(const Matrix<T>& X) {
  Matrix<T> out(X.rows(), X.cols());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double mx = static_cast<double>(X.row(i).maxCoeff());
    double sum = 0.0;
    for (Eigen::Index j = 0; j < X.cols(); ++j) sum += std::exp(static_cast<double>(X(i, j)) - mx);
    for (Eigen::Index j = 0; j < X.cols(); ++j)
      out(i, j) = static_cast<T>(std::exp(static_cast<double>(X(i, j)) - mx) / sum);
  }
  return out;
}

template <class T>
Var softmax_rows(Tape<T>& t, Var x, std::string name = "softmax") {
  Matrix<T> out = softmax_rows_value(t.value(x));
  return t.push(std::move(name), std::move(out),
                [x](Tape<T>& tp, std::size_t self) {
                  const auto& Y = tp.value_of(self);
                  const auto& G = tp.grad_mut(self);
                  auto& gx = tp.accum(x.id);
                  for (Eigen::Index i = 0; i < Y.rows(); ++i) {
                    double dot = 0.0;
                    for (Eigen::Index j = 0; j < Y.cols(); ++j) dot += static_cast<double>(G(i, j)) * Y(i, j);
                    for (Eigen::Index j = 0; j < Y.cols(); ++j)
                      gx(i, j) += static_cast<T>(Y(i, j) * (static_cast<double>(G(i, j)) - dot));
                  }
                },
                t.needs_grad(x));
}

// Per-row normalization to zero mean / unit variance (biased), then gain and shift.
template <class T>
Var layer_norm(Tape<T>& t, Var x, Var gain, Var shift, double eps = 1e-5, std::string name = "layer_norm") {
  const auto& X = t.value(x);
  const auto& G = t.value(gain);
  const auto& B = t.value(shift);
  detail::require(G.rows() == 1 && G.cols() == X.cols() && B.rows() == 1 && B.cols() == X.cols(), name,
                  "gain/shift must be 1x" + std::to_string(X.cols()));
  const Eigen::Index n = X.rows();
  const Eigen::Index m = X.cols();
  Matrix<T> xhat(n, m);
  std::vector<double> inv_std(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    double mean = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) mean += X(i, j);
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) {
      const double c = X(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(m);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (Eigen::Index j = 0; j < m; ++j) xhat(i, j) = static_cast<T>((X(i, j) - mean) * is);
  }
  Matrix<T> out = (xhat.array().rowwise() * G.row(0).array()).rowwise() + B.row(0).array();
  return t.push(std::move(name), std::move(out),
                [x, gain, shift, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& tp, std::size_t self) {
                  const auto& Gout = tp.grad_mut(self);
                  const auto& gvec = tp.value(gain);
                  const Eigen::Index rows = Gout.rows();
                  const Eigen::Index cols = Gout.cols();
                  if (tp.needs_grad(gain) || tp.needs_grad(shift)) {
                    for (Eigen::Index j = 0; j < cols; ++j) {
                      double sg = 0.0, sb = 0.0;
                      for (Eigen::Index i = 0; i < rows; ++i) {
                        sg += static_cast<double>(Gout(i, j)) * xhat(i, j);
                        sb += Gout(i, j);
                      }
                      if (tp.needs_grad(gain)) tp.accum(gain.id)(0, j) += static_cast<T>(sg);
                      if (tp.needs_grad(shift)) tp.accum(shift.id)(0, j) += static_cast<T>(sb);
                    }
                  }
                  if (!tp.needs_grad(x)) return;
                  auto& gx = tp.accum(x.id);
                  for (Eigen::Index i = 0; i < rows; ++i) {
                    double mean_g = 0.0, mean_gx = 0.0;
                    for (Eigen::Index j = 0; j < cols; ++j) {
                      const double gh = static_cast<double>(Gout(i, j)) * gvec(0, j);
                      mean_g += gh;
                      mean_gx += gh * xhat(i, j);
                    }
                    mean_g /= static_cast<double>(cols);
                    mean_gx /= static_cast<double>(cols);
                    const double is = inv_std[static_cast<std::size_t>(i)];
                    for (Eigen::Index j = 0; j < cols; ++j) {
                      const double gh = static_cast<double>(Gout(i, j)) * gvec(0, j);
                      gx(i, j) += static_cast<T>(is * (gh - mean_g - xhat(i, j) * mean_gx));
                    }
                  }
                },
                t.needs_grad(x) || t.needs_grad(gain) || t.needs_grad(shift));
}

// Column-wise mean over rows: (n x m) -> (1 x m).
template <class T>
Var mean_rows(Tape<T>& t, Var x, std::string name = "mean_rows") {
  const auto& X = t.value(x);
  detail::require(X.rows() >= 1, name, "empty input");
  Matrix<T> out(1, X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < X.rows(); ++i) s += X(i, j);
    out(0, j) = static_cast<T>(s / static_cast<double>(X.rows()));
  }
  return t.push(std::move(name), std::move(out),
                [x](Tape<T>& tp, std::size_t self) {
                  auto& gx = tp.accum(x.id);
                  const auto& G = tp.grad_mut(self);
                  const T inv = static_cast<T>(1.0 / static_cast<double>(gx.rows()));
                  gx.rowwise() += G.row(0) * inv;
                },
                t.needs_grad(x));
}

template <class T>
Var concat_rows(Tape<T>& t, Var top, Var bottom, std::string name = "concat_rows") {
  const auto& A = t.value(top);
  const auto& B = t.value(bottom);
  detail::require(A.cols() == B.cols(), name,
                  "column mismatch " + std::to_string(A.cols()) + " vs " + std::to_string(B.cols()));
  Matrix<T> out(A.rows() + B.rows(), A.cols());
  out.topRows(A.rows()) = A;
  out.bottomRows(B.rows()) = B;
  return t.push(std::move(name), std::move(out),
                [top, bottom, ra = A.rows()](Tape<T>& tp, std::size_t self) {
                  const auto& G = tp.grad_mut(self);
                  if (tp.needs_grad(top)) tp.accum(top.id) += G.topRows(ra);
                  if (tp.needs_grad(bottom)) tp.accum(bottom.id) += G.bottomRows(G.rows() - ra);
                },
                t.needs_grad(top) || t.needs_grad(bottom));
}

template <class T>
Var slice_rows(Tape<T>& t, Var x, Eigen::Index start, Eigen::Index count, std::string name = "slice_rows") {
  const auto& X = t.value(x);
  detail::require(start >= 0 && count >= 1 && start + count <= X.rows(), name, "row range out of bounds");
  Matrix<T> out = X.middleRows(start, count);
  return t.push(std::move(name), std::move(out),
                [x, start, count](Tape<T>& tp, std::size_t self) {
                  tp.accum(x.id).middleRows(start, count) += tp.grad_mut(self);
                },
                t.needs_grad(x));
}

template <class T>
Var slice_cols(Tape<T>& t, Var x, Eigen::Index start, Eigen::Index count, std::string name = "slice_cols") {
  const auto& X = t.value(x);
  detail::require(start >= 0 && count >= 1 && start + count <= X.cols(), name, "column range out of bounds");
  Matrix<T> out = X.middleCols(start, count);
  return t.push(std::move(name), std::move(out),
                [x, start, count](Tape<T>& tp, std::size_t self) {
                  tp.accum(x.id).middleCols(start, count) += tp.grad_mut(self);
                },
                t.needs_grad(x));
}

template <class T>
Var concat_cols(Tape<T>& t, const std::vector<Var>& parts, std::string name = "concat_cols") {
  detail::require(!parts.empty(), name, "nothing to concatenate");
  const Eigen::Index rows = t.value(parts.front()).rows();
  Eigen::Index cols = 0;
  bool needs = false;
  for (Var p : parts) {
    detail::require(t.value(p).rows() == rows, name, "row mismatch");
    cols += t.value(p).cols();
    needs = needs || t.needs_grad(p);
  }
  Matrix<T> out(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleCols(at, t.value(p).cols()) = t.value(p);
    at += t.value(p).cols();
  }
  return t.push(std::move(name), std::move(out),
                [parts](Tape<T>& tp, std::size_t self) {
                  const auto& G = tp.grad_mut(self);
                  Eigen::Index off = 0;
                  for (Var p : parts) {
                    const Eigen::Index c = tp.value(p).cols();
                    if (tp.needs_grad(p)) tp.accum(p.id) += G.middleCols(off, c);
                    off += c;
                  }
                },
                needs);
}

// Elementwise clamp into [lo, hi]; gradient passes only strictly inside.
template <class T>
Var clamp(Tape<T>& t, Var x, double lo, double hi, std::string name = "clamp") {
  const auto& X = t.value(x);
  Matrix<T> out(X.rows(), X.cols());
  for (Eigen::Index i = 0; i < X.size(); ++i) {
    const double v = X.data()[i];
    std::int8_t state = 0;
    if (v < lo) state = -1;
    else if (v > hi) state = 1;
    else if (v == lo || v == hi) state = 2;
    t.record_kink(state);
    out.data()[i] = static_cast<T>(v < lo ? lo : (v > hi ? hi : v));
  }
  return t.push(std::move(name), std::move(out),
                [x, lo, hi](Tape<T>& tp, std::size_t self) {
                  const auto& X = tp.value(x);
                  const auto& G = tp.grad_mut(self);
                  auto& gx = tp.accum(x.id);
                  for (Eigen::Index i = 0; i < X.size(); ++i) {
                    const double v = X.data()[i];
                    if (v > lo && v < hi) gx.data()[i] += G.data()[i];
                  }
                },
                t.needs_grad(x));
}

template <class T>
Var log(Tape<T>& t, Var x, std::string name = "log") {
  const auto& X = t.value(x);
  Matrix<T> out = X.array().log().matrix();
  return t.push(std::move(name), std::move(out),
                [x](Tape<T>& tp, std::size_t self) {
                  tp.accum(x.id).array() += tp.grad_mut(self).array() / tp.value(x).array();
                },
                t.needs_grad(x));
}

// GELU, approximated as x * sigmoid(1.702 x).
template <class T>
Var gelu(Tape<T>& t, Var x, const std::string& name = "gelu") {
  Var gate = sigmoid(t, scale(t, x, 1.702, name + ".scale"), name + ".sigmoid");
  return hadamard(t, x, gate, name);
}

}  // namespace milengine::nn
