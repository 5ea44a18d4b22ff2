#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "milengine/data/bag.hpp"
#include "milengine/errors.hpp"
#include "milengine/nn/tape.hpp"
#include "milengine/random.hpp"

namespace milengine::agg {

using nn::Matrix;
using nn::ParamTensor;
using nn::Tape;
using nn::Var;

// Uniform in +-sqrt(6 / (fan_in + fan_out)). Drawn in double so float and
// double instantiations of a model start from the same values.
template <class T>
Matrix<T> glorot_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.uniform(-limit, limit));
  return m;
}

template <class T>
ParamTensor<T> weight(std::string name, std::size_t rows, std::size_t cols, Rng& rng) {
  return ParamTensor<T>(std::move(name), glorot_uniform<T>(rows, cols, rng));
}

template <class T>
ParamTensor<T> zeros(std::string name, std::size_t rows, std::size_t cols) {
  return ParamTensor<T>(std::move(name), Matrix<T>::Zero(rows, cols));
}

template <class T>
ParamTensor<T> ones(std::string name, std::size_t rows, std::size_t cols) {
  return ParamTensor<T>(std::move(name), Matrix<T>::Ones(rows, cols));
}

template <class T>
Matrix<T> bag_matrix(const data::EmbeddingBag& bag) {
  if (bag.n == 0) throw DimensionError("bag '" + bag.slide_id + "' is empty");
  Matrix<T> x(bag.n, bag.d);
  for (std::size_t i = 0; i < bag.data.size(); ++i) x.data()[i] = static_cast<T>(bag.data[i]);
  return x;
}

template <class T>
std::vector<double> row_vector(const Matrix<T>& m) {
  std::vector<double> out(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<double>(m.data()[i]);
  return out;
}

template <class T, class U>
std::vector<ParamTensor<U>> cast_params(const std::vector<ParamTensor<T>>& in) {
  std::vector<ParamTensor<U>> out;
  out.reserve(in.size());
  for (const auto& p : in) out.push_back(p.template cast<U>());
  return out;
}

inline constexpr std::size_t kHeadHidden = 128;

// in_dim -> 128 (tanh) -> S (softmax)
template <class T>
struct MlpHead {
  ParamTensor<T> w1, b1, w2, b2;

  static MlpHead init(std::size_t in_dim, std::size_t num_classes, Rng& rng) {
    return {weight<T>("head.w1", in_dim, kHeadHidden, rng), zeros<T>("head.b1", 1, kHeadHidden),
            weight<T>("head.w2", kHeadHidden, num_classes, rng), zeros<T>("head.b2", 1, num_classes)};
  }

  std::size_t in_dim() const { return static_cast<std::size_t>(w1.value.rows()); }
  std::size_t num_classes() const { return static_cast<std::size_t>(w2.value.cols()); }

  Var forward(Tape<T>& t, Var z) {
    if (static_cast<std::size_t>(t.value(z).cols()) != in_dim()) {
      throw DimensionError("classifier head expects dim " + std::to_string(in_dim()) + ", got " +
                           std::to_string(t.value(z).cols()));
    }
    Var h = nn::tanh(t, nn::add_bias(t, nn::matmul(t, z, t.param(w1), "head.l1"), t.param(b1), "head.l1.bias"),
                     "head.tanh");
    Var logits = nn::add_bias(t, nn::matmul(t, h, t.param(w2), "head.l2"), t.param(b2), "head.logits");
    return nn::softmax_rows(t, logits, "head.softmax");
  }

  std::vector<ParamTensor<T>*> params() { return {&w1, &b1, &w2, &b2}; }

  template <class U>
  MlpHead<U> cast() const {
    return {w1.template cast<U>(), b1.template cast<U>(), w2.template cast<U>(), b2.template cast<U>()};
  }
};

// Class scores for one slide embedding.
template <class T>
std::vector<double> classify(std::span<const double> embedding, MlpHead<T>& head) {
  Tape<T> t;
  Matrix<T> z(1, static_cast<Eigen::Index>(embedding.size()));
  for (std::size_t j = 0; j < embedding.size(); ++j) z(0, static_cast<Eigen::Index>(j)) = static_cast<T>(embedding[j]);
  return row_vector(t.value(head.forward(t, t.constant(std::move(z), "embedding"))));
}

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace milengine::agg
