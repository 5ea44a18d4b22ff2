#pragma once

// Gated attention pooling:
//   a_n = softmax_n( w^T ( tanh(V^T x_n) .* sigmoid(U^T x_n) ) ),   Z = sum_n a_n x_n

#include <type_traits>
#include <vector>

#include "milengine/aggregators/common.hpp"

namespace milengine::agg {

inline constexpr std::size_t kAbmilHidden = 128;

template <class T>
struct AbmilModel {
  ParamTensor<T> V;  // d x h
  ParamTensor<T> U;  // d x h, gate
  ParamTensor<T> w;  // h x 1
  MlpHead<T> head;

  static AbmilModel init(std::size_t dim, std::size_t num_classes, Rng& rng, std::size_t hidden = kAbmilHidden) {
    AbmilModel m;
    m.V = weight<T>("abmil.V", dim, hidden, rng);
    m.U = weight<T>("abmil.U", dim, hidden, rng);
    m.w = weight<T>("abmil.w", hidden, 1, rng);
    m.head = MlpHead<T>::init(dim, num_classes, rng);
    return m;
  }

  std::size_t dim() const { return static_cast<std::size_t>(V.value.rows()); }
  std::size_t hidden() const { return static_cast<std::size_t>(V.value.cols()); }

  struct Attended {
    Var embedding;  // 1 x d
    Var attention;  // 1 x N
  };

  Attended attend(Tape<T>& t, Var x) {
    if (static_cast<std::size_t>(t.value(x).cols()) != dim()) {
      throw DimensionError("abmil: model expects d=" + std::to_string(dim()) + ", bag has d=" +
                           std::to_string(t.value(x).cols()));
    }
    Var content = nn::tanh(t, nn::matmul(t, x, t.param(V), "abmil.xV"), "abmil.tanh");
    Var gate = nn::sigmoid(t, nn::matmul(t, x, t.param(U), "abmil.xU"), "abmil.gate");
    Var logits = nn::matmul(t, nn::hadamard(t, content, gate, "abmil.gated"), t.param(w), "abmil.logits");
    Var attention = nn::softmax_rows(t, nn::transpose(t, logits, "abmil.logits_t"), "abmil.attention");
    return {nn::matmul(t, attention, x, "abmil.pool"), attention};
  }

  Var embed(Tape<T>& t, Var x) { return attend(t, x).embedding; }
  Var forward(Tape<T>& t, Var x) { return head.forward(t, embed(t, x)); }

  // Trainable attention parameters, then the head.
  std::vector<ParamTensor<T>*> params() {
    std::vector<ParamTensor<T>*> out{&V, &U, &w};
    for (auto* p : head.params()) out.push_back(p);
    return out;
  }

  template <class U2>
  AbmilModel<U2> cast() const {
    return {V.template cast<U2>(), U.template cast<U2>(), w.template cast<U2>(), head.template cast<U2>()};
  }
};

struct AttentionResult {
  std::vector<double> embedding;  // d
  std::vector<double> attention;  // N
};

// Evaluated in double whatever the parameter storage type.
template <class T>
AttentionResult abmil_attend(const data::EmbeddingBag& bag, AbmilModel<T>& model) {
  if constexpr (!std::is_same_v<T, double>) {
    auto wide = model.template cast<double>();
    return abmil_attend(bag, wide);
  } else {
    Tape<double> t;
    auto out = model.attend(t, t.constant(bag_matrix<double>(bag), "bag"));
    return {row_vector(t.value(out.embedding)), row_vector(t.value(out.attention))};
  }
}

}  // namespace milengine::agg
