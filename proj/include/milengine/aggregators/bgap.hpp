#pragma once

#include <vector>

#include "milengine/aggregators/common.hpp"

namespace milengine::agg {

// Coordinate-wise mean of the bag's rows.
inline std::vector<double> bgap(const data::EmbeddingBag& bag) {
  if (bag.n == 0) throw DimensionError("bgap: bag '" + bag.slide_id + "' is empty");
  std::vector<double> mean(bag.d, 0.0);
  for (std::size_t i = 0; i < bag.n; ++i) {
    const auto row = bag.row(i);
    for (std::size_t j = 0; j < bag.d; ++j) mean[j] += row[j];
  }
  for (auto& v : mean) v /= static_cast<double>(bag.n);
  return mean;
}

// Batch global average pooling followed by the MLP head.
template <class T>
struct BgapModel {
  MlpHead<T> head;

  static BgapModel init(std::size_t dim, std::size_t num_classes, Rng& rng) {
    return {MlpHead<T>::init(dim, num_classes, rng)};
  }

  std::size_t dim() const { return head.in_dim(); }

  Var embed(Tape<T>& t, Var x) { return nn::mean_rows(t, x, "bgap.mean"); }
  Var forward(Tape<T>& t, Var x) { return head.forward(t, embed(t, x)); }

  std::vector<ParamTensor<T>*> params() { return head.params(); }

  template <class U>
  BgapModel<U> cast() const {
    return {head.template cast<U>()};
  }
};

}  // namespace milengine::agg
