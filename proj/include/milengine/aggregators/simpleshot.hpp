#pragma once

// Nearest-prototype classification. Prototype s is the mean of every instance
// row pooled across the training bags of class s (so larger bags weigh more);
// a query bag is reduced to its BGAP vector and assigned to the prototype with
// the highest cosine similarity, lowest class index on ties.

#include <cmath>
#include <span>
#include <vector>

#include "milengine/aggregators/bgap.hpp"

namespace milengine::agg {

struct Prototypes {
  std::size_t num_classes = 0;
  std::size_t dim = 0;
  std::vector<float> values;  // num_classes x dim, row-major
  // Rows stored L2-normalized. Cosine similarity is unaffected either way.
  bool normalized = false;

  std::span<const float> row(std::size_t s) const { return {values.data() + s * dim, dim}; }
};

struct LabeledBag {
  const data::EmbeddingBag* bag;
  std::size_t label;
};

inline Prototypes fit_prototypes(std::span<const LabeledBag> train, std::size_t num_classes, bool normalize = false) {
  if (train.empty()) throw ConfigError("fit_prototypes: empty training set");
  const std::size_t d = train.front().bag->d;
  std::vector<double> sums(num_classes * d, 0.0);
  std::vector<std::size_t> rows(num_classes, 0);
  std::vector<std::size_t> bags(num_classes, 0);
  for (const auto& item : train) {
    if (item.label >= num_classes) throw DimensionError("fit_prototypes: label out of range");
    if (item.bag->d != d) throw DimensionError("fit_prototypes: mixed embedding dimensions");
    ++bags[item.label];
    for (std::size_t i = 0; i < item.bag->n; ++i) {
      const auto r = item.bag->row(i);
      for (std::size_t j = 0; j < d; ++j) sums[item.label * d + j] += r[j];
    }
    rows[item.label] += item.bag->n;
  }
  Prototypes p{num_classes, d, std::vector<float>(num_classes * d), normalize};
  for (std::size_t s = 0; s < num_classes; ++s) {
    if (bags[s] == 0) throw ConfigError("fit_prototypes: class " + std::to_string(s) + " has no training bags");
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      sums[s * d + j] /= static_cast<double>(rows[s]);
      norm += sums[s * d + j] * sums[s * d + j];
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < d; ++j) {
      const double v = normalize && norm > 0.0 ? sums[s * d + j] / norm : sums[s * d + j];
      p.values[s * d + j] = static_cast<float>(v);
    }
  }
  return p;
}

// Cosine similarity; defined as 0 when either vector has zero norm.
inline double cosine_similarity(std::span<const double> a, std::span<const float> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    dot += a[j] * b[j];
    na += a[j] * a[j];
    nb += static_cast<double>(b[j]) * b[j];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline std::vector<double> prototype_similarities(std::span<const double> query, const Prototypes& p) {
  if (query.size() != p.dim) {
    throw DimensionError("simpleshot: query has d=" + std::to_string(query.size()) + ", prototypes have d=" +
                         std::to_string(p.dim));
  }
  std::vector<double> sims(p.num_classes);
  for (std::size_t s = 0; s < p.num_classes; ++s) sims[s] = cosine_similarity(query, p.row(s));
  return sims;
}

inline std::size_t simpleshot_predict(const data::EmbeddingBag& bag, const Prototypes& p) {
  const auto query = bgap(bag);
  return argmax(prototype_similarities(query, p));
}

}  // namespace milengine::agg
