#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "milengine/errors.hpp"

namespace milengine::eval {

using Confusion = std::vector<std::vector<std::size_t>>;  // rows = truth, cols = prediction

struct MetricsReport {
  Confusion confusion;
  std::vector<double> per_class_recall;
  double balanced_accuracy = 0.0;
  std::vector<double> loss_curve;  // per-epoch mean training loss
};

inline void check_square(const Confusion& c) {
  if (c.empty()) throw DimensionError("confusion matrix is empty");
  for (const auto& row : c)
    if (row.size() != c.size()) throw DimensionError("confusion matrix is not square");
}

inline std::vector<double> per_class_recall(const Confusion& c) {
  check_square(c);
  std::vector<double> recall(c.size());
  for (std::size_t s = 0; s < c.size(); ++s) {
    std::size_t total = 0;
    for (auto v : c[s]) total += v;
    if (total == 0) throw ConfigError("class absent from test fold (class index " + std::to_string(s) + ")");
    recall[s] = static_cast<double>(c[s][s]) / static_cast<double>(total);
  }
  return recall;
}

// Mean of per-class recalls.
inline double balanced_accuracy(const Confusion& c) {
  const auto recall = per_class_recall(c);
  double sum = 0.0;
  for (double r : recall) sum += r;
  return sum / static_cast<double>(recall.size());
}

inline MetricsReport metrics_from_confusion(Confusion c, std::vector<double> loss_curve = {}) {
  MetricsReport r;
  r.per_class_recall = per_class_recall(c);
  r.balanced_accuracy = balanced_accuracy(c);
  r.confusion = std::move(c);
  r.loss_curve = std::move(loss_curve);
  return r;
}

}  // namespace milengine::eval
