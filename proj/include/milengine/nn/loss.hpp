#pragma once

// Categorical cross-entropy with the 1/S normalization kept as written:
//   L = -(1/S) * sum_s Y_s * log(Yhat_s),  Y one-hot
// which reduces to -(1/S) * log(clamp(Yhat_label, 1e-12, 1)).

#include <cmath>
#include <span>
#include <string>

#include "milengine/errors.hpp"
#include "milengine/nn/tape.hpp"

namespace milengine::nn {

inline constexpr double kLogClamp = 1e-12;

inline double cross_entropy(std::span<const double> scores, std::size_t label) {
  const std::size_t s = scores.size();
  if (label >= s) {
    throw DimensionError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                         std::to_string(s) + " classes");
  }
  double total = 0.0;
  for (double v : scores) {
    if (!(v >= 0.0)) throw NumericError("cross_entropy: negative or NaN score");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-5) throw NumericError("cross_entropy: scores do not sum to 1");
  const double p = std::min(std::max(scores[label], kLogClamp), 1.0);
  return -std::log(p) / static_cast<double>(s);
}

// Graph form over a 1 x S probability row.
template <class T>
Var cross_entropy(Tape<T>& t, Var probs, std::size_t label) {
  const auto& P = t.value(probs);
  if (P.rows() != 1) throw DimensionError("cross_entropy: expected a 1xS score row");
  const auto s = static_cast<std::size_t>(P.cols());
  if (label >= s) {
    throw DimensionError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                         std::to_string(s) + " classes");
  }
  Var picked = slice_cols(t, probs, static_cast<Eigen::Index>(label), 1, "ce.pick");
  Var clamped = clamp(t, picked, kLogClamp, 1.0, "ce.clamp");
  return scale(t, log(t, clamped, "ce.log"), -1.0 / static_cast<double>(s), "ce.loss");
}

}  // namespace milengine::nn
