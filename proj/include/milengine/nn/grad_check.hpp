#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "milengine/nn/tape.hpp"
#include "milengine/random.hpp"

namespace milengine::nn {

struct GradCheckOptions {
  double h = 1e-3;
  // Tensors larger than this are checked on a seeded coordinate sample.
  std::size_t max_coords_per_tensor = 64;
  std::uint64_t seed = 0;
  // Denominator floor, so tensors whose true gradient is ~0 are compared on an
  // absolute rather than a relative scale. Central differences of a loss of
  // order 1 carry roundoff near 1e-12, so a floor much below 1e-6 would turn
  // that noise into relative errors around 1e-4.
  double denom_floor = 1e-6;
};

struct GradCheckResult {
  // Largest per-tensor error ||analytic - numeric|| / max(||analytic||, ||numeric||)
  // over the checked coordinates of each tensor.
  double max_rel_error = 0.0;
  std::string worst;  // tensor with the largest error
  // Largest single-coordinate |analytic - numeric| / max(|analytic|, |numeric|).
  // Diagnostic only: near-zero coordinates make it dominated by the O(h^2)
  // truncation of the central difference.
  double max_coord_rel_error = 0.0;
  std::string worst_coord;  // "<param>[index]"
  std::size_t checked = 0;
  // Coordinates whose perturbation crossed a clamp boundary; the function is
  // not differentiable there and the coordinate is left out of the maximum.
  std::size_t non_differentiable = 0;
};

// Compares the tape's analytic gradients against central differences
//   (f(theta + h) - f(theta - h)) / (2h)
// coordinate by coordinate. `build_loss` must record a fresh forward pass on the
// tape it is given and return the scalar loss.
template <class BuildLoss>
GradCheckResult grad_check(BuildLoss&& build_loss, std::span<ParamTensor<double>* const> params,
                           const GradCheckOptions& opt = {}) {
  for (auto* p : params) p->zero_grad();
  std::vector<std::int8_t> base_kinks;
  {
    Tape<double> tape;
    Var loss = build_loss(tape);
    tape.backward(loss);
    base_kinks = tape.kink_signature();
  }

  auto evaluate = [&](std::vector<std::int8_t>& kinks) {
    Tape<double> tape;
    Var loss = build_loss(tape);
    kinks = tape.kink_signature();
    return tape.scalar(loss);
  };

  GradCheckResult result;
  Rng rng(opt.seed);
  std::vector<std::int8_t> kinks_plus, kinks_minus;
  for (auto* p : params) {
    const std::size_t size = p->size();
    std::vector<std::size_t> coords(size);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (size > opt.max_coords_per_tensor) {
      rng.shuffle(std::span<std::size_t>(coords));
      coords.resize(opt.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    double diff_sq = 0.0, analytic_sq = 0.0, numeric_sq = 0.0;
    for (std::size_t idx : coords) {
      double& theta = p->value.data()[idx];
      const double saved = theta;
      theta = saved + opt.h;
      const double f_plus = evaluate(kinks_plus);
      theta = saved - opt.h;
      const double f_minus = evaluate(kinks_minus);
      theta = saved;
      if (kinks_plus != base_kinks || kinks_minus != base_kinks) {
        ++result.non_differentiable;
        continue;
      }
      const double numeric = (f_plus - f_minus) / (2.0 * opt.h);
      const double analytic = p->grad.data()[idx];
      diff_sq += (analytic - numeric) * (analytic - numeric);
      analytic_sq += analytic * analytic;
      numeric_sq += numeric * numeric;
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.denom_floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++result.checked;
      if (rel > result.max_coord_rel_error) {
        result.max_coord_rel_error = rel;
        result.worst_coord = p->name + "[" + std::to_string(idx) + "]";
      }
    }
    const double denom = std::max({std::sqrt(analytic_sq), std::sqrt(numeric_sq), opt.denom_floor});
    const double rel = std::sqrt(diff_sq) / denom;
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst = p->name;
    }
  }
  return result;
}

}  // namespace milengine::nn
