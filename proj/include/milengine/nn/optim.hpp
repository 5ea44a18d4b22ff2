#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "milengine/errors.hpp"
#include "milengine/nn/tape.hpp"

namespace milengine::nn {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled-weight-decay Adam:
//   theta <- theta - lr * ( mhat / (sqrt(vhat) + eps) + weight_decay * theta )
// with bias-corrected moments mhat = m / (1 - beta1^t), vhat = v / (1 - beta2^t).
template <class T>
class AdamW {
 public:
  AdamW(std::vector<ParamTensor<T>*> params, AdamWConfig config = {})
      : params_(std::move(params)), config_(config) {
    for (auto* p : params_) {
      m_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(config_.beta1);
    const T b2 = static_cast<T>(config_.beta2);
    const T step_size = static_cast<T>(lr / c1);
    const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
    const T eps = static_cast<T>(config_.eps);
    const T decay = static_cast<T>(lr * config_.weight_decay);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto theta = params_[k]->value.array();
      const auto g = params_[k]->grad.array();
      auto m = m_[k].array();
      auto v = v_[k].array();
      m = b1 * m + (T(1) - b1) * g;
      v = b2 * v + (T(1) - b2) * g.square();
      // lr * mhat / (sqrt(vhat) + eps) with mhat = m / c1, sqrt(vhat) = sqrt(v) / sqrt(c2)
      theta -= step_size * m / (v.sqrt() * inv_sqrt_c2 + eps) + decay * theta;
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  std::uint64_t steps() const { return t_; }
  const AdamWConfig& config() const { return config_; }
  const Matrix<T>& first_moment(std::size_t k) const { return m_[k]; }
  const Matrix<T>& second_moment(std::size_t k) const { return v_[k]; }

 private:
  std::vector<ParamTensor<T>*> params_;
  AdamWConfig config_;
  std::vector<Matrix<T>> m_;
  std::vector<Matrix<T>> v_;
  std::uint64_t t_ = 0;
};

// lr(t) = peak * 0.5 * (1 + cos(pi * t / T)), no warmup; t beyond T clamps to T.
inline double cosine_lr(std::uint64_t step, double peak_lr, std::uint64_t total_steps) {
  if (!(peak_lr > 0.0)) throw ConfigError("cosine_lr: peak_lr must be positive");
  if (total_steps < 1) throw ConfigError("cosine_lr: total_steps must be >= 1");
  const double t = static_cast<double>(std::min(step, total_steps));
  return peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t / static_cast<double>(total_steps)));
}

}  // namespace milengine::nn
