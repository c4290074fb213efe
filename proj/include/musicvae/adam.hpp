#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "musicvae/params.hpp"

namespace musicvae::nn {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First and second moment estimates, aligned with a ParamSet's order.
template <typename T>
struct AdamState {
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;
  std::int64_t step = 0;

  static AdamState zeros_like(const ParamSet<T>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
      s.v.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
    }
    return s;
  }
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One bias-corrected Adam update using each parameter's accumulated grad.
/// Throws before touching any parameter if a gradient is non-finite.
template <typename T>
void adam_step(ParamSet<T>& params, AdamState<T>& state, double lr, const AdamConfig& cfg = {}) {
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match parameters");
  for (const auto& p : params)
    if (p.grad.size() != 0 && !p.grad.allFinite())
      throw NonFiniteError("adam_step: non-finite gradient for " + p.name);

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, t));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, t));
  const T rate = static_cast<T>(lr);
  const T eps = static_cast<T>(cfg.epsilon);

  std::size_t i = 0;
  for (auto& p : params) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    ++i;
    if (p.grad.size() == 0) continue;
    m = b1 * m + (T(1) - b1) * p.grad;
    v = b2 * v + (T(1) - b2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= rate * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_global_norm(ParamSet<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.grad.size() != 0) sq += static_cast<double>(p.grad.squaredNorm());
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& p : params)
      if (p.grad.size() != 0) p.grad *= s;
  }
  return norm;
}

}  // namespace musicvae::nn
