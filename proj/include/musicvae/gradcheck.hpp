#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "musicvae/autodiff.hpp"
#include "musicvae/params.hpp"

namespace musicvae::nn {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  Eigen::Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_error < tolerance; }
};

/// Compares reverse-mode gradients against central differences.
///
/// `loss` builds a fresh graph and returns a 1x1 node. The relative error
/// of each entry is |a - n| / max(|a|, |n|, floor); the floor keeps
/// near-zero gradients from dominating on rounding noise alone.
/// If `stride` > 1 only every stride-th element of each tensor is probed.
template <typename T>
GradCheckReport grad_check(const std::function<Var(Graph<T>&)>& loss, ParamSet<T>& params,
                           double tolerance, double step = 1e-5, double floor = 1e-3,
                           Eigen::Index stride = 1) {
  auto evaluate = [&]() {
    Graph<T> g;
    const Var l = loss(g);
    return static_cast<double>(g.value(l)(0, 0));
  };

  params.zero_grad();
  {
    Graph<T> g;
    const Var l = loss(g);
    g.backward(l);
  }

  GradCheckReport report;
  report.tolerance = tolerance;
  for (auto& p : params) {
    GradCheckEntry e;
    e.name = p.name;
    const Matrix<T> analytic = p.grad;
    for (Eigen::Index k = 0; k < p.value.size(); k += std::max<Eigen::Index>(stride, 1)) {
      T& x = p.value.data()[k];
      const T saved = x;
      x = saved + static_cast<T>(step);
      const double up = evaluate();
      x = saved - static_cast<T>(step);
      const double down = evaluate();
      x = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = static_cast<double>(analytic.data()[k]);
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > e.max_rel_error || e.worst_index < 0) {
        e.max_rel_error = std::max(rel, e.max_rel_error);
        if (rel >= e.max_rel_error) {
          e.worst_index = k;
          e.analytic = a;
          e.numeric = numeric;
        }
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace musicvae::nn
