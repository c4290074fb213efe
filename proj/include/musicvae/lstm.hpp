#pragma once

#include <string>
#include <utility>

#include "musicvae/autodiff.hpp"
#include "musicvae/params.hpp"

namespace musicvae::nn {

/// Parameter names for one LSTM layer. Gate rows are ordered
/// [input; forget; cell; output]; shapes are 4H x D, 4H x H and 4H x 1.
struct LstmWeights {
  std::string wx;
  std::string wh;
  std::string b;
  Eigen::Index input_size = 0;
  Eigen::Index hidden_size = 0;
};

/// Registers an LSTM layer. `input_fan_in` overrides the fan-in used for
/// Wx initialization (one-hot inputs select a single column per stream).
/// An input_size of 0 creates a layer driven by state alone (no Wx).
template <typename T>
LstmWeights add_lstm(ParamSet<T>& params, const std::string& prefix, Eigen::Index input_size,
                     Eigen::Index hidden_size, Rng& rng, double input_fan_in = 0.0) {
  LstmWeights w{prefix + ".Wx", prefix + ".Wh", prefix + ".b", input_size, hidden_size};
  if (input_size > 0)
    params.add_uniform(w.wx, 4 * hidden_size, input_size,
                       input_fan_in > 0.0 ? input_fan_in : static_cast<double>(input_size), rng);
  params.add_uniform(w.wh, 4 * hidden_size, hidden_size, static_cast<double>(hidden_size), rng);
  Matrix<T> bias = Matrix<T>::Zero(4 * hidden_size, 1);
  bias.middleRows(hidden_size, hidden_size).setConstant(T(1));  // forget gate
  params.add(w.b, std::move(bias));
  return w;
}

/// One LSTM step: (h', c') from input x, previous (h, c).
template <typename T>
std::pair<Var, Var> lstm_cell(Graph<T>& g, const ParamSet<T>& params, const LstmWeights& w, Var x, Var h,
                              Var c) {
  const Var wh = g.param(params[w.wh]);
  const Var b = g.param(params[w.b]);
  Var pre;
  if (w.input_size > 0) {
    const Var in = g.linear(g.param(params[w.wx]), x, b);
    pre = g.lstm_preact({in}, wh, h);
  } else {
    const auto cols = g.value(h).cols();
    const Var bias = g.add_bias(g.constant(Matrix<T>::Zero(4 * w.hidden_size, cols)), b);
    pre = g.lstm_preact({bias}, wh, h);
  }
  return g.lstm_cell(pre, c);
}

}  // namespace musicvae::nn
