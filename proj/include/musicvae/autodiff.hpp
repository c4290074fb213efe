#pragma once

// Tape-based reverse-mode differentiation over dense column-major matrices.
//
// Values are 2-D: rows are features, columns are batch entries (or
// batch x time when a sequence has been flattened). Every op records its
// parents and an adjoint closure; backward() replays the tape in reverse.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace musicvae::nn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A named trainable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  // Gradient accumulator; written by Graph::backward through const
  // references, so forward passes can take the model by const.
  mutable Matrix<T> grad;

  void zero_grad() const { grad.setZero(value.rows(), value.cols()); }
};

/// Handle to a node on a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T>
inline T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <typename T>
inline T softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <typename T>
class Graph {
 public:
  using Mat = Matrix<T>;
  using Adjoint = std::function<void(Graph&, int)>;

  /// With track_gradients = false, parameters enter as constants and no
  /// adjoints are recorded (inference).
  explicit Graph(bool track_gradients = true) : track_(track_gradients) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // ---- leaves ---------------------------------------------------------

  Var constant(Mat value) { return push(std::move(value), {}, nullptr, false); }

  /// Differentiable leaf that is not a Parameter (gradient readable via grad()).
  Var variable(Mat value) { return push(std::move(value), {}, nullptr, true); }

  /// Parameters are registered once per graph; repeated calls return the
  /// same node so that gradients from every use accumulate in one place.
  Var param(const Parameter<T>& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var{it->second};
    Node n;
    n.ref = &p.value;
    n.needs_grad = track_;
    n.param = track_ ? &p : nullptr;
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    param_ids_.emplace(&p, id);
    return Var{id};
  }

  /// Registers an op with a caller-supplied adjoint. The adjoint receives
  /// the graph and the node id; it reads grad(id) and calls accumulate()
  /// on parents.
  Var custom(Mat value, std::vector<int> parents, Adjoint adjoint) {
    return push(std::move(value), std::move(parents), std::move(adjoint), true);
  }

  const Mat& value(Var v) const { return node(v).get(); }
  const Mat& grad(Var v) const { return node(v).grad; }
  bool has_grad(Var v) const { return node(v).grad.size() > 0; }
  bool requires_grad(Var v) const { return node(v).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  void accumulate(int id, const Mat& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  template <typename Expr>
  void accumulate_expr(int id, const Expr& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Reverse sweep from a 1x1 loss node. Parameter gradients are added to
  /// Parameter::grad (which is resized and zeroed if empty).
  void backward(Var loss) {
    if (!track_) throw GraphError("backward: graph was built without gradient tracking");
    const Node& l = node(loss);
    if (l.get().rows() != 1 || l.get().cols() != 1)
      throw ShapeError("backward: loss must be 1x1");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[static_cast<std::size_t>(loss.id)].grad = Mat::Ones(1, 1);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.size() == 0 || !n.needs_grad) continue;
      for (int p : n.parents)
        if (p >= id) throw GraphError("backward: cycle through node " + std::to_string(id));
      if (n.adjoint) n.adjoint(*this, id);
      if (n.param != nullptr) {
        const Parameter<T>& p = *n.param;
        if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols())
          p.grad.setZero(p.value.rows(), p.value.cols());
        p.grad += n.grad;
      }
    }
  }

  // ---- linear algebra ---------------------------------------------------

  Var matmul(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (A.cols() != B.rows()) throw ShapeError(shape_msg("matmul", A, B));
    Mat out = A * B;
    return push(std::move(out), {a.id, b.id}, [a, b](Graph& g, int id) {
      const Mat& G = g.grad(Var{id});
      if (g.requires_grad(a)) g.accumulate_expr(a.id, G * g.value(b).transpose());
      if (g.requires_grad(b)) g.accumulate_expr(b.id, g.value(a).transpose() * G);
    });
  }

  /// y = W x + b, with b a column vector broadcast over columns of x.
  Var linear(Var w, Var x, Var b) {
    const Mat& W = value(w);
    const Mat& X = value(x);
    const Mat& B = value(b);
    if (W.cols() != X.rows() || B.rows() != W.rows() || B.cols() != 1)
      throw ShapeError(shape_msg("linear", W, X));
    Mat out = W * X;
    out.colwise() += B.col(0);
    return push(std::move(out), {w.id, x.id, b.id}, [w, x, b](Graph& g, int id) {
      const Mat& G = g.grad(Var{id});
      if (g.requires_grad(w)) g.accumulate_expr(w.id, G * g.value(x).transpose());
      if (g.requires_grad(x)) g.accumulate_expr(x.id, g.value(w).transpose() * G);
      if (g.requires_grad(b)) g.accumulate_expr(b.id, G.rowwise().sum());
    });
  }

  Var add(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (A.rows() != B.rows() || A.cols() != B.cols()) throw ShapeError(shape_msg("add", A, B));
    return push(A + B, {a.id, b.id}, [a, b](Graph& g, int id) {
      g.accumulate(a.id, g.grad(Var{id}));
      g.accumulate(b.id, g.grad(Var{id}));
    });
  }

  Var sub(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (A.rows() != B.rows() || A.cols() != B.cols()) throw ShapeError(shape_msg("sub", A, B));
    return push(A - B, {a.id, b.id}, [a, b](Graph& g, int id) {
      g.accumulate(a.id, g.grad(Var{id}));
      g.accumulate_expr(b.id, -g.grad(Var{id}));
    });
  }

  /// x + b with b a column vector broadcast across columns.
  Var add_bias(Var x, Var b) {
    const Mat& X = value(x);
    const Mat& B = value(b);
    if (B.rows() != X.rows() || B.cols() != 1) throw ShapeError(shape_msg("add_bias", X, B));
    Mat out = X;
    out.colwise() += B.col(0);
    return push(std::move(out), {x.id, b.id}, [x, b](Graph& g, int id) {
      g.accumulate(x.id, g.grad(Var{id}));
      if (g.requires_grad(b)) g.accumulate_expr(b.id, g.grad(Var{id}).rowwise().sum());
    });
  }

  /// Elementwise product.
  Var mul(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (A.rows() != B.rows() || A.cols() != B.cols()) throw ShapeError(shape_msg("mul", A, B));
    return push(A.cwiseProduct(B), {a.id, b.id}, [a, b](Graph& g, int id) {
      const Mat& G = g.grad(Var{id});
      if (g.requires_grad(a)) g.accumulate_expr(a.id, G.cwiseProduct(g.value(b)));
      if (g.requires_grad(b)) g.accumulate_expr(b.id, G.cwiseProduct(g.value(a)));
    });
  }

  Var scale(Var x, T s) {
    return push(value(x) * s, {x.id}, [x, s](Graph& g, int id) {
      g.accumulate_expr(x.id, g.grad(Var{id}) * s);
    });
  }

  Var square(Var x) {
    return push(value(x).array().square().matrix(), {x.id}, [x](Graph& g, int id) {
      g.accumulate_expr(x.id, (T(2) * g.value(x).array() * g.grad(Var{id}).array()).matrix());
    });
  }

  // ---- nonlinearities ---------------------------------------------------

  Var tanh(Var x) {
    Mat out = value(x).array().tanh().matrix();
    return push(std::move(out), {x.id}, [x](Graph& g, int id) {
      const Mat& y = g.value(Var{id});
      g.accumulate_expr(x.id,
                        (g.grad(Var{id}).array() * (T(1) - y.array().square())).matrix());
    });
  }

  Var sigmoid(Var x) {
    Mat out = value(x).unaryExpr([](T v) { return nn::sigmoid(v); });
    return push(std::move(out), {x.id}, [x](Graph& g, int id) {
      const Mat& y = g.value(Var{id});
      g.accumulate_expr(x.id,
                        (g.grad(Var{id}).array() * y.array() * (T(1) - y.array())).matrix());
    });
  }

  /// log(exp(x) + 1), overflow-safe. Derivative is sigmoid(x).
  Var softplus(Var x) {
    Mat out = value(x).unaryExpr([](T v) { return nn::softplus(v); });
    return push(std::move(out), {x.id}, [x](Graph& g, int id) {
      const Mat s = g.value(x).unaryExpr([](T v) { return nn::sigmoid(v); });
      g.accumulate_expr(x.id, g.grad(Var{id}).cwiseProduct(s));
    });
  }

  /// max(x - threshold, 0) elementwise.
  Var hinge(Var x, T threshold) {
    Mat out = (value(x).array() - threshold).max(T(0)).matrix();
    return push(std::move(out), {x.id}, [x, threshold](Graph& g, int id) {
      const Mat mask = (g.value(x).array() > threshold).template cast<T>().matrix();
      g.accumulate_expr(x.id, g.grad(Var{id}).cwiseProduct(mask));
    });
  }

  // ---- reductions -------------------------------------------------------

  Var sum(Var x) {
    Mat out(1, 1);
    out(0, 0) = value(x).sum();
    return push(std::move(out), {x.id}, [x](Graph& g, int id) {
      const Mat& X = g.value(x);
      g.accumulate_expr(x.id, Mat::Constant(X.rows(), X.cols(), g.grad(Var{id})(0, 0)));
    });
  }

  Var mean(Var x) {
    const auto n = static_cast<T>(value(x).size());
    return scale(sum(x), T(1) / n);
  }

  // ---- structure ----------------------------------------------------------

  Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const Eigen::Index cols = value(parts[0]).cols();
    Eigen::Index rows = 0;
    for (Var p : parts) {
      if (value(p).cols() != cols) throw ShapeError("concat_rows: column mismatch");
      rows += value(p).rows();
    }
    Mat out(rows, cols);
    std::vector<int> ids;
    Eigen::Index r = 0;
    for (Var p : parts) {
      out.middleRows(r, value(p).rows()) = value(p);
      r += value(p).rows();
      ids.push_back(p.id);
    }
    std::vector<Var> saved(parts.begin(), parts.end());
    return push(std::move(out), std::move(ids), [saved](Graph& g, int id) {
      const Mat& G = g.grad(Var{id});
      Eigen::Index r0 = 0;
      for (Var p : saved) {
        const Eigen::Index n = g.value(p).rows();
        if (g.requires_grad(p)) g.accumulate_expr(p.id, G.middleRows(r0, n));
        r0 += n;
      }
    });
  }
  Var concat_rows(std::initializer_list<Var> parts) {
    return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
  }

  Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const Eigen::Index rows = value(parts[0]).rows();
    Eigen::Index cols = 0;
    for (Var p : parts) {
      if (value(p).rows() != rows) throw ShapeError("concat_cols: row mismatch");
      cols += value(p).cols();
    }
    Mat out(rows, cols);
    std::vector<int> ids;
    Eigen::Index c = 0;
    for (Var p : parts) {
      out.middleCols(c, value(p).cols()) = value(p);
      c += value(p).cols();
      ids.push_back(p.id);
    }
    std::vector<Var> saved(parts.begin(), parts.end());
    return push(std::move(out), std::move(ids), [saved](Graph& g, int id) {
      const Mat& G = g.grad(Var{id});
      Eigen::Index c0 = 0;
      for (Var p : saved) {
        const Eigen::Index n = g.value(p).cols();
        if (g.requires_grad(p)) g.accumulate_expr(p.id, G.middleCols(c0, n));
        c0 += n;
      }
    });
  }

  Var slice_rows(Var x, Eigen::Index start, Eigen::Index count) {
    const Mat& X = value(x);
    if (start < 0 || count < 0 || start + count > X.rows()) throw ShapeError("slice_rows: out of range");
    return push(X.middleRows(start, count), {x.id}, [x, start, count](Graph& g, int id) {
      Node& n = g.nodes_[static_cast<std::size_t>(x.id)];
      if (!n.needs_grad) return;
      if (n.grad.size() == 0) n.grad.setZero(n.get().rows(), n.get().cols());
      n.grad.middleRows(start, count) += g.grad(Var{id});
    });
  }

  Var slice_cols(Var x, Eigen::Index start, Eigen::Index count) {
    const Mat& X = value(x);
    if (start < 0 || count < 0 || start + count > X.cols()) throw ShapeError("slice_cols: out of range");
    return push(X.middleCols(start, count), {x.id}, [x, start, count](Graph& g, int id) {
      Node& n = g.nodes_[static_cast<std::size_t>(x.id)];
      if (!n.needs_grad) return;
      if (n.grad.size() == 0) n.grad.setZero(n.get().rows(), n.get().cols());
      n.grad.middleCols(start, count) += g.grad(Var{id});
    });
  }

  /// Column lookup: out.col(j) = table.col(index[j]); a negative index
  /// yields a zero column (used for the reserved start input).
  Var gather_cols(Var table, std::span<const int> index) {
    const Mat& W = value(table);
    Mat out = Mat::Zero(W.rows(), static_cast<Eigen::Index>(index.size()));
    for (std::size_t j = 0; j < index.size(); ++j) {
      const int k = index[j];
      if (k >= W.cols()) throw ShapeError("gather_cols: index " + std::to_string(k) + " out of range");
      if (k >= 0) out.col(static_cast<Eigen::Index>(j)) = W.col(k);
    }
    std::vector<int> idx(index.begin(), index.end());
    return push(std::move(out), {table.id}, [table, idx = std::move(idx)](Graph& g, int id) {
      Node& n = g.nodes_[static_cast<std::size_t>(table.id)];
      if (!n.needs_grad) return;
      if (n.grad.size() == 0) n.grad.setZero(n.get().rows(), n.get().cols());
      const Mat& G = g.grad(Var{id});
      for (std::size_t j = 0; j < idx.size(); ++j)
        if (idx[j] >= 0) n.grad.col(idx[j]) += G.col(static_cast<Eigen::Index>(j));
    });
  }

  // ---- LSTM kernels -------------------------------------------------------

  /// Gate pre-activations: sum(terms) + Wh h. Each term is 4H x B (input
  /// projections with bias already folded in).
  Var lstm_preact(std::span<const Var> terms, Var wh, Var h) {
    const Mat& Wh = value(wh);
    const Mat& Hm = value(h);
    if (Wh.cols() != Hm.rows()) throw ShapeError(shape_msg("lstm_preact", Wh, Hm));
    Mat out = Wh * Hm;
    std::vector<int> ids{wh.id, h.id};
    for (Var t : terms) {
      if (value(t).rows() != out.rows() || value(t).cols() != out.cols())
        throw ShapeError(shape_msg("lstm_preact term", value(t), out));
      out += value(t);
      ids.push_back(t.id);
    }
    std::vector<Var> saved(terms.begin(), terms.end());
    return push(std::move(out), std::move(ids), [wh, h, saved](Graph& g, int id) {
      const Mat& G = g.grad(Var{id});
      if (g.requires_grad(wh)) g.accumulate_expr(wh.id, G * g.value(h).transpose());
      if (g.requires_grad(h)) g.accumulate_expr(h.id, g.value(wh).transpose() * G);
      for (Var t : saved) g.accumulate(t.id, G);
    });
  }
  Var lstm_preact(std::initializer_list<Var> terms, Var wh, Var h) {
    return lstm_preact(std::span<const Var>(terms.begin(), terms.size()), wh, h);
  }

  /// Standard LSTM update from gate pre-activations laid out as
  /// [input; forget; cell; output]. Returns (h', c').
  std::pair<Var, Var> lstm_cell(Var preact, Var c) {
    const Mat& P = value(preact);
    const Mat& C = value(c);
    const Eigen::Index H = C.rows();
    if (P.rows() != 4 * H || P.cols() != C.cols()) throw ShapeError(shape_msg("lstm_cell", P, C));
    auto sig = [](T v) { return nn::sigmoid(v); };
    const Mat i = P.middleRows(0, H).unaryExpr(sig);
    const Mat f = P.middleRows(H, H).unaryExpr(sig);
    const Mat gg = P.middleRows(2 * H, H).array().tanh().matrix();
    const Mat o = P.middleRows(3 * H, H).unaryExpr(sig);
    Mat c_next = f.cwiseProduct(C) + i.cwiseProduct(gg);
    Mat tc = c_next.array().tanh().matrix();
    Mat h_next = o.cwiseProduct(tc);

    Var c_var = push(std::move(c_next), {preact.id, c.id}, [preact, c, i, f, gg](Graph& g, int id) {
      const Mat& G = g.grad(Var{id});
      const Eigen::Index H = G.rows();
      if (g.requires_grad(c)) g.accumulate_expr(c.id, G.cwiseProduct(f));
      Node& pn = g.nodes_[static_cast<std::size_t>(preact.id)];
      if (!pn.needs_grad) return;
      if (pn.grad.size() == 0) pn.grad.setZero(4 * H, G.cols());
      pn.grad.middleRows(0, H).array() += G.array() * gg.array() * i.array() * (T(1) - i.array());
      pn.grad.middleRows(H, H).array() +=
          G.array() * g.value(c).array() * f.array() * (T(1) - f.array());
      pn.grad.middleRows(2 * H, H).array() += G.array() * i.array() * (T(1) - gg.array().square());
    });
    Var h_var = push(std::move(h_next), {preact.id, c_var.id}, [preact, c_var, o, tc](Graph& g, int id) {
      const Mat& G = g.grad(Var{id});
      const Eigen::Index H = G.rows();
      g.accumulate_expr(c_var.id, (G.array() * o.array() * (T(1) - tc.array().square())).matrix());
      Node& pn = g.nodes_[static_cast<std::size_t>(preact.id)];
      if (!pn.needs_grad) return;
      if (pn.grad.size() == 0) pn.grad.setZero(4 * H, G.cols());
      pn.grad.middleRows(3 * H, H).array() += G.array() * tc.array() * o.array() * (T(1) - o.array());
    });
    return {h_var, c_var};
  }

  // ---- losses -------------------------------------------------------------

  /// Per-column cross-entropy of softmax(logits) against integer targets.
  /// Output is 1 x cols; a negative target masks that column (loss 0).
  Var softmax_cross_entropy(Var logits, std::span<const int> targets) {
    const Mat& L = value(logits);
    if (L.rows() < 2) throw ShapeError("softmax_cross_entropy: vocabulary must have at least 2 entries");
    if (static_cast<Eigen::Index>(targets.size()) != L.cols())
      throw ShapeError("softmax_cross_entropy: target count != columns");
    Mat probs(L.rows(), L.cols());
    Mat out(1, L.cols());
    for (Eigen::Index j = 0; j < L.cols(); ++j) {
      const int t = targets[static_cast<std::size_t>(j)];
      if (t >= L.rows()) throw std::out_of_range("softmax_cross_entropy: target " + std::to_string(t) + " out of range");
      const T m = L.col(j).maxCoeff();
      probs.col(j) = (L.col(j).array() - m).exp().matrix();
      const T z = probs.col(j).sum();
      probs.col(j) /= z;
      out(0, j) = t < 0 ? T(0) : -(L(t, j) - m - std::log(z));
    }
    std::vector<int> tg(targets.begin(), targets.end());
    return push(std::move(out), {logits.id}, [logits, probs = std::move(probs), tg = std::move(tg)](Graph& g, int id) {
      const Mat& G = g.grad(Var{id});
      Mat d = probs;
      for (Eigen::Index j = 0; j < d.cols(); ++j) {
        const int t = tg[static_cast<std::size_t>(j)];
        if (t < 0) {
          d.col(j).setZero();
          continue;
        }
        d(t, j) -= T(1);
        d.col(j) *= G(0, j);
      }
      g.accumulate(logits.id, d);
    });
  }

  /// KL(N(mu, diag(sigma^2)) || N(0, I)) per column: 1 x cols.
  Var kl_standard_normal(Var mu, Var sigma) {
    const Mat& M = value(mu);
    const Mat& S = value(sigma);
    if (M.rows() != S.rows() || M.cols() != S.cols()) throw ShapeError(shape_msg("kl", M, S));
    Mat out = (T(0.5) * (M.array().square() + S.array().square() - T(1) - T(2) * S.array().log()))
                  .colwise()
                  .sum()
                  .matrix();
    return push(std::move(out), {mu.id, sigma.id}, [mu, sigma](Graph& g, int id) {
      const Mat& G = g.grad(Var{id});
      const Mat& M = g.value(mu);
      const Mat& S = g.value(sigma);
      if (g.requires_grad(mu)) g.accumulate_expr(mu.id, (M.array().rowwise() * G.row(0).array()).matrix());
      if (g.requires_grad(sigma))
        g.accumulate_expr(sigma.id,
                          ((S.array() - S.array().inverse()).rowwise() * G.row(0).array()).matrix());
    });
  }

 private:
  struct Node {
    Mat value;
    const Mat* ref = nullptr;
    Mat grad;
    bool needs_grad = false;
    std::vector<int> parents;
    Adjoint adjoint;
    const Parameter<T>* param = nullptr;

    const Mat& get() const { return ref != nullptr ? *ref : value; }
  };

  const Node& node(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw GraphError("invalid variable handle");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  Var push(Mat value, std::vector<int> parents, Adjoint adjoint) {
    return push(std::move(value), std::move(parents), std::move(adjoint), false);
  }
  Var push(Mat value, std::vector<int> parents, Adjoint adjoint, bool leaf_grad) {
    Node n;
    n.value = std::move(value);
    const int id = static_cast<int>(nodes_.size());
    bool needs = parents.empty() ? leaf_grad : false;
    for (int p : parents) {
      if (p < 0 || p >= id) throw GraphError("parent must precede child on the tape");
      needs = needs || nodes_[static_cast<std::size_t>(p)].needs_grad;
    }
    n.needs_grad = needs;
    n.parents = std::move(parents);
    if (needs) n.adjoint = std::move(adjoint);
    nodes_.push_back(std::move(n));
    return Var{id};
  }

  static std::string shape_msg(const char* op, const Mat& a, const Mat& b) {
    return std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
           std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
           std::to_string(b.cols()) + ")";
  }

  bool track_ = true;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, int> param_ids_;
};

}  // namespace musicvae::nn
