#ifndef STYLEEQ_AUTODIFF_HPP
#define STYLEEQ_AUTODIFF_HPP

// Reverse-mode differentiation over dense Eigen matrices.
//
// A Graph records every operation applied to its variables together with a
// closure that propagates the output gradient to the operands. Operations are
// coarse (a matmul, an LSTM cell, a whole attention read) so the tape stays
// short enough to rebuild for every training step. Columns of a value are
// independent batch elements unless an op states otherwise.

#include "styleeq/core.hpp"

#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace styleeq::ad {

/// A named trainable tensor with its accumulated gradient.
template <typename Scalar>
struct Parameter {
  std::string name;
  MatrixX<Scalar> value;
  MatrixX<Scalar> grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename Scalar>
class Graph {
 public:
  using Matrix = MatrixX<Scalar>;
  using BackwardFn = std::function<void(Graph&, int)>;

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }

  /// A differentiable input whose gradient is read back with grad().
  Var leaf(Matrix value) { return push(std::move(value), record_, nullptr); }

  /// Binds a parameter without copying it. Gradients reach p.grad after
  /// backward() via flush_parameter_grads().
  Var param(Parameter<Scalar>& p) {
    Node n;
    n.external = &p.value;
    n.requires_grad = record_;
    nodes_.push_back(std::move(n));
    Var v{static_cast<int>(nodes_.size()) - 1};
    if (record_) bound_.emplace_back(v.id, &p);
    return v;
  }

  /// Binds a parameter read-only; it never receives gradients.
  Var param(const Parameter<Scalar>& p) {
    Node n;
    n.external = &p.value;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  /// Appends the result of an operation. The closure runs only if some
  /// parent needs a gradient.
  Var emplace(Matrix value, std::initializer_list<Var> parents, BackwardFn fn) {
    bool rg = false;
    if (record_)
      for (Var p : parents) rg = rg || nodes_[p.id].requires_grad;
    return push(std::move(value), rg, rg ? std::move(fn) : nullptr);
  }
  Var emplace(Matrix value, const std::vector<Var>& parents, BackwardFn fn) {
    bool rg = false;
    if (record_)
      for (Var p : parents) rg = rg || nodes_[p.id].requires_grad;
    return push(std::move(value), rg, rg ? std::move(fn) : nullptr);
  }

  const Matrix& value(Var v) const { return value(v.id); }
  const Matrix& value(int id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient accumulator of a node, zero-initialized on first touch.
  Matrix& grad(Var v) { return grad(v.id); }
  Matrix& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) {
      const Matrix& val = value(id);
      n.grad.setZero(val.rows(), val.cols());
    }
    return n.grad;
  }
  bool has_grad(int id) const { return nodes_[id].grad.size() != 0; }

  /// Seeds d(loss)/d(loss) = 1 for a 1x1 node and runs the tape backwards.
  void backward(Var loss) {
    if (value(loss).size() != 1) throw InvalidInput("backward() needs a scalar node");
    if (!nodes_[loss.id].requires_grad) return;
    grad(loss).setOnes();
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.backward && n.grad.size() != 0) n.backward(*this, id);
    }
  }

  void flush_parameter_grads() {
    for (auto& [id, p] : bound_) {
      if (!has_grad(id)) continue;
      if (p->grad.size() == 0) p->zero_grad();
      p->grad += nodes_[id].grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    const Matrix* external = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Matrix value, bool rg, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = rg;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  bool record_;
  std::deque<Node> nodes_;
  std::vector<std::pair<int, Parameter<Scalar>*>> bound_;
};

// ---------------------------------------------------------------------------
// Elementwise and structural ops.

template <typename S>
Var add(Graph<S>& g, Var a, Var b) {
  return g.emplace(g.value(a) + g.value(b), {a, b}, [a, b](Graph<S>& g, int self) {
    if (g.requires_grad(a)) g.grad(a) += g.grad(self);
    if (g.requires_grad(b)) g.grad(b) += g.grad(self);
  });
}

/// Sum of equally shaped nodes.
template <typename S>
Var add_n(Graph<S>& g, const std::vector<Var>& parts) {
  MatrixX<S> out = g.value(parts.front());
  for (std::size_t i = 1; i < parts.size(); ++i) out += g.value(parts[i]);
  return g.emplace(std::move(out), parts, [parts](Graph<S>& g, int self) {
    for (Var p : parts)
      if (g.requires_grad(p)) g.grad(p) += g.grad(self);
  });
}

template <typename S>
Var sub(Graph<S>& g, Var a, Var b) {
  return g.emplace(g.value(a) - g.value(b), {a, b}, [a, b](Graph<S>& g, int self) {
    if (g.requires_grad(a)) g.grad(a) += g.grad(self);
    if (g.requires_grad(b)) g.grad(b) -= g.grad(self);
  });
}

template <typename S>
Var scale(Graph<S>& g, Var a, S factor) {
  return g.emplace(g.value(a) * factor, {a}, [a, factor](Graph<S>& g, int self) {
    g.grad(a) += g.grad(self) * factor;
  });
}

template <typename S>
Var cwise_mul(Graph<S>& g, Var a, Var b) {
  return g.emplace(g.value(a).cwiseProduct(g.value(b)), {a, b}, [a, b](Graph<S>& g, int self) {
    if (g.requires_grad(a)) g.grad(a) += g.grad(self).cwiseProduct(g.value(b));
    if (g.requires_grad(b)) g.grad(b) += g.grad(self).cwiseProduct(g.value(a));
  });
}

/// a + column-vector broadcast over columns.
template <typename S>
Var add_colwise(Graph<S>& g, Var a, Var col) {
  MatrixX<S> out = g.value(a).colwise() + g.value(col).col(0);
  return g.emplace(std::move(out), {a, col}, [a, col](Graph<S>& g, int self) {
    if (g.requires_grad(a)) g.grad(a) += g.grad(self);
    if (g.requires_grad(col)) g.grad(col) += g.grad(self).rowwise().sum();
  });
}

template <typename S>
Var matmul(Graph<S>& g, Var a, Var b) {
  MatrixX<S> out = g.value(a) * g.value(b);
  return g.emplace(std::move(out), {a, b}, [a, b](Graph<S>& g, int self) {
    const MatrixX<S>& go = g.grad(self);
    if (g.requires_grad(a)) g.grad(a).noalias() += go * g.value(b).transpose();
    if (g.requires_grad(b)) g.grad(b).noalias() += g.value(a).transpose() * go;
  });
}

/// aᵀ b.
template <typename S>
Var matmul_tn(Graph<S>& g, Var a, Var b) {
  MatrixX<S> out = g.value(a).transpose() * g.value(b);
  return g.emplace(std::move(out), {a, b}, [a, b](Graph<S>& g, int self) {
    const MatrixX<S>& go = g.grad(self);
    if (g.requires_grad(a)) g.grad(a).noalias() += g.value(b) * go.transpose();
    if (g.requires_grad(b)) g.grad(b).noalias() += g.value(a) * go;
  });
}

/// W x + b, with b broadcast over the columns of x.
template <typename S>
Var linear(Graph<S>& g, Var w, Var b, Var x) {
  MatrixX<S> out = g.value(w) * g.value(x);
  out.colwise() += g.value(b).col(0);
  return g.emplace(std::move(out), {w, b, x}, [w, b, x](Graph<S>& g, int self) {
    const MatrixX<S>& go = g.grad(self);
    if (g.requires_grad(w)) g.grad(w).noalias() += go * g.value(x).transpose();
    if (g.requires_grad(b)) g.grad(b) += go.rowwise().sum();
    if (g.requires_grad(x)) g.grad(x).noalias() += g.value(w).transpose() * go;
  });
}

template <typename S>
Var exp(Graph<S>& g, Var a) {
  MatrixX<S> out = g.value(a).array().exp().matrix();
  return g.emplace(std::move(out), {a}, [a](Graph<S>& g, int self) {
    g.grad(a) += g.grad(self).cwiseProduct(g.value(self));
  });
}

template <typename S>
Var sigmoid(Graph<S>& g, Var a) {
  MatrixX<S> out = (S(1) / (S(1) + (-g.value(a).array()).exp())).matrix();
  return g.emplace(std::move(out), {a}, [a](Graph<S>& g, int self) {
    const auto y = g.value(self).array();
    g.grad(a).array() += g.grad(self).array() * y * (S(1) - y);
  });
}

template <typename S>
Var tanh(Graph<S>& g, Var a) {
  MatrixX<S> out = g.value(a).array().tanh().matrix();
  return g.emplace(std::move(out), {a}, [a](Graph<S>& g, int self) {
    const auto y = g.value(self).array();
    g.grad(a).array() += g.grad(self).array() * (S(1) - y * y);
  });
}

/// Swish / SiLU: x·sigmoid(x).
template <typename S>
Var swish(Graph<S>& g, Var a) {
  const auto x = g.value(a).array();
  MatrixX<S> sig = (S(1) / (S(1) + (-x).exp())).matrix();
  MatrixX<S> out = (x * sig.array()).matrix();
  return g.emplace(std::move(out), {a}, [a, sig = std::move(sig)](Graph<S>& g, int self) {
    const auto s = sig.array();
    const auto x = g.value(a).array();
    g.grad(a).array() += g.grad(self).array() * (s + x * s * (S(1) - s));
  });
}

template <typename S>
Var concat_rows(Graph<S>& g, const std::vector<Var>& parts) {
  Eigen::Index rows = 0;
  const Eigen::Index cols = g.value(parts.front()).cols();
  for (Var p : parts) rows += g.value(p).rows();
  MatrixX<S> out(rows, cols);
  Eigen::Index r = 0;
  for (Var p : parts) {
    const auto& v = g.value(p);
    out.middleRows(r, v.rows()) = v;
    r += v.rows();
  }
  return g.emplace(std::move(out), parts, [parts](Graph<S>& g, int self) {
    Eigen::Index r = 0;
    for (Var p : parts) {
      const Eigen::Index n = g.value(p).rows();
      if (g.requires_grad(p)) g.grad(p) += g.grad(self).middleRows(r, n);
      r += n;
    }
  });
}

template <typename S>
Var concat_cols(Graph<S>& g, const std::vector<Var>& parts) {
  Eigen::Index cols = 0;
  const Eigen::Index rows = g.value(parts.front()).rows();
  for (Var p : parts) cols += g.value(p).cols();
  MatrixX<S> out(rows, cols);
  Eigen::Index c = 0;
  for (Var p : parts) {
    const auto& v = g.value(p);
    out.middleCols(c, v.cols()) = v;
    c += v.cols();
  }
  return g.emplace(std::move(out), parts, [parts](Graph<S>& g, int self) {
    Eigen::Index c = 0;
    for (Var p : parts) {
      const Eigen::Index n = g.value(p).cols();
      if (g.requires_grad(p)) g.grad(p) += g.grad(self).middleCols(c, n);
      c += n;
    }
  });
}

template <typename S>
Var slice_rows(Graph<S>& g, Var a, Eigen::Index start, Eigen::Index count) {
  MatrixX<S> out = g.value(a).middleRows(start, count);
  return g.emplace(std::move(out), {a}, [a, start, count](Graph<S>& g, int self) {
    g.grad(a).middleRows(start, count) += g.grad(self);
  });
}

template <typename S>
Var slice_cols(Graph<S>& g, Var a, Eigen::Index start, Eigen::Index count) {
  MatrixX<S> out = g.value(a).middleCols(start, count);
  return g.emplace(std::move(out), {a}, [a, start, count](Graph<S>& g, int self) {
    g.grad(a).middleCols(start, count) += g.grad(self);
  });
}

template <typename S>
Var transpose(Graph<S>& g, Var a) {
  MatrixX<S> out = g.value(a).transpose();
  return g.emplace(std::move(out), {a}, [a](Graph<S>& g, int self) {
    g.grad(a) += g.grad(self).transpose();
  });
}

/// Mean over columns (time), giving a column vector.
template <typename S>
Var mean_cols(Graph<S>& g, Var a) {
  MatrixX<S> out = g.value(a).rowwise().mean();
  return g.emplace(std::move(out), {a}, [a](Graph<S>& g, int self) {
    const auto n = static_cast<S>(g.value(a).cols());
    g.grad(a).colwise() += g.grad(self).col(0) / n;
  });
}

template <typename S>
Var sum_all(Graph<S>& g, Var a) {
  MatrixX<S> out(1, 1);
  out(0, 0) = g.value(a).sum();
  return g.emplace(std::move(out), {a}, [a](Graph<S>& g, int self) {
    g.grad(a).array() += g.grad(self)(0, 0);
  });
}

/// Sum of squares of all entries.
template <typename S>
Var sum_sq(Graph<S>& g, Var a) {
  MatrixX<S> out(1, 1);
  out(0, 0) = g.value(a).squaredNorm();
  return g.emplace(std::move(out), {a}, [a](Graph<S>& g, int self) {
    g.grad(a) += (S(2) * g.grad(self)(0, 0)) * g.value(a);
  });
}

// ---------------------------------------------------------------------------
// Fused recurrent cell.

/// One LSTM step over a batch. `x` is the cell input (I×B), `state` the
/// previous [h; c] (2H×B), `w` is 4H×(I+H) acting on [x; h] with gate order
/// (input, forget, cell, output). Returns the new [h; c].
template <typename S>
Var lstm_cell(Graph<S>& g, Var w, Var b, Var x, Var state) {
  const auto& W = g.value(w);
  const Eigen::Index H = W.rows() / 4;
  const Eigen::Index I = g.value(x).rows();
  const Eigen::Index B = g.value(x).cols();
  const auto& hc = g.value(state);

  MatrixX<S> pre = W.leftCols(I) * g.value(x);
  pre.noalias() += W.rightCols(H) * hc.topRows(H);
  pre.colwise() += g.value(b).col(0);

  MatrixX<S> act(4 * H, B);
  act.topRows(2 * H) = (S(1) / (S(1) + (-pre.topRows(2 * H).array()).exp())).matrix();
  act.middleRows(2 * H, H) = pre.middleRows(2 * H, H).array().tanh().matrix();
  act.bottomRows(H) = (S(1) / (S(1) + (-pre.bottomRows(H).array()).exp())).matrix();

  MatrixX<S> out(2 * H, B);
  auto c_new = out.bottomRows(H);
  c_new = (act.middleRows(H, H).array() * hc.bottomRows(H).array() +
           act.topRows(H).array() * act.middleRows(2 * H, H).array())
              .matrix();
  MatrixX<S> tanh_c = c_new.array().tanh().matrix();
  out.topRows(H) = (act.bottomRows(H).array() * tanh_c.array()).matrix();

  return g.emplace(
      std::move(out), {w, b, x, state},
      [w, b, x, state, act = std::move(act), tanh_c = std::move(tanh_c), H, I](Graph<S>& g,
                                                                              int self) {
        const MatrixX<S>& go = g.grad(self);
        const auto dh = go.topRows(H).array();
        const auto i = act.topRows(H).array();
        const auto f = act.middleRows(H, H).array();
        const auto gg = act.middleRows(2 * H, H).array();
        const auto o = act.bottomRows(H).array();
        const auto tc = tanh_c.array();
        const auto& hc = g.value(state);

        MatrixX<S> dc = (go.bottomRows(H).array() + dh * o * (S(1) - tc * tc)).matrix();
        MatrixX<S> dpre(4 * H, go.cols());
        dpre.topRows(H) = (dc.array() * gg * i * (S(1) - i)).matrix();
        dpre.middleRows(H, H) = (dc.array() * hc.bottomRows(H).array() * f * (S(1) - f)).matrix();
        dpre.middleRows(2 * H, H) = (dc.array() * i * (S(1) - gg * gg)).matrix();
        dpre.bottomRows(H) = (dh * tc * o * (S(1) - o)).matrix();

        const auto& W = g.value(w);
        if (g.requires_grad(w)) {
          auto& gw = g.grad(w);
          gw.leftCols(I).noalias() += dpre * g.value(x).transpose();
          gw.rightCols(H).noalias() += dpre * hc.topRows(H).transpose();
        }
        if (g.requires_grad(b)) g.grad(b) += dpre.rowwise().sum();
        if (g.requires_grad(x)) g.grad(x).noalias() += W.leftCols(I).transpose() * dpre;
        if (g.requires_grad(state)) {
          auto& gs = g.grad(state);
          gs.topRows(H).noalias() += W.rightCols(H).transpose() * dpre;
          gs.bottomRows(H) += (dc.array() * f).matrix();
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution over time. Values are channels × time.

/// Depthwise low-pass filter with kernel [1 3 3 1]/8, no padding:
/// C×L → C×(L−3).
template <typename S>
Var blur(Graph<S>& g, Var a) {
  const auto& x = g.value(a);
  const Eigen::Index L = x.cols() - 3;
  if (L < 1) throw InvalidInput("blur: input shorter than the kernel");
  MatrixX<S> out = (x.middleCols(0, L) + S(3) * x.middleCols(1, L) + S(3) * x.middleCols(2, L) +
                    x.middleCols(3, L)) /
                   S(8);
  return g.emplace(std::move(out), {a}, [a, L](Graph<S>& g, int self) {
    const auto& go = g.grad(self);
    auto& gx = g.grad(a);
    gx.middleCols(0, L) += go / S(8);
    gx.middleCols(1, L) += go * (S(3) / S(8));
    gx.middleCols(2, L) += go * (S(3) / S(8));
    gx.middleCols(3, L) += go / S(8);
  });
}

/// Kernel-3, stride-2, unpadded convolution. `w` is F×(3C) acting on the
/// stacked taps [x(t0); x(t0+1); x(t0+2)]. C×L → F×((L−3)/2+1).
template <typename S>
Var conv_stride2(Graph<S>& g, Var w, Var b, Var a) {
  const auto& x = g.value(a);
  const Eigen::Index C = x.rows();
  if (x.cols() < 3) throw InvalidInput("conv_stride2: input shorter than the kernel");
  const Eigen::Index L = (x.cols() - 3) / 2 + 1;
  MatrixX<S> cols(3 * C, L);
  for (Eigen::Index t = 0; t < L; ++t)
    for (Eigen::Index k = 0; k < 3; ++k) cols.col(t).segment(k * C, C) = x.col(2 * t + k);
  MatrixX<S> out = g.value(w) * cols;
  out.colwise() += g.value(b).col(0);
  return g.emplace(std::move(out), {w, b, a},
                   [w, b, a, C, L, cols = std::move(cols)](Graph<S>& g, int self) {
                     const auto& go = g.grad(self);
                     if (g.requires_grad(w)) g.grad(w).noalias() += go * cols.transpose();
                     if (g.requires_grad(b)) g.grad(b) += go.rowwise().sum();
                     if (g.requires_grad(a)) {
                       MatrixX<S> dcols = g.value(w).transpose() * go;
                       auto& gx = g.grad(a);
                       for (Eigen::Index t = 0; t < L; ++t)
                         for (Eigen::Index k = 0; k < 3; ++k)
                           gx.col(2 * t + k) += dcols.col(t).segment(k * C, C);
                     }
                   });
}

}  // namespace styleeq::ad

#endif  // STYLEEQ_AUTODIFF_HPP
