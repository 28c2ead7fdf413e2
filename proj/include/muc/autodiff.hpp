#pragma once

#include <deque>
#include <functional>
#include <utility>

#include <Eigen/Dense>

#include "muc/tensor.hpp"

namespace muc::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using CRowMap = Eigen::Map<const RowMat>;

class Graph;

// Lightweight handle to a node owned by a Graph.
class Value {
 public:
  Value() = default;
  Value(Graph* g, int id) : g_(g), id_(id) {}
  Graph* graph() const { return g_; }
  int id() const { return id_; }
  bool valid() const { return g_ != nullptr; }
  inline const Tensor& val() const;
  inline const std::vector<int>& shape() const;

 private:
  Graph* g_ = nullptr;
  int id_ = -1;
};

struct Node {
  Tensor value;
  Tensor grad;  // allocated on demand during backward
  bool requires_grad = false;
  bool grad_alloc = false;
  const char* op = "";
  std::function<void(Graph&, int)> backward;  // scatters this node's grad to parents
};

// Reverse-mode tape. Forward values are computed eagerly as ops are recorded;
// backward() walks the tape once in reverse creation order. One graph is
// single-threaded; independent graphs may run concurrently.
class Graph {
 public:
  bool check_finite = true;

  Value make(Tensor value, bool requires_grad, const char* op,
             std::function<void(Graph&, int)> backward = nullptr) {
    if (check_finite && !value.finite())
      throw NumericError(std::string("non-finite forward value in op '") + op + "'");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.op = op;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Value(this, static_cast<int>(nodes_.size()) - 1);
  }

  Value leaf(Tensor t, bool requires_grad = true) { return make(std::move(t), requires_grad, "leaf"); }
  Value constant(Tensor t) { return make(std::move(t), false, "const"); }
  Value constant_scalar(double x) { return constant(Tensor::scalar(x)); }

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }

  Tensor& grad(int id) {
    Node& n = node(id);
    if (!n.grad_alloc) {
      n.grad = Tensor(n.value.shape());
      n.grad_alloc = true;
    }
    return n.grad;
  }
  const Tensor& grad(Value v) const { return node(v.id()).grad; }

  // Accumulates g into the node's gradient if it participates in backprop.
  void accum(int id, const double* g, std::size_t n) {
    Node& nd = node(id);
    if (!nd.requires_grad) return;
    Tensor& t = grad(id);
    double* d = t.data();
    for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
  }

  void backward(Value loss) {
    if (backward_done_)
      throw NumericError("backward: already run on this graph; reset before running again");
    if (loss.graph() != this) throw NumericError("backward: value from another graph");
    Node& root = node(loss.id());
    if (root.value.size() != 1) throw NumericError("backward: loss must be a scalar");
    backward_done_ = true;
    if (!root.requires_grad) return;  // nothing to differentiate
    grad(loss.id())[0] = 1.0;
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = node(id);
      if (!n.requires_grad || !n.grad_alloc || !n.backward) continue;
      n.backward(*this, id);
      if (check_finite && !n.grad.finite())
        throw NumericError(std::string("non-finite gradient in op '") + n.op + "'");
    }
  }

  void reset_backward() {
    backward_done_ = false;
    for (Node& n : nodes_) {
      if (n.grad_alloc) n.grad.fill(0.0);
    }
  }

  bool backward_done() const { return backward_done_; }

 private:
  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

inline const Tensor& Value::val() const { return g_->node(id_).value; }
inline const std::vector<int>& Value::shape() const { return val().shape(); }

namespace detail {

inline void same_graph(Value a, Value b, const char* op) {
  if (a.graph() != b.graph()) throw NumericError(std::string(op) + ": values from different graphs");
}
inline void same_shape(Value a, Value b, const char* op) {
  if (!(a.val().same_shape(b.val())))
    throw NumericError(std::string(op) + ": shape mismatch " + a.val().shape_str() + " vs " + b.val().shape_str());
}
inline bool rg(Value a) { return a.graph()->node(a.id()).requires_grad; }

}  // namespace detail

// ---- elementwise binary ----

inline Value add(Value a, Value b) {
  detail::same_graph(a, b, "add");
  detail::same_shape(a, b, "add");
  Graph& g = *a.graph();
  Tensor out = a.val();
  const double* pb = b.val().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  const int ia = a.id(), ib = b.id();
  return g.make(std::move(out), detail::rg(a) || detail::rg(b), "add", [ia, ib](Graph& gr, int self) {
    const Tensor& go = gr.node(self).grad;
    gr.accum(ia, go.data(), go.size());
    gr.accum(ib, go.data(), go.size());
  });
}

inline Value sub(Value a, Value b) {
  detail::same_graph(a, b, "sub");
  detail::same_shape(a, b, "sub");
  Graph& g = *a.graph();
  Tensor out = a.val();
  const double* pb = b.val().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  const int ia = a.id(), ib = b.id();
  return g.make(std::move(out), detail::rg(a) || detail::rg(b), "sub", [ia, ib](Graph& gr, int self) {
    const Tensor& go = gr.node(self).grad;
    gr.accum(ia, go.data(), go.size());
    if (gr.node(ib).requires_grad) {
      Tensor& gb = gr.grad(ib);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
    }
  });
}

inline Value mul(Value a, Value b) {
  detail::same_graph(a, b, "mul");
  detail::same_shape(a, b, "mul");
  Graph& g = *a.graph();
  Tensor out = a.val();
  const double* pb = b.val().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  const int ia = a.id(), ib = b.id();
  return g.make(std::move(out), detail::rg(a) || detail::rg(b), "mul", [ia, ib](Graph& gr, int self) {
    const Tensor& go = gr.node(self).grad;
    const Tensor& va = gr.node(ia).value;
    const Tensor& vb = gr.node(ib).value;
    if (gr.node(ia).requires_grad) {
      Tensor& ga = gr.grad(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * vb[i];
    }
    if (gr.node(ib).requires_grad) {
      Tensor& gb = gr.grad(ib);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * va[i];
    }
  });
}

inline Value div(Value a, Value b) {
  detail::same_graph(a, b, "div");
  detail::same_shape(a, b, "div");
  Graph& g = *a.graph();
  Tensor out = a.val();
  const double* pb = b.val().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= pb[i];
  const int ia = a.id(), ib = b.id();
  return g.make(std::move(out), detail::rg(a) || detail::rg(b), "div", [ia, ib](Graph& gr, int self) {
    const Node& s = gr.node(self);
    const Tensor& go = s.grad;
    const Tensor& vo = s.value;
    const Tensor& vb = gr.node(ib).value;
    if (gr.node(ia).requires_grad) {
      Tensor& ga = gr.grad(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / vb[i];
    }
    if (gr.node(ib).requires_grad) {
      Tensor& gb = gr.grad(ib);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i] * vo[i] / vb[i];
    }
  });
}

// ---- scalar (double) ops ----

inline Value add_scalar(Value a, double c) {
  Graph& g = *a.graph();
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c;
  const int ia = a.id();
  return g.make(std::move(out), detail::rg(a), "add_scalar", [ia](Graph& gr, int self) {
    const Tensor& go = gr.node(self).grad;
    gr.accum(ia, go.data(), go.size());
  });
}

inline Value mul_scalar(Value a, double c) {
  Graph& g = *a.graph();
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
  const int ia = a.id();
  return g.make(std::move(out), detail::rg(a), "mul_scalar", [ia, c](Graph& gr, int self) {
    const Tensor& go = gr.node(self).grad;
    if (!gr.node(ia).requires_grad) return;
    Tensor& ga = gr.grad(ia);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
  });
}

inline Value neg(Value a) { return mul_scalar(a, -1.0); }

// scalar Value (shape [1]) times tensor
inline Value smul(Value s, Value x) {
  detail::same_graph(s, x, "smul");
  if (s.val().size() != 1) throw NumericError("smul: first argument must be a scalar");
  Graph& g = *s.graph();
  const double sv = s.val()[0];
  Tensor out = x.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= sv;
  const int is = s.id(), ix = x.id();
  return g.make(std::move(out), detail::rg(s) || detail::rg(x), "smul", [is, ix](Graph& gr, int self) {
    const Tensor& go = gr.node(self).grad;
    const Tensor& vx = gr.node(ix).value;
    const double sv2 = gr.node(is).value[0];
    if (gr.node(is).requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < go.size(); ++i) acc += go[i] * vx[i];
      gr.grad(is)[0] += acc;
    }
    if (gr.node(ix).requires_grad) {
      Tensor& gx = gr.grad(ix);
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * sv2;
    }
  });
}

// ---- unary elementwise ----

namespace detail {

template <typename F, typename DF>
Value unary(Value a, const char* op, F f, DF df) {
  Graph& g = *a.graph();
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(out[i]);
  const int ia = a.id();
  return g.make(std::move(out), rg(a), op, [ia, df](Graph& gr, int self) {
    if (!gr.node(ia).requires_grad) return;
    const Node& s = gr.node(self);
    const Tensor& go = s.grad;
    const Tensor& vo = s.value;
    const Tensor& vi = gr.node(ia).value;
    Tensor& ga = gr.grad(ia);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * df(vi[i], vo[i]);
  });
}

}  // namespace detail

inline Value exp(Value a) {
  return detail::unary(a, "exp", [](double x) { return std::exp(x); },
                       [](double, double y) { return y; });
}
inline Value log(Value a) {
  return detail::unary(a, "log", [](double x) { return std::log(x); },
                       [](double x, double) { return 1.0 / x; });
}
inline Value sqrt(Value a) {
  return detail::unary(a, "sqrt", [](double x) { return std::sqrt(x); },
                       [](double, double y) { return 0.5 / y; });
}
inline Value sin(Value a) {
  return detail::unary(a, "sin", [](double x) { return std::sin(x); },
                       [](double x, double) { return std::cos(x); });
}
inline Value cos(Value a) {
  return detail::unary(a, "cos", [](double x) { return std::cos(x); },
                       [](double x, double) { return -std::sin(x); });
}
inline Value abs(Value a) {
  return detail::unary(a, "abs", [](double x) { return std::abs(x); },
                       [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}
inline Value relu(Value a) {
  return detail::unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}
inline Value sigmoid(Value a) {
  return detail::unary(a, "sigmoid",
                       [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
                       [](double, double y) { return y * (1.0 - y); });
}
inline Value softplus(Value a) {
  return detail::unary(a, "softplus",
                       [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
                       [](double x, double) {
                         return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
                       });
}
inline Value gelu(Value a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return detail::unary(a, "gelu",
                       [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
                       [=](double x, double) {
                         const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                         return cdf + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
                       });
}

// ---- shape ops ----

inline Value reshape(Value a, std::vector<int> shape) {
  Graph& g = *a.graph();
  if (Tensor::count(shape) != a.val().size()) throw NumericError("reshape: element count mismatch");
  Tensor out(std::move(shape), a.val().values());
  const int ia = a.id();
  return g.make(std::move(out), detail::rg(a), "reshape", [ia](Graph& gr, int self) {
    const Tensor& go = gr.node(self).grad;
    gr.accum(ia, go.data(), go.size());
  });
}

inline Value slice_flat(Value a, int start, int len) {
  Graph& g = *a.graph();
  if (start < 0 || len <= 0 || static_cast<std::size_t>(start + len) > a.val().size())
    throw NumericError("slice_flat: range out of bounds");
  Tensor out({len});
  std::copy(a.val().data() + start, a.val().data() + start + len, out.data());
  const int ia = a.id();
  return g.make(std::move(out), detail::rg(a), "slice_flat", [ia, start, len](Graph& gr, int self) {
    if (!gr.node(ia).requires_grad) return;
    const Tensor& go = gr.node(self).grad;
    Tensor& ga = gr.grad(ia);
    for (int i = 0; i < len; ++i) ga[static_cast<std::size_t>(start + i)] += go[static_cast<std::size_t>(i)];
  });
}

inline Value concat_flat(const std::vector<Value>& parts) {
  if (parts.empty()) throw NumericError("concat_flat: empty");
  Graph& g = *parts[0].graph();
  std::size_t total = 0;
  bool needs = false;
  for (Value p : parts) {
    detail::same_graph(parts[0], p, "concat_flat");
    total += p.val().size();
    needs = needs || detail::rg(p);
  }
  Tensor out({static_cast<int>(total)});
  std::size_t off = 0;
  std::vector<std::pair<int, std::pair<std::size_t, std::size_t>>> spans;  // id -> (offset, len)
  spans.reserve(parts.size());
  for (Value p : parts) {
    const Tensor& t = p.val();
    std::copy(t.data(), t.data() + t.size(), out.data() + off);
    spans.push_back({p.id(), {off, t.size()}});
    off += t.size();
  }
  return g.make(std::move(out), needs, "concat_flat", [spans](Graph& gr, int self) {
    const Tensor& go = gr.node(self).grad;
    for (const auto& [id, span] : spans) gr.accum(id, go.data() + span.first, span.second);
  });
}

inline Value slice_col(Value a, int col) {
  Graph& g = *a.graph();
  const Tensor& t = a.val();
  if (t.ndim() != 2 || col < 0 || col >= t.dim(1)) throw NumericError("slice_col: bad args");
  const int n = t.dim(0), m = t.dim(1);
  Tensor out({n});
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = t[static_cast<std::size_t>(i) * m + col];
  const int ia = a.id();
  return g.make(std::move(out), detail::rg(a), "slice_col", [ia, col, n, m](Graph& gr, int self) {
    if (!gr.node(ia).requires_grad) return;
    const Tensor& go = gr.node(self).grad;
    Tensor& ga = gr.grad(ia);
    for (int i = 0; i < n; ++i) ga[static_cast<std::size_t>(i) * m + col] += go[static_cast<std::size_t>(i)];
  });
}

// ---- reductions ----

inline Value sum_all(Value a) {
  Graph& g = *a.graph();
  double s = 0.0;
  for (std::size_t i = 0; i < a.val().size(); ++i) s += a.val()[i];
  const int ia = a.id();
  return g.make(Tensor::scalar(s), detail::rg(a), "sum_all", [ia](Graph& gr, int self) {
    if (!gr.node(ia).requires_grad) return;
    const double go = gr.node(self).grad[0];
    Tensor& ga = gr.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go;
  });
}

inline Value mean_all(Value a) {
  const double inv = 1.0 / static_cast<double>(a.val().size());
  return mul_scalar(sum_all(a), inv);
}

inline Value sum_rows(Value a) {  // [n,m] -> [m], sum over axis 0
  Graph& g = *a.graph();
  const Tensor& t = a.val();
  if (t.ndim() != 2) throw NumericError("sum_rows: expects a matrix");
  const int n = t.dim(0), m = t.dim(1);
  Tensor out({m});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out[static_cast<std::size_t>(j)] += t[static_cast<std::size_t>(i) * m + j];
  const int ia = a.id();
  return g.make(std::move(out), detail::rg(a), "sum_rows", [ia, n, m](Graph& gr, int self) {
    if (!gr.node(ia).requires_grad) return;
    const Tensor& go = gr.node(self).grad;
    Tensor& ga = gr.grad(ia);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) ga[static_cast<std::size_t>(i) * m + j] += go[static_cast<std::size_t>(j)];
  });
}

// ---- matmul ----

inline Value matmul(Value a, Value b) {
  detail::same_graph(a, b, "matmul");
  const Tensor& ta = a.val();
  const Tensor& tb = b.val();
  if (ta.ndim() != 2 || tb.ndim() != 2 || ta.dim(1) != tb.dim(0))
    throw NumericError("matmul: shape mismatch " + ta.shape_str() + " x " + tb.shape_str());
  Graph& g = *a.graph();
  const int m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
  Tensor out({m, n});
  {
    CRowMap A(ta.data(), m, k), B(tb.data(), k, n);
    RowMap C(out.data(), m, n);
    C.noalias() = A * B;
  }
  const int ia = a.id(), ib = b.id();
  return g.make(std::move(out), detail::rg(a) || detail::rg(b), "matmul", [ia, ib, m, k, n](Graph& gr, int self) {
    const Tensor& go = gr.node(self).grad;
    CRowMap G(go.data(), m, n);
    if (gr.node(ia).requires_grad) {
      CRowMap B(gr.node(ib).value.data(), k, n);
      RowMap GA(gr.grad(ia).data(), m, k);
      GA.noalias() += G * B.transpose();
    }
    if (gr.node(ib).requires_grad) {
      CRowMap A(gr.node(ia).value.data(), m, k);
      RowMap GB(gr.grad(ib).data(), k, n);
      GB.noalias() += A.transpose() * G;
    }
  });
}

// matrix [m,k] times 1-D vector [k] -> [m]
inline Value matvec(Value a, Value x) {
  const int k = static_cast<int>(x.val().size());
  const int m = a.val().dim(0);
  return reshape(matmul(a, reshape(x, {k, 1})), {m});
}

// X [n,m] + v[m] broadcast over rows
inline Value add_rowvec(Value a, Value v) {
  detail::same_graph(a, v, "add_rowvec");
  const Tensor& t = a.val();
  if (t.ndim() != 2 || static_cast<int>(v.val().size()) != t.dim(1))
    throw NumericError("add_rowvec: shape mismatch");
  Graph& g = *a.graph();
  const int n = t.dim(0), m = t.dim(1);
  Tensor out = t;
  const double* pv = v.val().data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out[static_cast<std::size_t>(i) * m + j] += pv[j];
  const int ia = a.id(), iv = v.id();
  return g.make(std::move(out), detail::rg(a) || detail::rg(v), "add_rowvec", [ia, iv, n, m](Graph& gr, int self) {
    const Tensor& go = gr.node(self).grad;
    gr.accum(ia, go.data(), go.size());
    if (gr.node(iv).requires_grad) {
      Tensor& gv = gr.grad(iv);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) gv[static_cast<std::size_t>(j)] += go[static_cast<std::size_t>(i) * m + j];
    }
  });
}

// ---- softmax over axis 0 (per column) ----

inline Value softmax_cols(Value a) {
  Graph& g = *a.graph();
  const Tensor& t = a.val();
  if (t.ndim() != 2) throw NumericError("softmax_cols: expects a matrix");
  const int n = t.dim(0), m = t.dim(1);
  Tensor out({n, m});
  for (int j = 0; j < m; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) mx = std::max(mx, t[static_cast<std::size_t>(i) * m + j]);
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
      const double e = std::exp(t[static_cast<std::size_t>(i) * m + j] - mx);
      out[static_cast<std::size_t>(i) * m + j] = e;
      s += e;
    }
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i) * m + j] /= s;
  }
  const int ia = a.id();
  return g.make(std::move(out), detail::rg(a), "softmax_cols", [ia, n, m](Graph& gr, int self) {
    if (!gr.node(ia).requires_grad) return;
    const Node& s = gr.node(self);
    const Tensor& go = s.grad;
    const Tensor& vo = s.value;
    Tensor& ga = gr.grad(ia);
    for (int j = 0; j < m; ++j) {
      double dot = 0.0;
      for (int i = 0; i < n; ++i)
        dot += go[static_cast<std::size_t>(i) * m + j] * vo[static_cast<std::size_t>(i) * m + j];
      for (int i = 0; i < n; ++i) {
        const std::size_t k = static_cast<std::size_t>(i) * m + j;
        ga[k] += vo[k] * (go[k] - dot);
      }
    }
  });
}

// ---- image ops (C,H,W) ----

inline Value conv2d(Value x, Value w, Value b, int stride, int pad) {
  detail::same_graph(x, w, "conv2d");
  detail::same_graph(x, b, "conv2d");
  const Tensor& tx = x.val();
  const Tensor& tw = w.val();
  if (tx.ndim() != 3 || tw.ndim() != 4) throw NumericError("conv2d: bad ranks");
  const int cin = tx.dim(0), h = tx.dim(1), wd = tx.dim(2);
  const int cout = tw.dim(0), kh = tw.dim(2), kw = tw.dim(3);
  if (tw.dim(1) != cin || static_cast<int>(b.val().size()) != cout)
    throw NumericError("conv2d: channel mismatch");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  if ((h + 2 * pad - kh) % stride != 0 || (wd + 2 * pad - kw) % stride != 0 || ho <= 0 || wo <= 0)
    throw NumericError("conv2d: spatial dims not divisible by stride");
  Graph& g = *x.graph();
  Tensor out({cout, ho, wo});
  {
    const double* px = tx.data();
    const double* pw = tw.data();
    const double* pb = b.val().data();
    double* po = out.data();
    for (int co = 0; co < cout; ++co) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          double acc = pb[co];
          for (int ci = 0; ci < cin; ++ci) {
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= h) continue;
              const double* xrow = px + (static_cast<std::size_t>(ci) * h + iy) * wd;
              const double* wrow = pw + ((static_cast<std::size_t>(co) * cin + ci) * kh + ky) * kw;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= wd) continue;
                acc += wrow[kx] * xrow[ix];
              }
            }
          }
          po[(static_cast<std::size_t>(co) * ho + oy) * wo + ox] = acc;
        }
      }
    }
  }
  const int ix_ = x.id(), iw_ = w.id(), ib_ = b.id();
  return g.make(std::move(out), detail::rg(x) || detail::rg(w) || detail::rg(b), "conv2d",
                [ix_, iw_, ib_, cin, h, wd, cout, kh, kw, ho, wo, stride, pad](Graph& gr, int self) {
                  const Tensor& go = gr.node(self).grad;
                  const double* pg = go.data();
                  const Tensor& tx2 = gr.node(ix_).value;
                  const Tensor& tw2 = gr.node(iw_).value;
                  const bool need_x = gr.node(ix_).requires_grad;
                  const bool need_w = gr.node(iw_).requires_grad;
                  const bool need_b = gr.node(ib_).requires_grad;
                  double* gx = need_x ? gr.grad(ix_).data() : nullptr;
                  double* gw = need_w ? gr.grad(iw_).data() : nullptr;
                  double* gb = need_b ? gr.grad(ib_).data() : nullptr;
                  for (int co = 0; co < cout; ++co) {
                    for (int oy = 0; oy < ho; ++oy) {
                      for (int ox = 0; ox < wo; ++ox) {
                        const double gov = pg[(static_cast<std::size_t>(co) * ho + oy) * wo + ox];
                        if (gov == 0.0) continue;
                        if (need_b) gb[co] += gov;
                        for (int ci = 0; ci < cin; ++ci) {
                          for (int ky = 0; ky < kh; ++ky) {
                            const int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            const std::size_t xoff = (static_cast<std::size_t>(ci) * h + iy) * wd;
                            const std::size_t woff = ((static_cast<std::size_t>(co) * cin + ci) * kh + ky) * kw;
                            for (int kx = 0; kx < kw; ++kx) {
                              const int ix = ox * stride + kx - pad;
                              if (ix < 0 || ix >= wd) continue;
                              if (need_w) gw[woff + kx] += gov * tx2[xoff + ix];
                              if (need_x) gx[xoff + ix] += gov * tw2[woff + kx];
                            }
                          }
                        }
                      }
                    }
                  }
                });
}

inline Value avg_pool2d(Value x, int k) {
  const Tensor& t = x.val();
  if (t.ndim() != 3) throw NumericError("avg_pool2d: expects C,H,W");
  const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
  if (h % k != 0 || w % k != 0) throw NumericError("avg_pool2d: dims not divisible by kernel");
  Graph& g = *x.graph();
  const int ho = h / k, wo = w / k;
  Tensor out({c, ho, wo});
  const double inv = 1.0 / static_cast<double>(k * k);
  for (int ci = 0; ci < c; ++ci)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx)
            acc += t[(static_cast<std::size_t>(ci) * h + oy * k + dy) * w + ox * k + dx];
        out[(static_cast<std::size_t>(ci) * ho + oy) * wo + ox] = acc * inv;
      }
  const int ix = x.id();
  return g.make(std::move(out), detail::rg(x), "avg_pool2d", [ix, c, h, w, k, ho, wo, inv](Graph& gr, int self) {
    if (!gr.node(ix).requires_grad) return;
    const Tensor& go = gr.node(self).grad;
    Tensor& gx = gr.grad(ix);
    for (int ci = 0; ci < c; ++ci)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const double gv = go[(static_cast<std::size_t>(ci) * ho + oy) * wo + ox] * inv;
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx)
              gx[(static_cast<std::size_t>(ci) * h + oy * k + dy) * w + ox * k + dx] += gv;
        }
  });
}

inline Value upsample_nearest2(Value x) {
  const Tensor& t = x.val();
  if (t.ndim() != 3) throw NumericError("upsample_nearest2: expects C,H,W");
  const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
  Graph& g = *x.graph();
  Tensor out({c, 2 * h, 2 * w});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < 2 * h; ++y)
      for (int xq = 0; xq < 2 * w; ++xq)
        out[(static_cast<std::size_t>(ci) * 2 * h + y) * 2 * w + xq] =
            t[(static_cast<std::size_t>(ci) * h + y / 2) * w + xq / 2];
  const int ix = x.id();
  return g.make(std::move(out), detail::rg(x), "upsample_nearest2", [ix, c, h, w](Graph& gr, int self) {
    if (!gr.node(ix).requires_grad) return;
    const Tensor& go = gr.node(self).grad;
    Tensor& gx = gr.grad(ix);
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < 2 * h; ++y)
        for (int xq = 0; xq < 2 * w; ++xq)
          gx[(static_cast<std::size_t>(ci) * h + y / 2) * w + xq / 2] +=
              go[(static_cast<std::size_t>(ci) * 2 * h + y) * 2 * w + xq];
  });
}

inline Value concat_channels(Value a, Value b) {
  detail::same_graph(a, b, "concat_channels");
  const Tensor& ta = a.val();
  const Tensor& tb = b.val();
  if (ta.ndim() != 3 || tb.ndim() != 3 || ta.dim(1) != tb.dim(1) || ta.dim(2) != tb.dim(2))
    throw NumericError("concat_channels: spatial mismatch");
  Graph& g = *a.graph();
  const int c1 = ta.dim(0), c2 = tb.dim(0), h = ta.dim(1), w = ta.dim(2);
  Tensor out({c1 + c2, h, w});
  std::copy(ta.data(), ta.data() + ta.size(), out.data());
  std::copy(tb.data(), tb.data() + tb.size(), out.data() + ta.size());
  const int ia = a.id(), ib = b.id();
  const std::size_t na = ta.size(), nb = tb.size();
  return g.make(std::move(out), detail::rg(a) || detail::rg(b), "concat_channels",
                [ia, ib, na, nb](Graph& gr, int self) {
                  const Tensor& go = gr.node(self).grad;
                  gr.accum(ia, go.data(), na);
                  gr.accum(ib, go.data() + na, nb);
                });
}

inline Value add_channel_bias(Value x, Value b) {
  detail::same_graph(x, b, "add_channel_bias");
  const Tensor& t = x.val();
  if (t.ndim() != 3 || static_cast<int>(b.val().size()) != t.dim(0))
    throw NumericError("add_channel_bias: shape mismatch");
  Graph& g = *x.graph();
  const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
  Tensor out = t;
  const double* pb = b.val().data();
  for (int ci = 0; ci < c; ++ci) {
    double* base = out.data() + static_cast<std::size_t>(ci) * h * w;
    for (int i = 0; i < h * w; ++i) base[i] += pb[ci];
  }
  const int ix = x.id(), ib = b.id();
  return g.make(std::move(out), detail::rg(x) || detail::rg(b), "add_channel_bias",
                [ix, ib, c, h, w](Graph& gr, int self) {
                  const Tensor& go = gr.node(self).grad;
                  gr.accum(ix, go.data(), go.size());
                  if (gr.node(ib).requires_grad) {
                    Tensor& gb = gr.grad(ib);
                    for (int ci = 0; ci < c; ++ci) {
                      const double* base = go.data() + static_cast<std::size_t>(ci) * h * w;
                      double acc = 0.0;
                      for (int i = 0; i < h * w; ++i) acc += base[i];
                      gb[static_cast<std::size_t>(ci)] += acc;
                    }
                  }
                });
}

// Per-texel L2 normalization across channels: y = x / sqrt(sum_c x^2 + eps).
inline Value normalize_texels(Value x, double eps = 1e-12) {
  const Tensor& t = x.val();
  if (t.ndim() != 3) throw NumericError("normalize_texels: expects C,H,W");
  Graph& g = *x.graph();
  const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
  const int hw = h * w;
  Tensor out({c, h, w});
  for (int i = 0; i < hw; ++i) {
    double s = eps;
    for (int ci = 0; ci < c; ++ci) {
      const double v = t[static_cast<std::size_t>(ci) * hw + i];
      s += v * v;
    }
    const double inv = 1.0 / std::sqrt(s);
    for (int ci = 0; ci < c; ++ci)
      out[static_cast<std::size_t>(ci) * hw + i] = t[static_cast<std::size_t>(ci) * hw + i] * inv;
  }
  const int ix = x.id();
  return g.make(std::move(out), detail::rg(x), "normalize_texels", [ix, c, hw, eps](Graph& gr, int self) {
    if (!gr.node(ix).requires_grad) return;
    const Node& s = gr.node(self);
    const Tensor& go = s.grad;
    const Tensor& vo = s.value;
    const Tensor& vi = gr.node(ix).value;
    Tensor& gx = gr.grad(ix);
    for (int i = 0; i < hw; ++i) {
      double nsq = eps, dot = 0.0;
      for (int ci = 0; ci < c; ++ci) {
        const std::size_t k = static_cast<std::size_t>(ci) * hw + i;
        nsq += vi[k] * vi[k];
        dot += go[k] * vo[k];
      }
      const double invn = 1.0 / std::sqrt(nsq);
      for (int ci = 0; ci < c; ++ci) {
        const std::size_t k = static_cast<std::size_t>(ci) * hw + i;
        gx[k] += (go[k] - vo[k] * dot) * invn;
      }
    }
  });
}

}  // namespace muc::ad
