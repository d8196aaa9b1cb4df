#include "recap/graph.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace recap {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

ECMap cmap(const Tensor& t, int rows, int cols) {
  return ECMap(t.data.data(), rows, cols);
}

EMap mmap(Tensor& t, int rows, int cols) {
  return EMap(t.data.data(), rows, cols);
}

void check_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2)
    throw ValidationError(std::string(op) + ": expected 2-D tensor, got " + t.shape_str());
}

void check_3d(const Tensor& t, const char* op) {
  if (t.ndim() != 3)
    throw ValidationError(std::string(op) + ": expected 3-D tensor, got " + t.shape_str());
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var Graph::input(Tensor v, bool requires_grad) {
  return make(std::move(v), requires_grad, nullptr);
}

Var Graph::make(Tensor val, bool rg, std::function<void(Graph&, int)> back) {
  Node n;
  n.val = std::move(val);
  n.requires_grad = rg;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Graph::grad(Var v) const {
  const Node& n = nodes_[static_cast<size_t>(v.i)];
  if (n.grad.data.empty())
    throw ValidationError("Graph::grad: no gradient flowed to this node");
  return n.grad;
}

Tensor& Graph::grad_buf(int i) {
  Node& n = nodes_[static_cast<size_t>(i)];
  if (n.grad.data.empty()) n.grad = Tensor::zeros(n.val.shape);
  return n.grad;
}

void Graph::accumulate(int i, const Tensor& delta) {
  if (!nodes_[static_cast<size_t>(i)].requires_grad) return;
  Tensor& g = grad_buf(i);
  for (size_t k = 0; k < g.data.size(); ++k) g.data[k] += delta.data[k];
}

void Graph::backward(Var loss) {
  if (val(loss).numel() != 1) throw ValidationError("backward: loss must be scalar");
  grad_buf(loss.i).data[0] = 1.0;
  for (int i = loss.i; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.requires_grad || n.grad.data.empty() || !n.back) continue;
    n.back(*this, i);
  }
}

// ---------------------------------------------------------------------------
// elementwise

Var Graph::add(Var a, Var b) {
  const Tensor &va = val(a), &vb = val(b);
  check_same_shape(va, vb, "add");
  Tensor out = va;
  for (size_t k = 0; k < out.data.size(); ++k) out.data[k] += vb.data[k];
  bool rg = requires_grad(a) || requires_grad(b);
  return make(std::move(out), rg, [a, b](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    g.accumulate(a.i, go);
    g.accumulate(b.i, go);
  });
}

Var Graph::sub(Var a, Var b) {
  const Tensor &va = val(a), &vb = val(b);
  check_same_shape(va, vb, "sub");
  Tensor out = va;
  for (size_t k = 0; k < out.data.size(); ++k) out.data[k] -= vb.data[k];
  bool rg = requires_grad(a) || requires_grad(b);
  return make(std::move(out), rg, [a, b](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    g.accumulate(a.i, go);
    if (g.requires_grad(b)) {
      Tensor neg = go;
      for (double& x : neg.data) x = -x;
      g.accumulate(b.i, neg);
    }
  });
}

Var Graph::mul(Var a, Var b) {
  const Tensor &va = val(a), &vb = val(b);
  check_same_shape(va, vb, "mul");
  Tensor out = va;
  for (size_t k = 0; k < out.data.size(); ++k) out.data[k] *= vb.data[k];
  bool rg = requires_grad(a) || requires_grad(b);
  return make(std::move(out), rg, [a, b](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    if (g.requires_grad(a)) {
      Tensor d = go;
      const Tensor& vb2 = g.val(b);
      for (size_t k = 0; k < d.data.size(); ++k) d.data[k] *= vb2.data[k];
      g.accumulate(a.i, d);
    }
    if (g.requires_grad(b)) {
      Tensor d = go;
      const Tensor& va2 = g.val(a);
      for (size_t k = 0; k < d.data.size(); ++k) d.data[k] *= va2.data[k];
      g.accumulate(b.i, d);
    }
  });
}

Var Graph::scale(Var a, double s) {
  Tensor out = val(a);
  for (double& x : out.data) x *= s;
  return make(std::move(out), requires_grad(a), [a, s](Graph& g, int self) {
    Tensor d = g.out_grad(self);
    for (double& x : d.data) x *= s;
    g.accumulate(a.i, d);
  });
}

Var Graph::silu(Var a) {
  Tensor out = val(a);
  for (double& x : out.data) x = x * sigmoid_scalar(x);
  return make(std::move(out), requires_grad(a), [a](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    const Tensor& va = g.val(a);
    Tensor d = go;
    for (size_t k = 0; k < d.data.size(); ++k) {
      double s = sigmoid_scalar(va.data[k]);
      d.data[k] *= s * (1.0 + va.data[k] * (1.0 - s));
    }
    g.accumulate(a.i, d);
  });
}

Var Graph::sigmoid(Var a) {
  Tensor out = val(a);
  for (double& x : out.data) x = sigmoid_scalar(x);
  return make(std::move(out), requires_grad(a), [a](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    const Tensor& vo = g.nodes_[static_cast<size_t>(self)].val;
    Tensor d = go;
    for (size_t k = 0; k < d.data.size(); ++k)
      d.data[k] *= vo.data[k] * (1.0 - vo.data[k]);
    g.accumulate(a.i, d);
  });
}

// ---------------------------------------------------------------------------
// linear algebra

Var Graph::matmul(Var a, Var b) {
  const Tensor &va = val(a), &vb = val(b);
  check_2d(va, "matmul");
  check_2d(vb, "matmul");
  int n = va.size(0), k = va.size(1), m = vb.size(1);
  if (vb.size(0) != k)
    throw ValidationError("matmul: inner dimension mismatch " + va.shape_str() + " x " + vb.shape_str());
  Tensor out({n, m});
  mmap(out, n, m).noalias() = cmap(va, n, k) * cmap(vb, k, m);
  bool rg = requires_grad(a) || requires_grad(b);
  return make(std::move(out), rg, [a, b, n, k, m](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    if (g.requires_grad(a)) {
      Tensor da({n, k});
      mmap(da, n, k).noalias() = cmap(go, n, m) * cmap(g.val(b), k, m).transpose();
      g.accumulate(a.i, da);
    }
    if (g.requires_grad(b)) {
      Tensor db({k, m});
      mmap(db, k, m).noalias() = cmap(g.val(a), n, k).transpose() * cmap(go, n, m);
      g.accumulate(b.i, db);
    }
  });
}

Var Graph::matmul_nt(Var a, Var b) {
  const Tensor &va = val(a), &vb = val(b);
  check_2d(va, "matmul_nt");
  check_2d(vb, "matmul_nt");
  int n = va.size(0), k = va.size(1), m = vb.size(0);
  if (vb.size(1) != k)
    throw ValidationError("matmul_nt: inner dimension mismatch " + va.shape_str() + " x " + vb.shape_str() + "^T");
  Tensor out({n, m});
  mmap(out, n, m).noalias() = cmap(va, n, k) * cmap(vb, m, k).transpose();
  bool rg = requires_grad(a) || requires_grad(b);
  return make(std::move(out), rg, [a, b, n, k, m](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    if (g.requires_grad(a)) {
      Tensor da({n, k});
      mmap(da, n, k).noalias() = cmap(go, n, m) * cmap(g.val(b), m, k);
      g.accumulate(a.i, da);
    }
    if (g.requires_grad(b)) {
      Tensor db({m, k});
      mmap(db, m, k).noalias() = cmap(go, n, m).transpose() * cmap(g.val(a), n, k);
      g.accumulate(b.i, db);
    }
  });
}

Var Graph::linear(Var x, Var w, Var b) {
  const Tensor &vx = val(x), &vw = val(w), &vb = val(b);
  check_2d(vx, "linear");
  check_2d(vw, "linear");
  int n = vx.size(0), din = vx.size(1), dout = vw.size(1);
  if (vw.size(0) != din || vb.numel() != dout)
    throw ValidationError("linear: shape mismatch");
  Tensor out({n, dout});
  mmap(out, n, dout).noalias() = cmap(vx, n, din) * cmap(vw, din, dout);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < dout; ++j) out.at(i, j) += vb.at(j);
  bool rg = requires_grad(x) || requires_grad(w) || requires_grad(b);
  return make(std::move(out), rg, [x, w, b, n, din, dout](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    if (g.requires_grad(x)) {
      Tensor dx({n, din});
      mmap(dx, n, din).noalias() = cmap(go, n, dout) * cmap(g.val(w), din, dout).transpose();
      g.accumulate(x.i, dx);
    }
    if (g.requires_grad(w)) {
      Tensor dw({din, dout});
      mmap(dw, din, dout).noalias() = cmap(g.val(x), n, din).transpose() * cmap(go, n, dout);
      g.accumulate(w.i, dw);
    }
    if (g.requires_grad(b)) {
      Tensor db({dout});
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < dout; ++j) db.at(j) += go.at(i, j);
      g.accumulate(b.i, db);
    }
  });
}

Var Graph::transpose(Var a) {
  const Tensor& va = val(a);
  check_2d(va, "transpose");
  int n = va.size(0), m = va.size(1);
  Tensor out({m, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out.at(j, i) = va.at(i, j);
  return make(std::move(out), requires_grad(a), [a, n, m](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor d({n, m});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) d.at(i, j) = go.at(j, i);
    g.accumulate(a.i, d);
  });
}

Var Graph::reshape(Var a, std::vector<int> shape) {
  const Tensor& va = val(a);
  if (Tensor::numel_of(shape) != va.numel())
    throw ValidationError("reshape: element count mismatch");
  Tensor out;
  out.shape = shape;
  out.data = va.data;
  std::vector<int> orig = va.shape;
  return make(std::move(out), requires_grad(a), [a, orig](Graph& g, int self) {
    Tensor d;
    d.shape = orig;
    d.data = g.out_grad(self).data;
    g.accumulate(a.i, d);
  });
}

// ---------------------------------------------------------------------------
// normalization / attention helpers

Var Graph::layernorm_rows(Var x, double eps) {
  const Tensor& vx = val(x);
  check_2d(vx, "layernorm_rows");
  int n = vx.size(0), d = vx.size(1);
  Tensor out({n, d});
  std::vector<double> inv_sigma(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += vx.at(i, j);
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = vx.at(i, j) - mu;
      var += c * c;
    }
    var /= d;
    double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[static_cast<size_t>(i)] = is;
    for (int j = 0; j < d; ++j) out.at(i, j) = (vx.at(i, j) - mu) * is;
  }
  return make(std::move(out), requires_grad(x),
              [x, n, d, inv_sigma](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    const Tensor& y = g.nodes_[static_cast<size_t>(self)].val;
    Tensor dx({n, d});
    for (int i = 0; i < n; ++i) {
      double gmean = 0.0, gymean = 0.0;
      for (int j = 0; j < d; ++j) {
        gmean += go.at(i, j);
        gymean += go.at(i, j) * y.at(i, j);
      }
      gmean /= d;
      gymean /= d;
      double is = inv_sigma[static_cast<size_t>(i)];
      for (int j = 0; j < d; ++j)
        dx.at(i, j) = is * (go.at(i, j) - gmean - y.at(i, j) * gymean);
    }
    g.accumulate(x.i, dx);
  });
}

Var Graph::softmax_rows(Var x) {
  const Tensor& vx = val(x);
  check_2d(vx, "softmax_rows");
  int n = vx.size(0), m = vx.size(1);
  Tensor out({n, m});
  for (int i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < m; ++j) mx = std::max(mx, vx.at(i, j));
    double z = 0.0;
    if (!std::isfinite(mx)) {
      // all keys masked; define as uniform over nothing -> zeros
      for (int j = 0; j < m; ++j) out.at(i, j) = 0.0;
      continue;
    }
    for (int j = 0; j < m; ++j) {
      double e = std::exp(vx.at(i, j) - mx);
      out.at(i, j) = e;
      z += e;
    }
    for (int j = 0; j < m; ++j) out.at(i, j) /= z;
  }
  return make(std::move(out), requires_grad(x), [x, n, m](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    const Tensor& p = g.nodes_[static_cast<size_t>(self)].val;
    Tensor dx({n, m});
    for (int i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int j = 0; j < m; ++j) dot += go.at(i, j) * p.at(i, j);
      for (int j = 0; j < m; ++j)
        dx.at(i, j) = p.at(i, j) * (go.at(i, j) - dot);
    }
    g.accumulate(x.i, dx);
  });
}

Var Graph::row_mod(Var x, Var s, Var b) {
  const Tensor &vx = val(x), &vs = val(s), &vb = val(b);
  check_2d(vx, "row_mod");
  int n = vx.size(0), d = vx.size(1);
  if (vs.numel() != d || vb.numel() != d)
    throw ValidationError("row_mod: modulation length mismatch");
  Tensor out({n, d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      out.at(i, j) = vx.at(i, j) * (1.0 + vs.at(j)) + vb.at(j);
  bool rg = requires_grad(x) || requires_grad(s) || requires_grad(b);
  return make(std::move(out), rg, [x, s, b, n, d](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    if (g.requires_grad(x)) {
      const Tensor& vs2 = g.val(s);
      Tensor dx({n, d});
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) dx.at(i, j) = go.at(i, j) * (1.0 + vs2.at(j));
      g.accumulate(x.i, dx);
    }
    if (g.requires_grad(s)) {
      const Tensor& vx2 = g.val(x);
      Tensor ds(g.val(s).shape);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) ds.data[static_cast<size_t>(j)] += go.at(i, j) * vx2.at(i, j);
      g.accumulate(s.i, ds);
    }
    if (g.requires_grad(b)) {
      Tensor db(g.val(b).shape);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) db.data[static_cast<size_t>(j)] += go.at(i, j);
      g.accumulate(b.i, db);
    }
  });
}

Var Graph::add_row_broadcast(Var x, Var r) {
  const Tensor &vx = val(x), &vr = val(r);
  check_2d(vx, "add_row_broadcast");
  int n = vx.size(0), m = vx.size(1);
  if (vr.numel() != m) throw ValidationError("add_row_broadcast: length mismatch");
  Tensor out({n, m});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out.at(i, j) = vx.at(i, j) + vr.data[static_cast<size_t>(j)];
  bool rg = requires_grad(x) || requires_grad(r);
  return make(std::move(out), rg, [x, r, n, m](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    g.accumulate(x.i, go);
    if (g.requires_grad(r)) {
      Tensor dr(g.val(r).shape);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) dr.data[static_cast<size_t>(j)] += go.at(i, j);
      g.accumulate(r.i, dr);
    }
  });
}

// ---------------------------------------------------------------------------
// slicing / concatenation

Var Graph::concat_rows(Var a, Var b) {
  const Tensor &va = val(a), &vb = val(b);
  check_2d(va, "concat_rows");
  check_2d(vb, "concat_rows");
  if (va.size(1) != vb.size(1)) throw ValidationError("concat_rows: column mismatch");
  int n1 = va.size(0), n2 = vb.size(0), d = va.size(1);
  Tensor out({n1 + n2, d});
  std::copy(va.data.begin(), va.data.end(), out.data.begin());
  std::copy(vb.data.begin(), vb.data.end(), out.data.begin() + va.numel());
  bool rg = requires_grad(a) || requires_grad(b);
  return make(std::move(out), rg, [a, b, n1, n2, d](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    if (g.requires_grad(a)) {
      Tensor da({n1, d});
      std::copy(go.data.begin(), go.data.begin() + da.numel(), da.data.begin());
      g.accumulate(a.i, da);
    }
    if (g.requires_grad(b)) {
      Tensor db({n2, d});
      std::copy(go.data.begin() + static_cast<int64_t>(n1) * d, go.data.end(), db.data.begin());
      g.accumulate(b.i, db);
    }
  });
}

Var Graph::slice_rows(Var x, int r0, int r1) {
  const Tensor& vx = val(x);
  check_2d(vx, "slice_rows");
  int n = vx.size(0), d = vx.size(1);
  if (r0 < 0 || r1 > n || r0 >= r1) throw ValidationError("slice_rows: bad range");
  Tensor out({r1 - r0, d});
  std::copy(vx.data.begin() + static_cast<int64_t>(r0) * d,
            vx.data.begin() + static_cast<int64_t>(r1) * d, out.data.begin());
  return make(std::move(out), requires_grad(x), [x, r0, r1, n, d](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor dx({n, d});
    std::copy(go.data.begin(), go.data.end(), dx.data.begin() + static_cast<int64_t>(r0) * d);
    g.accumulate(x.i, dx);
  });
}

Var Graph::slice_cols(Var x, int c0, int c1) {
  const Tensor& vx = val(x);
  check_2d(vx, "slice_cols");
  int n = vx.size(0), d = vx.size(1);
  if (c0 < 0 || c1 > d || c0 >= c1) throw ValidationError("slice_cols: bad range");
  int w = c1 - c0;
  Tensor out({n, w});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < w; ++j) out.at(i, j) = vx.at(i, c0 + j);
  return make(std::move(out), requires_grad(x), [x, c0, n, d, w](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor dx({n, d});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < w; ++j) dx.at(i, c0 + j) = go.at(i, j);
    g.accumulate(x.i, dx);
  });
}

Var Graph::add_into_cols(Var a, Var b, int c0) {
  const Tensor &va = val(a), &vb = val(b);
  check_2d(va, "add_into_cols");
  check_2d(vb, "add_into_cols");
  int n = va.size(0), m = va.size(1), w = vb.size(1);
  if (vb.size(0) != n || c0 < 0 || c0 + w > m)
    throw ValidationError("add_into_cols: shape mismatch");
  Tensor out = va;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < w; ++j) out.at(i, c0 + j) += vb.at(i, j);
  bool rg = requires_grad(a) || requires_grad(b);
  return make(std::move(out), rg, [a, b, c0, n, w](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    g.accumulate(a.i, go);
    if (g.requires_grad(b)) {
      Tensor db({n, w});
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j) db.at(i, j) = go.at(i, c0 + j);
      g.accumulate(b.i, db);
    }
  });
}

// ---------------------------------------------------------------------------
// reductions / losses

Var Graph::mean_all(Var x) {
  const Tensor& vx = val(x);
  double s = 0.0;
  for (double v : vx.data) s += v;
  int64_t n = vx.numel();
  Tensor out = Tensor::scalar(s / static_cast<double>(n));
  return make(std::move(out), requires_grad(x), [x, n](Graph& g, int self) {
    double go = g.out_grad(self).data[0] / static_cast<double>(n);
    Tensor dx(g.val(x).shape);
    std::fill(dx.data.begin(), dx.data.end(), go);
    g.accumulate(x.i, dx);
  });
}

Var Graph::mse(Var a, Var b) {
  const Tensor &va = val(a), &vb = val(b);
  check_same_shape(va, vb, "mse");
  int64_t n = va.numel();
  double s = 0.0;
  for (int64_t k = 0; k < n; ++k) {
    double d = va.data[static_cast<size_t>(k)] - vb.data[static_cast<size_t>(k)];
    s += d * d;
  }
  Tensor out = Tensor::scalar(s / static_cast<double>(n));
  bool rg = requires_grad(a) || requires_grad(b);
  return make(std::move(out), rg, [a, b, n](Graph& g, int self) {
    double go = g.out_grad(self).data[0] * 2.0 / static_cast<double>(n);
    const Tensor &va2 = g.val(a), &vb2 = g.val(b);
    if (g.requires_grad(a)) {
      Tensor da(va2.shape);
      for (size_t k = 0; k < da.data.size(); ++k)
        da.data[k] = go * (va2.data[k] - vb2.data[k]);
      g.accumulate(a.i, da);
    }
    if (g.requires_grad(b)) {
      Tensor db(vb2.shape);
      for (size_t k = 0; k < db.data.size(); ++k)
        db.data[k] = go * (vb2.data[k] - va2.data[k]);
      g.accumulate(b.i, db);
    }
  });
}

Var Graph::stack_mean(const std::vector<Var>& xs) {
  if (xs.empty()) throw ValidationError("stack_mean: empty stack");
  Tensor out = val(xs[0]);
  for (size_t b = 1; b < xs.size(); ++b) {
    const Tensor& vb = val(xs[b]);
    check_same_shape(out, vb, "stack_mean");
    for (size_t k = 0; k < out.data.size(); ++k) out.data[k] += vb.data[k];
  }
  double inv = 1.0 / static_cast<double>(xs.size());
  for (double& v : out.data) v *= inv;
  bool rg = false;
  for (Var v : xs) rg = rg || requires_grad(v);
  std::vector<Var> deps = xs;
  return make(std::move(out), rg, [deps, inv](Graph& g, int self) {
    Tensor d = g.out_grad(self);
    for (double& v : d.data) v *= inv;
    for (Var x : deps) g.accumulate(x.i, d);
  });
}

Var Graph::cosine_loss_rows(Var pred, const Tensor& gt, double eps) {
  const Tensor& vp = val(pred);
  check_2d(vp, "cosine_loss_rows");
  if (!vp.same_shape(gt))
    throw ValidationError("cosine_loss_rows: shape mismatch " + vp.shape_str() + " vs " +
                          const_cast<Tensor&>(gt).shape_str());
  int n = vp.size(0), d = vp.size(1);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    double dot = 0.0, np = 0.0, ng = 0.0;
    for (int j = 0; j < d; ++j) {
      dot += vp.at(i, j) * gt.at(i, j);
      np += vp.at(i, j) * vp.at(i, j);
      ng += gt.at(i, j) * gt.at(i, j);
    }
    np = std::max(std::sqrt(np), eps);
    ng = std::max(std::sqrt(ng), eps);
    acc += dot / (np * ng);
  }
  Tensor out = Tensor::scalar(1.0 - acc / n);
  Tensor gt_copy = gt;
  return make(std::move(out), requires_grad(pred),
              [pred, gt_copy, eps, n, d](Graph& g, int self) {
    double go = g.out_grad(self).data[0];
    const Tensor& vp2 = g.val(pred);
    Tensor dp({n, d});
    for (int i = 0; i < n; ++i) {
      double dot = 0.0, np2 = 0.0, ng2 = 0.0;
      for (int j = 0; j < d; ++j) {
        dot += vp2.at(i, j) * gt_copy.at(i, j);
        np2 += vp2.at(i, j) * vp2.at(i, j);
        ng2 += gt_copy.at(i, j) * gt_copy.at(i, j);
      }
      double norm_p = std::sqrt(np2);
      double np = std::max(norm_p, eps);
      double ng = std::max(std::sqrt(ng2), eps);
      // d cos / d p = t/(np*ng) - dot * p / (np^3 * ng) when above floor
      for (int j = 0; j < d; ++j) {
        double term = gt_copy.at(i, j) / (np * ng);
        if (norm_p > eps) term -= dot * vp2.at(i, j) / (np * np * np * ng);
        dp.at(i, j) = -go * term / n;
      }
    }
    g.accumulate(pred.i, dp);
  });
}

// ---------------------------------------------------------------------------
// convolution / image ops

Var Graph::conv2d(Var x, Var w, Var b, int stride, int pad) {
  const Tensor &vx = val(x), &vw = val(w), &vb = val(b);
  check_3d(vx, "conv2d");
  if (vw.ndim() != 4) throw ValidationError("conv2d: weight must be 4-D");
  int ci = vx.size(0), h = vx.size(1), wid = vx.size(2);
  int co = vw.size(0), kh = vw.size(2), kw = vw.size(3);
  if (vw.size(1) != ci) throw ValidationError("conv2d: channel mismatch");
  if (vb.numel() != co) throw ValidationError("conv2d: bias mismatch");
  int ho = (h + 2 * pad - kh) / stride + 1;
  int wo = (wid + 2 * pad - kw) / stride + 1;
  Tensor out({co, ho, wo});
  for (int oc = 0; oc < co; ++oc)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double acc = vb.at(oc);
        for (int ic = 0; ic < ci; ++ic)
          for (int ky = 0; ky < kh; ++ky) {
            int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= wid) continue;
              acc += vx.at(ic, iy, ix) *
                     vw.data[static_cast<size_t>(((oc * ci + ic) * kh + ky) * kw + kx)];
            }
          }
        out.at(oc, oy, ox) = acc;
      }
  bool rg = requires_grad(x) || requires_grad(w) || requires_grad(b);
  return make(std::move(out), rg,
              [x, w, b, stride, pad, ci, h, wid, co, kh, kw, ho, wo](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    const Tensor& vx2 = g.val(x);
    const Tensor& vw2 = g.val(w);
    bool need_x = g.requires_grad(x), need_w = g.requires_grad(w), need_b = g.requires_grad(b);
    Tensor dx = need_x ? Tensor({ci, h, wid}) : Tensor();
    Tensor dw = need_w ? Tensor({co, ci, kh, kw}) : Tensor();
    Tensor db = need_b ? Tensor({co}) : Tensor();
    for (int oc = 0; oc < co; ++oc)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double gv = go.at(oc, oy, ox);
          if (need_b) db.at(oc) += gv;
          for (int ic = 0; ic < ci; ++ic)
            for (int ky = 0; ky < kh; ++ky) {
              int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= wid) continue;
                size_t wi = static_cast<size_t>(((oc * ci + ic) * kh + ky) * kw + kx);
                if (need_x) dx.at(ic, iy, ix) += gv * vw2.data[wi];
                if (need_w) dw.data[wi] += gv * vx2.at(ic, iy, ix);
              }
            }
        }
    if (need_x) g.accumulate(x.i, dx);
    if (need_w) g.accumulate(w.i, dw);
    if (need_b) g.accumulate(b.i, db);
  });
}

Var Graph::global_avgpool(Var x) {
  const Tensor& vx = val(x);
  check_3d(vx, "global_avgpool");
  int c = vx.size(0), h = vx.size(1), w = vx.size(2);
  Tensor out({c});
  double inv = 1.0 / (static_cast<double>(h) * w);
  for (int ic = 0; ic < c; ++ic) {
    double s = 0.0;
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) s += vx.at(ic, y, xx);
    out.at(ic) = s * inv;
  }
  return make(std::move(out), requires_grad(x), [x, c, h, w, inv](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor dx({c, h, w});
    for (int ic = 0; ic < c; ++ic) {
      double gv = go.at(ic) * inv;
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) dx.at(ic, y, xx) = gv;
    }
    g.accumulate(x.i, dx);
  });
}

Var Graph::global_maxpool(Var x) {
  const Tensor& vx = val(x);
  check_3d(vx, "global_maxpool");
  int c = vx.size(0), h = vx.size(1), w = vx.size(2);
  Tensor out({c});
  std::vector<int> amax(static_cast<size_t>(c));
  for (int ic = 0; ic < c; ++ic) {
    double best = -std::numeric_limits<double>::infinity();
    int bi = 0;
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        double v = vx.at(ic, y, xx);
        if (v > best) {
          best = v;
          bi = y * w + xx;
        }
      }
    out.at(ic) = best;
    amax[static_cast<size_t>(ic)] = bi;
  }
  return make(std::move(out), requires_grad(x), [x, c, h, w, amax](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor dx({c, h, w});
    for (int ic = 0; ic < c; ++ic)
      dx.data[static_cast<size_t>(ic) * h * w + static_cast<size_t>(amax[static_cast<size_t>(ic)])] = go.at(ic);
    g.accumulate(x.i, dx);
  });
}

Var Graph::chan_gate(Var x, Var gate) {
  const Tensor &vx = val(x), &vg = val(gate);
  check_3d(vx, "chan_gate");
  int c = vx.size(0), h = vx.size(1), w = vx.size(2);
  if (vg.numel() != c) throw ValidationError("chan_gate: gate length mismatch");
  Tensor out({c, h, w});
  for (int ic = 0; ic < c; ++ic) {
    double gv = vg.data[static_cast<size_t>(ic)];
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) out.at(ic, y, xx) = vx.at(ic, y, xx) * gv;
  }
  bool rg = requires_grad(x) || requires_grad(gate);
  return make(std::move(out), rg, [x, gate, c, h, w](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    const Tensor &vx2 = g.val(x), &vg2 = g.val(gate);
    if (g.requires_grad(x)) {
      Tensor dx({c, h, w});
      for (int ic = 0; ic < c; ++ic) {
        double gv = vg2.data[static_cast<size_t>(ic)];
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) dx.at(ic, y, xx) = go.at(ic, y, xx) * gv;
      }
      g.accumulate(x.i, dx);
    }
    if (g.requires_grad(gate)) {
      Tensor dg(vg2.shape);
      for (int ic = 0; ic < c; ++ic) {
        double s = 0.0;
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) s += go.at(ic, y, xx) * vx2.at(ic, y, xx);
        dg.data[static_cast<size_t>(ic)] = s;
      }
      g.accumulate(gate.i, dg);
    }
  });
}

Var Graph::spatial_gate(Var x, Var gate) {
  const Tensor &vx = val(x), &vg = val(gate);
  check_3d(vx, "spatial_gate");
  int c = vx.size(0), h = vx.size(1), w = vx.size(2);
  if (vg.numel() != static_cast<int64_t>(h) * w)
    throw ValidationError("spatial_gate: gate size mismatch");
  Tensor out({c, h, w});
  for (int ic = 0; ic < c; ++ic)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        out.at(ic, y, xx) = vx.at(ic, y, xx) * vg.data[static_cast<size_t>(y) * w + xx];
  bool rg = requires_grad(x) || requires_grad(gate);
  return make(std::move(out), rg, [x, gate, c, h, w](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    const Tensor &vx2 = g.val(x), &vg2 = g.val(gate);
    if (g.requires_grad(x)) {
      Tensor dx({c, h, w});
      for (int ic = 0; ic < c; ++ic)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx)
            dx.at(ic, y, xx) = go.at(ic, y, xx) * vg2.data[static_cast<size_t>(y) * w + xx];
      g.accumulate(x.i, dx);
    }
    if (g.requires_grad(gate)) {
      Tensor dg(vg2.shape);
      for (int ic = 0; ic < c; ++ic)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx)
            dg.data[static_cast<size_t>(y) * w + xx] += go.at(ic, y, xx) * vx2.at(ic, y, xx);
      g.accumulate(gate.i, dg);
    }
  });
}

Var Graph::chan_mean_max(Var x) {
  const Tensor& vx = val(x);
  check_3d(vx, "chan_mean_max");
  int c = vx.size(0), h = vx.size(1), w = vx.size(2);
  Tensor out({2, h, w});
  std::vector<int> amax(static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx) {
      double s = 0.0, best = -std::numeric_limits<double>::infinity();
      int bc = 0;
      for (int ic = 0; ic < c; ++ic) {
        double v = vx.at(ic, y, xx);
        s += v;
        if (v > best) {
          best = v;
          bc = ic;
        }
      }
      out.at(0, y, xx) = s / c;
      out.at(1, y, xx) = best;
      amax[static_cast<size_t>(y) * w + xx] = bc;
    }
  return make(std::move(out), requires_grad(x), [x, c, h, w, amax](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor dx({c, h, w});
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        double gm = go.at(0, y, xx) / c;
        for (int ic = 0; ic < c; ++ic) dx.at(ic, y, xx) += gm;
        dx.at(amax[static_cast<size_t>(y) * w + xx], y, xx) += go.at(1, y, xx);
      }
    g.accumulate(x.i, dx);
  });
}

Var Graph::bilinear_half(Var x) {
  const Tensor& vx = val(x);
  check_3d(vx, "bilinear_half");
  int c = vx.size(0), h = vx.size(1), w = vx.size(2);
  if (h % 2 || w % 2) throw ValidationError("bilinear_half: odd spatial size");
  int ho = h / 2, wo = w / 2;
  Tensor out({c, ho, wo});
  // exact bilinear at scale 1/2 (pixel-center sampling) is the 2x2 mean
  for (int ic = 0; ic < c; ++ic)
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx)
        out.at(ic, y, xx) = 0.25 * (vx.at(ic, 2 * y, 2 * xx) + vx.at(ic, 2 * y, 2 * xx + 1) +
                                    vx.at(ic, 2 * y + 1, 2 * xx) + vx.at(ic, 2 * y + 1, 2 * xx + 1));
  return make(std::move(out), requires_grad(x), [x, c, h, w, ho, wo](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor dx({c, h, w});
    for (int ic = 0; ic < c; ++ic)
      for (int y = 0; y < ho; ++y)
        for (int xx = 0; xx < wo; ++xx) {
          double gv = 0.25 * go.at(ic, y, xx);
          dx.at(ic, 2 * y, 2 * xx) += gv;
          dx.at(ic, 2 * y, 2 * xx + 1) += gv;
          dx.at(ic, 2 * y + 1, 2 * xx) += gv;
          dx.at(ic, 2 * y + 1, 2 * xx + 1) += gv;
        }
    g.accumulate(x.i, dx);
  });
}

Var Graph::image_to_tokens(Var x, int p) {
  const Tensor& vx = val(x);
  check_3d(vx, "image_to_tokens");
  int c = vx.size(0), h = vx.size(1), w = vx.size(2);
  if (h % p || w % p) throw ValidationError("image_to_tokens: size not divisible by patch");
  int gh = h / p, gw = w / p, l = gh * gw, f = c * p * p;
  Tensor out({l, f});
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      int t = gy * gw + gx;
      for (int ic = 0; ic < c; ++ic)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px)
            out.at(t, (ic * p + py) * p + px) = vx.at(ic, gy * p + py, gx * p + px);
    }
  return make(std::move(out), requires_grad(x), [x, p, c, h, w, gh, gw](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor dx({c, h, w});
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        int t = gy * gw + gx;
        for (int ic = 0; ic < c; ++ic)
          for (int py = 0; py < p; ++py)
            for (int px = 0; px < p; ++px)
              dx.at(ic, gy * p + py, gx * p + px) = go.at(t, (ic * p + py) * p + px);
      }
    g.accumulate(x.i, dx);
  });
}

Var Graph::tokens_to_image(Var x, int p, int c, int h, int w) {
  const Tensor& vx = val(x);
  check_2d(vx, "tokens_to_image");
  int gh = h / p, gw = w / p;
  if (vx.size(0) != gh * gw || vx.size(1) != c * p * p)
    throw ValidationError("tokens_to_image: shape mismatch");
  Tensor out({c, h, w});
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      int t = gy * gw + gx;
      for (int ic = 0; ic < c; ++ic)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px)
            out.at(ic, gy * p + py, gx * p + px) = vx.at(t, (ic * p + py) * p + px);
    }
  return make(std::move(out), requires_grad(x), [x, p, c, h, w, gh, gw](Graph& g, int self) {
    const Tensor& go = g.out_grad(self);
    Tensor dx({gh * gw, c * p * p});
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        int t = gy * gw + gx;
        for (int ic = 0; ic < c; ++ic)
          for (int py = 0; py < p; ++py)
            for (int px = 0; px < p; ++px)
              dx.at(t, (ic * p + py) * p + px) = go.at(ic, gy * p + py, gx * p + px);
      }
    g.accumulate(x.i, dx);
  });
}

}  // namespace recap
