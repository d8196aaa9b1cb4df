#pragma once

#include <functional>
#include <vector>

#include "recap/tensor.hpp"

namespace recap {

// Lightweight tape-based reverse-mode autodiff. A Graph is rebuilt per
// forward pass; nodes are appended in topological order, so backward is a
// reverse index sweep. Matrix products go through Eigen, everything else is
// straight loops (shapes are desk-scale).
struct Var {
  int i = -1;
  bool valid() const { return i >= 0; }
};

class Graph {
 public:
  Var input(Tensor v, bool requires_grad = false);

  const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v.i)].val; }
  const Tensor& grad(Var v) const;
  bool has_grad(Var v) const { return !nodes_[static_cast<size_t>(v.i)].grad.data.empty(); }
  bool requires_grad(Var v) const { return nodes_[static_cast<size_t>(v.i)].requires_grad; }

  // ---- elementwise / arithmetic ----
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var silu(Var a);
  Var sigmoid(Var a);

  // ---- linear algebra ----
  Var matmul(Var a, Var b);     // (n,k) x (k,m) -> (n,m)
  Var matmul_nt(Var a, Var b);  // (n,k) x (m,k)^T -> (n,m)
  Var linear(Var x, Var w, Var b);  // (n,din) x (din,dout) + b
  Var transpose(Var a);             // (n,m) -> (m,n)
  Var reshape(Var a, std::vector<int> shape);

  // ---- normalization / attention helpers ----
  Var layernorm_rows(Var x, double eps = 1e-6);
  Var softmax_rows(Var x);
  // y = x * (1 + s) + b, with s and b (length d) broadcast over rows
  Var row_mod(Var x, Var s, Var b);
  // y = x + r broadcast over rows (r is 1 x m); used for additive key masks
  Var add_row_broadcast(Var x, Var r);

  // ---- slicing / concatenation ----
  Var concat_rows(Var a, Var b);
  Var slice_rows(Var x, int r0, int r1);
  Var slice_cols(Var x, int c0, int c1);
  // y = a with b added into columns [c0, c0+b.cols)
  Var add_into_cols(Var a, Var b, int c0);

  // ---- reductions / losses ----
  Var mean_all(Var x);
  Var mse(Var a, Var b);
  Var stack_mean(const std::vector<Var>& xs);
  // 1 - (1/P) sum_u cos(pred_u, gt_u); gt is a constant. Norms are floored
  // at eps so the loss stays defined at degenerate inputs.
  Var cosine_loss_rows(Var pred, const Tensor& gt, double eps);

  // ---- convolution / image ops, all channels-first (C,H,W) ----
  Var conv2d(Var x, Var w, Var b, int stride, int pad);
  Var global_avgpool(Var x);  // (C,H,W) -> (C)
  Var global_maxpool(Var x);  // (C,H,W) -> (C)
  Var chan_gate(Var x, Var gate);     // gate: (C)
  Var spatial_gate(Var x, Var gate);  // gate: (1,H,W)
  Var chan_mean_max(Var x);           // (C,H,W) -> (2,H,W)
  Var bilinear_half(Var x);           // (C,H,W) -> (C,H/2,W/2)
  // patchify: (C,H,W) -> (L, C*p*p) with L=(H/p)*(W/p), row-major patches
  Var image_to_tokens(Var x, int p);
  Var tokens_to_image(Var x, int p, int c, int h, int w);

  void backward(Var loss);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor val;
    Tensor grad;  // allocated on demand
    bool requires_grad = false;
    std::function<void(Graph&, int self)> back;
  };

  std::vector<Node> nodes_;

  Node& node(Var v) { return nodes_[static_cast<size_t>(v.i)]; }
  const Tensor& out_grad(int self) const { return nodes_[static_cast<size_t>(self)].grad; }
  Tensor& grad_buf(int i);
  void accumulate(int i, const Tensor& delta);
  Var make(Tensor val, bool rg, std::function<void(Graph&, int)> back);
};

}  // namespace recap
