#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "recap/graph.hpp"
#include "recap/rng.hpp"

using namespace recap;

namespace {

// Central finite differences against the tape for every differentiable input.
using LossFn = std::function<Var(Graph&, const std::vector<Var>&)>;

void check_grads(const std::vector<Tensor>& inputs, const LossFn& fn,
                 double h = 1e-6, double tol = 1e-6) {
  Graph g;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(g.input(t, true));
  Var loss = fn(g, vars);
  g.backward(loss);

  for (size_t vi = 0; vi < inputs.size(); ++vi) {
    const Tensor& analytic = g.grad(vars[vi]);
    for (int64_t k = 0; k < inputs[vi].numel(); ++k) {
      auto eval = [&](double delta) {
        std::vector<Tensor> shifted = inputs;
        shifted[vi].data[static_cast<size_t>(k)] += delta;
        Graph g2;
        std::vector<Var> vs;
        for (const Tensor& t : shifted) vs.push_back(g2.input(t, true));
        return g2.val(fn(g2, vs)).data[0];
      };
      double num = (eval(h) - eval(-h)) / (2.0 * h);
      double ana = analytic.data[static_cast<size_t>(k)];
      double denom = std::max({std::abs(num), std::abs(ana), 1e-8});
      CHECK(std::abs(num - ana) / denom < tol);
    }
  }
}

Tensor rnd(std::vector<int> shape, uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return Tensor::randn(std::move(shape), rng, scale);
}

}  // namespace

TEST_CASE("elementwise ops gradients") {
  check_grads({rnd({3, 4}, 1), rnd({3, 4}, 2)}, [](Graph& g, const std::vector<Var>& v) {
    return g.mean_all(g.mul(g.add(v[0], v[1]), g.sub(v[0], v[1])));
  });
  check_grads({rnd({2, 5}, 3)}, [](Graph& g, const std::vector<Var>& v) {
    return g.mean_all(g.silu(g.scale(v[0], 1.7)));
  });
  check_grads({rnd({2, 5}, 4)}, [](Graph& g, const std::vector<Var>& v) {
    return g.mean_all(g.sigmoid(v[0]));
  });
}

TEST_CASE("matmul family gradients") {
  check_grads({rnd({3, 4}, 5), rnd({4, 2}, 6)}, [](Graph& g, const std::vector<Var>& v) {
    return g.mean_all(g.matmul(v[0], v[1]));
  });
  check_grads({rnd({3, 4}, 7), rnd({5, 4}, 8)}, [](Graph& g, const std::vector<Var>& v) {
    return g.mean_all(g.matmul_nt(v[0], v[1]));
  });
  check_grads({rnd({3, 4}, 9), rnd({4, 6}, 10), rnd({6}, 11)},
              [](Graph& g, const std::vector<Var>& v) {
    return g.mean_all(g.silu(g.linear(v[0], v[1], v[2])));
  });
  check_grads({rnd({3, 4}, 12)}, [](Graph& g, const std::vector<Var>& v) {
    return g.mean_all(g.mul(g.transpose(v[0]), g.transpose(v[0])));
  });
}

TEST_CASE("layernorm and softmax gradients") {
  Tensor target = rnd({4, 6}, 99);
  check_grads({rnd({4, 6}, 13)}, [target](Graph& g, const std::vector<Var>& v) {
    Var y = g.layernorm_rows(v[0]);
    return g.mse(y, g.input(target));
  }, 1e-6, 5e-6);
  check_grads({rnd({3, 5}, 14)}, [](Graph& g, const std::vector<Var>& v) {
    Var p = g.softmax_rows(v[0]);
    return g.mse(p, g.scale(v[0], 0.0));
  });
}

TEST_CASE("softmax with -inf masked columns gives zero weight") {
  Graph g;
  Tensor x({2, 4});
  Rng rng(77);
  for (double& v : x.data) v = rng.gaussian();
  Tensor mask({4});
  mask.at(0) = 0.0;
  mask.at(1) = 0.0;
  mask.at(2) = -std::numeric_limits<double>::infinity();
  mask.at(3) = -std::numeric_limits<double>::infinity();
  Var p = g.softmax_rows(g.add_row_broadcast(g.input(x, true), g.input(mask)));
  for (int i = 0; i < 2; ++i) {
    CHECK(g.val(p).at(i, 2) == 0.0);
    CHECK(g.val(p).at(i, 3) == 0.0);
    CHECK(g.val(p).at(i, 0) + g.val(p).at(i, 1) == doctest::Approx(1.0));
  }
  g.backward(g.mean_all(p));
}

TEST_CASE("modulation / broadcast / slicing gradients") {
  check_grads({rnd({3, 4}, 15), rnd({4}, 16, 0.1), rnd({4}, 17)},
              [](Graph& g, const std::vector<Var>& v) {
    return g.mean_all(g.silu(g.row_mod(v[0], v[1], v[2])));
  });
  check_grads({rnd({3, 4}, 18), rnd({4}, 19)}, [](Graph& g, const std::vector<Var>& v) {
    return g.mean_all(g.mul(g.add_row_broadcast(v[0], v[1]), v[0]));
  });
  check_grads({rnd({3, 4}, 20), rnd({2, 4}, 21)}, [](Graph& g, const std::vector<Var>& v) {
    Var c = g.concat_rows(v[0], v[1]);
    Var s = g.slice_rows(c, 1, 4);
    return g.mean_all(g.mul(s, s));
  });
  check_grads({rnd({3, 6}, 22)}, [](Graph& g, const std::vector<Var>& v) {
    Var s = g.slice_cols(v[0], 2, 5);
    return g.mean_all(g.mul(s, s));
  });
  check_grads({rnd({3, 6}, 23), rnd({3, 2}, 24)}, [](Graph& g, const std::vector<Var>& v) {
    Var y = g.add_into_cols(v[0], v[1], 1);
    return g.mean_all(g.mul(y, y));
  });
  check_grads({rnd({2, 3}, 25), rnd({2, 3}, 26), rnd({2, 3}, 27)},
              [](Graph& g, const std::vector<Var>& v) {
    return g.mean_all(g.mul(g.stack_mean({v[0], v[1], v[2]}), v[0]));
  });
  check_grads({rnd({2, 6}, 28)}, [](Graph& g, const std::vector<Var>& v) {
    Var r = g.reshape(v[0], {3, 4});
    return g.mean_all(g.mul(r, r));
  });
}

TEST_CASE("mse gradient flows to both sides") {
  check_grads({rnd({3, 3}, 29), rnd({3, 3}, 30)}, [](Graph& g, const std::vector<Var>& v) {
    return g.mse(v[0], v[1]);
  });
}

TEST_CASE("cosine loss rows: value and gradient") {
  Tensor gt = rnd({3, 4}, 31);
  check_grads({rnd({3, 4}, 32)}, [gt](Graph& g, const std::vector<Var>& v) {
    return g.cosine_loss_rows(v[0], gt, 1e-8);
  });

  // identical rows -> zero loss
  Graph g;
  Var p = g.input(gt, true);
  CHECK(g.val(g.cosine_loss_rows(p, gt, 1e-8)).data[0] == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("conv2d gradients (stride 1 pad 1 and stride 2)") {
  check_grads({rnd({2, 4, 4}, 33), rnd({3, 2, 3, 3}, 34), rnd({3}, 35)},
              [](Graph& g, const std::vector<Var>& v) {
    return g.mean_all(g.silu(g.conv2d(v[0], v[1], v[2], 1, 1)));
  }, 1e-6, 5e-6);
  check_grads({rnd({2, 6, 6}, 36), rnd({2, 2, 3, 3}, 37), rnd({2}, 38)},
              [](Graph& g, const std::vector<Var>& v) {
    Var y = g.conv2d(v[0], v[1], v[2], 2, 1);
    return g.mean_all(g.mul(y, y));
  }, 1e-6, 5e-6);
  check_grads({rnd({3, 4, 4}, 39), rnd({5, 3, 1, 1}, 40), rnd({5}, 41)},
              [](Graph& g, const std::vector<Var>& v) {
    return g.mean_all(g.conv2d(v[0], v[1], v[2], 1, 0));
  });
}

TEST_CASE("pool / gate / image ops gradients") {
  check_grads({rnd({3, 4, 4}, 42)}, [](Graph& g, const std::vector<Var>& v) {
    Var a = g.global_avgpool(v[0]);
    return g.mean_all(g.mul(a, a));
  });
  check_grads({rnd({3, 4, 4}, 43)}, [](Graph& g, const std::vector<Var>& v) {
    Var a = g.global_maxpool(v[0]);
    return g.mean_all(g.mul(a, a));
  });
  check_grads({rnd({3, 4, 4}, 44), rnd({3}, 45)}, [](Graph& g, const std::vector<Var>& v) {
    return g.mean_all(g.chan_gate(v[0], g.sigmoid(v[1])));
  });
  check_grads({rnd({3, 4, 4}, 46), rnd({1, 4, 4}, 47)},
              [](Graph& g, const std::vector<Var>& v) {
    return g.mean_all(g.spatial_gate(v[0], g.sigmoid(v[1])));
  });
  check_grads({rnd({3, 4, 4}, 48)}, [](Graph& g, const std::vector<Var>& v) {
    Var y = g.chan_mean_max(v[0]);
    return g.mean_all(g.mul(y, y));
  });
  check_grads({rnd({2, 4, 4}, 49)}, [](Graph& g, const std::vector<Var>& v) {
    Var y = g.bilinear_half(v[0]);
    return g.mean_all(g.mul(y, y));
  });
}

TEST_CASE("patchify round trip and gradients") {
  Tensor x = rnd({3, 4, 4}, 50);
  Graph g;
  Var v = g.input(x, true);
  Var tok = g.image_to_tokens(v, 2);
  CHECK(g.val(tok).shape == std::vector<int>{4, 12});
  Var back = g.tokens_to_image(tok, 2, 3, 4, 4);
  for (size_t k = 0; k < x.data.size(); ++k) CHECK(g.val(back).data[k] == x.data[k]);

  check_grads({x}, [](Graph& g2, const std::vector<Var>& vv) {
    Var t = g2.image_to_tokens(vv[0], 2);
    return g2.mean_all(g2.mul(t, t));
  });
  check_grads({rnd({4, 12}, 51)}, [](Graph& g2, const std::vector<Var>& vv) {
    Var im = g2.tokens_to_image(vv[0], 2, 3, 4, 4);
    return g2.mean_all(g2.mul(im, im));
  });
}

TEST_CASE("bilinear_half equals 2x2 mean") {
  Graph g;
  Tensor x({1, 2, 2});
  x.at(0, 0, 0) = 1.0;
  x.at(0, 0, 1) = 2.0;
  x.at(0, 1, 0) = 3.0;
  x.at(0, 1, 1) = 4.0;
  Var y = g.bilinear_half(g.input(x));
  CHECK(g.val(y).at(0, 0, 0) == doctest::Approx(2.5));
}

TEST_CASE("determinism: same graph twice gives identical bits") {
  auto run = [] {
    Graph g;
    Var a = g.input(rnd({5, 5}, 60), true);
    Var b = g.input(rnd({5, 5}, 61), true);
    Var l = g.mse(g.softmax_rows(g.matmul(a, b)), g.sigmoid(a));
    g.backward(l);
    std::vector<double> out = g.val(l).data;
    const Tensor& ga = g.grad(a);
    out.insert(out.end(), ga.data.begin(), ga.data.end());
    return out;
  };
  CHECK(run() == run());
}
