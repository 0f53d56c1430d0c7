// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
//
// Tensor/RNG basics and finite-difference gradient checks for every
// differentiable op. Numeric gradients use central differences; the oracle
// is the independent (f(x+h)-f(x-h))/2h estimate, never the engine itself.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "gmldm/autodiff.hpp"
#include "gmldm/errors.hpp"
#include "gmldm/rng.hpp"
#include "gmldm/tensor.hpp"

using namespace gmldm;
using namespace gmldm::ag;

namespace {

// Central-difference gradient check on every coordinate of every parameter.
// make_loss must rebuild the graph from the live parameter tensors each call.
void gradcheck(const std::vector<Var>& params,
               const std::function<Var()>& make_loss, float h = 1e-3f,
               float rtol = 1e-2f, float atol = 2e-3f) {
  for (auto& p : params) p->grad = Tensor();
  Var loss = make_loss();
  REQUIRE(loss->numel() == 1);
  backward(loss);
  std::vector<Tensor> analytic;
  for (auto& p : params) {
    REQUIRE(p->grad.defined());
    analytic.push_back(p->grad.clone());
  }
  NoGradGuard ng;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& v = params[pi]->value;
    for (int64_t i = 0; i < v.numel(); ++i) {
      float orig = v[i];
      v[i] = orig + h;
      double fp = make_loss()->value[0];
      v[i] = orig - h;
      double fm = make_loss()->value[0];
      v[i] = orig;
      double numeric = (fp - fm) / (2.0 * h);
      double a = analytic[pi][i];
      double tol = atol + rtol * std::max(std::abs(a), std::abs(numeric));
      INFO("param ", pi, " coord ", i, " analytic ", a, " numeric ", numeric);
      CHECK(std::abs(a - numeric) <= tol);
    }
  }
}

Var randn_param(RngStream& rng, Shape shape, float scale = 1.0f) {
  Tensor t(std::move(shape));
  rng.fill_normal(std::span<float>(t.data(), static_cast<size_t>(t.numel())));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] *= scale;
  return parameter(std::move(t));
}

}  // namespace

TEST_CASE("tensor shape validation and storage sharing") {
  Tensor t = Tensor::zeros({2, 3});
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(Tensor({2, -1}), ValidationError);
  CHECK_THROWS_AS(t.reshaped({4, 2}), ValidationError);

  Tensor r = t.reshaped({3, 2});
  r[0] = 5.0f;
  CHECK(t[0] == 5.0f);  // reshape shares storage
  Tensor c = t.clone();
  c[0] = 7.0f;
  CHECK(t[0] == 5.0f);  // clone does not

  Tensor f = Tensor::from({3}, {1.0f, 2.0f, std::nanf("")});
  CHECK_FALSE(f.all_finite());
  CHECK(Tensor::from({2}, {1.0f, 2.0f}).all_finite());
}

TEST_CASE("rng streams are deterministic and independent") {
  RngStream a(derive_seed(42, "weights", 0));
  RngStream b(derive_seed(42, "weights", 0));
  RngStream c(derive_seed(42, "noise", 0));
  for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
  // distinct substreams must not collide
  RngStream a2(derive_seed(42, "weights", 0));
  bool any_diff = false;
  for (int i = 0; i < 10; ++i) any_diff |= (a2.uniform() != c.uniform());
  CHECK(any_diff);
  // uniform_int respects bounds
  RngStream d(derive_seed(7, "idx", 0));
  for (int i = 0; i < 1000; ++i) {
    int64_t v = d.uniform_int(3, 9);
    CHECK(v >= 3);
    CHECK(v <= 9);
  }
}

TEST_CASE("rng normal moments") {
  RngStream r(derive_seed(9, "normal", 0));
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    double v = r.normal();
    s += v;
    s2 += v * v;
  }
  double mean = s / n;
  double var = s2 / n - mean * mean;
  CHECK(std::abs(mean) < 0.01);       // SE ~ 0.0022
  CHECK(std::abs(var - 1.0) < 0.02);  // SE ~ 0.0032
}

TEST_CASE("rng state round-trips through serialization") {
  RngStream r(derive_seed(3, "resume", 1));
  for (int i = 0; i < 17; ++i) r.normal();
  std::string st = r.state();
  std::vector<double> expect;
  for (int i = 0; i < 20; ++i) expect.push_back(r.normal());
  RngStream q(0);
  q.set_state(st);
  for (int i = 0; i < 20; ++i) CHECK(q.normal() == expect[static_cast<size_t>(i)]);
}

TEST_CASE("gradcheck: elementwise ops") {
  RngStream rng(derive_seed(1, "gc-elem", 0));
  Var a = randn_param(rng, {2, 5});
  Var b = randn_param(rng, {2, 5});
  gradcheck({a, b}, [&] { return sum_all(mul(add(a, b), sub(a, b))); });
  gradcheck({a}, [&] { return mean_all(silu(a)); });
  gradcheck({a}, [&] { return mean_all(gelu(a)); });
  gradcheck({a}, [&] { return sum_all(exp(mul_scalar(a, 0.5f))); });
  gradcheck({a}, [&] { return sum_all(square(add_scalar(a, 0.3f))); });
  gradcheck({a, b}, [&] { return mse(a, b); });

  Var s = parameter(Tensor::from({1}, {0.7f}));
  gradcheck({a, s}, [&] { return sum_all(square(scale(a, s))); });
  CHECK_THROWS_AS(scale(a, b), ValidationError);
}

TEST_CASE("gradcheck: matmul, bmm, linear") {
  RngStream rng(derive_seed(1, "gc-mm", 0));
  Var a = randn_param(rng, {3, 4});
  Var b = randn_param(rng, {4, 5});
  gradcheck({a, b}, [&] { return mean_all(matmul(a, b)); });

  Var ba = randn_param(rng, {2, 3, 4});
  Var bb = randn_param(rng, {2, 4, 5});
  Var bt = randn_param(rng, {2, 5, 4});
  gradcheck({ba, bb}, [&] { return mean_all(square(bmm(ba, bb))); });
  gradcheck({ba, bt}, [&] { return mean_all(square(bmm(ba, bt, true))); });

  Var x = randn_param(rng, {2, 3, 4});
  Var w = randn_param(rng, {4, 6});
  Var bias = randn_param(rng, {6});
  gradcheck({x, w, bias}, [&] { return mean_all(square(linear(x, w, bias))); });
  CHECK_THROWS_AS(linear(x, randn_param(rng, {5, 6})), ValidationError);
}

TEST_CASE("gradcheck: softmax and norms") {
  RngStream rng(derive_seed(1, "gc-norm", 0));
  Var a = randn_param(rng, {3, 7});
  Var probe = randn_param(rng, {3, 7});
  gradcheck({a}, [&] { return sum_all(mul(softmax_lastdim(a), probe)); });

  Var x = randn_param(rng, {2, 4, 6});
  Var g = randn_param(rng, {6}, 0.5f);
  Var beta = randn_param(rng, {6}, 0.5f);
  Var probe2 = randn_param(rng, {2, 4, 6});
  gradcheck({x, g, beta},
            [&] { return sum_all(mul(layer_norm(x, g, beta), probe2)); });

  Var xv = randn_param(rng, {2, 6, 3, 2, 2});
  Var gg = randn_param(rng, {6}, 0.5f);
  Var gb = randn_param(rng, {6}, 0.5f);
  Var probe3 = randn_param(rng, {2, 6, 3, 2, 2});
  gradcheck({xv, gg, gb},
            [&] { return sum_all(mul(group_norm(xv, 3, gg, gb), probe3)); });
}

TEST_CASE("gradcheck: conv3d and conv2d") {
  RngStream rng(derive_seed(1, "gc-conv", 0));
  Var x = randn_param(rng, {2, 3, 4, 4, 4});
  Var w = randn_param(rng, {4, 3, 3, 3, 3}, 0.3f);
  Var b = randn_param(rng, {4}, 0.3f);
  gradcheck({x, w, b},
            [&] { return mean_all(square(conv3d(x, w, b, 1, 1))); });
  // strided, no padding
  gradcheck({x, w, b},
            [&] { return mean_all(square(conv3d(x, w, b, 2, 1))); });

  Var x2 = randn_param(rng, {2, 3, 6, 6});
  Var w2 = randn_param(rng, {4, 3, 3, 3}, 0.3f);
  Var b2 = randn_param(rng, {4}, 0.3f);
  gradcheck({x2, w2, b2},
            [&] { return mean_all(square(conv2d(x2, w2, b2, 2, 1))); });
}

TEST_CASE("conv3d forward matches direct convolution") {
  // Independent naive oracle over a small random case.
  RngStream rng(derive_seed(2, "conv-oracle", 0));
  int64_t N = 1, Ci = 2, Co = 3, D = 5, H = 4, W = 4;
  int64_t k = 3, stride = 2, pad = 1;
  Var x = randn_param(rng, {N, Ci, D, H, W});
  Var w = randn_param(rng, {Co, Ci, k, k, k});
  Var b = randn_param(rng, {Co});
  NoGradGuard ng;
  Var y = conv3d(x, w, b, static_cast<int>(stride), static_cast<int>(pad));
  int64_t OD = (D + 2 * pad - k) / stride + 1;
  int64_t OH = (H + 2 * pad - k) / stride + 1;
  int64_t OW = (W + 2 * pad - k) / stride + 1;
  REQUIRE(y->shape() == Shape{N, Co, OD, OH, OW});
  for (int64_t co = 0; co < Co; ++co)
    for (int64_t od = 0; od < OD; ++od)
      for (int64_t oh = 0; oh < OH; ++oh)
        for (int64_t ow = 0; ow < OW; ++ow) {
          double acc = b->value[co];
          for (int64_t ci = 0; ci < Ci; ++ci)
            for (int64_t kz = 0; kz < k; ++kz)
              for (int64_t ky = 0; ky < k; ++ky)
                for (int64_t kx = 0; kx < k; ++kx) {
                  int64_t z = od * stride - pad + kz;
                  int64_t yy = oh * stride - pad + ky;
                  int64_t xx = ow * stride - pad + kx;
                  if (z < 0 || z >= D || yy < 0 || yy >= H || xx < 0 ||
                      xx >= W)
                    continue;
                  acc += static_cast<double>(
                             x->value[((ci * D + z) * H + yy) * W + xx]) *
                         w->value[(((co * Ci + ci) * k + kz) * k + ky) * k +
                                  kx];
                }
          float got = y->value[((co * OD + od) * OH + oh) * OW + ow];
          CHECK(got == doctest::Approx(acc).epsilon(1e-4));
        }
}

TEST_CASE("gradcheck: resize3d and shift3d") {
  RngStream rng(derive_seed(1, "gc-resize", 0));
  Var x = randn_param(rng, {1, 2, 3, 4, 5});
  Var probe_up = randn_param(rng, {1, 2, 6, 8, 10});
  gradcheck({x},
            [&] { return sum_all(mul(resize3d(x, 6, 8, 10), probe_up)); });
  Var probe_dn = randn_param(rng, {1, 2, 2, 2, 3});
  gradcheck({x}, [&] { return sum_all(mul(resize3d(x, 2, 2, 3), probe_dn)); });
  Var probe_same = randn_param(rng, {1, 2, 3, 4, 5});
  for (int axis = 0; axis < 3; ++axis)
    for (int off : {-1, 1})
      gradcheck({x}, [&] {
        return sum_all(mul(shift3d(x, axis, off), probe_same));
      });
}

TEST_CASE("resize3d identity when target equals source") {
  RngStream rng(derive_seed(2, "resize-id", 0));
  Var x = randn_param(rng, {1, 1, 4, 5, 6});
  NoGradGuard ng;
  Var y = resize3d(x, 4, 5, 6);
  for (int64_t i = 0; i < x->numel(); ++i)
    CHECK(y->value[i] == doctest::Approx(x->value[i]).epsilon(1e-6));
}

TEST_CASE("patchify3d round-trips and is differentiable") {
  RngStream rng(derive_seed(1, "gc-patch", 0));
  Var x = randn_param(rng, {2, 3, 4, 4, 4});
  {
    NoGradGuard ng;
    Var tok = patchify3d(x, 2);
    REQUIRE(tok->shape() == Shape{2, 8, 24});
    Var back = unpatchify3d(tok, 3, 4, 4, 4, 2);
    for (int64_t i = 0; i < x->numel(); ++i)
      CHECK(back->value[i] == x->value[i]);
  }
  Var probe = randn_param(rng, {2, 8, 24});
  gradcheck({x}, [&] { return sum_all(mul(patchify3d(x, 2), probe)); });
  Var tok = randn_param(rng, {2, 8, 24});
  Var probe2 = randn_param(rng, {2, 3, 4, 4, 4});
  gradcheck({tok}, [&] {
    return sum_all(mul(unpatchify3d(tok, 3, 4, 4, 4, 2), probe2));
  });
  CHECK_THROWS_AS(patchify3d(x, 3), ValidationError);
}

TEST_CASE("gradcheck: shape and broadcast ops") {
  RngStream rng(derive_seed(1, "gc-shape", 0));
  Var a = randn_param(rng, {2, 3, 4});
  Var probe = randn_param(rng, {4, 3, 2});
  gradcheck({a}, [&] { return sum_all(mul(permute(a, {2, 1, 0}), probe)); });
  Var b = randn_param(rng, {2, 5, 4});
  Var probe2 = randn_param(rng, {2, 8, 4});
  gradcheck({a, b},
            [&] { return sum_all(mul(concat(a, b, 1), probe2)); });
  Var probe3 = randn_param(rng, {24});
  gradcheck({a}, [&] { return sum_all(mul(reshape(a, {24}), probe3)); });

  Var x = randn_param(rng, {2, 3, 2, 2});
  Var bias = randn_param(rng, {3});
  gradcheck({x, bias},
            [&] { return mean_all(square(add_bias_channel(x, bias))); });
  Var t = randn_param(rng, {2, 4, 3});
  Var rows = randn_param(rng, {2, 3});
  gradcheck({t, rows}, [&] { return mean_all(square(add_rows(t, rows))); });
  Var tokb = randn_param(rng, {4, 3});
  gradcheck({t, tokb},
            [&] { return mean_all(square(add_token_bias(t, tokb))); });
}

TEST_CASE("dropout scales kept activations and zeroes the rest") {
  RngStream rng(derive_seed(5, "drop", 0));
  Tensor ones = Tensor::full({10000}, 1.0f);
  Var x = parameter(ones.clone());
  Var y = dropout(x, 0.25f, rng);
  int64_t kept = 0;
  for (int64_t i = 0; i < y->numel(); ++i) {
    float v = y->value[i];
    CHECK((v == 0.0f || v == doctest::Approx(1.0f / 0.75f)));
    kept += (v != 0.0f);
  }
  double frac = static_cast<double>(kept) / static_cast<double>(y->numel());
  CHECK(frac == doctest::Approx(0.75).epsilon(0.03));
  // grad flows only through kept units, scaled identically
  backward(sum_all(y));
  for (int64_t i = 0; i < x->numel(); ++i) {
    float g = x->grad[i];
    if (y->value[i] == 0.0f)
      CHECK(g == 0.0f);
    else
      CHECK(g == doctest::Approx(1.0f / 0.75f));
  }
}

TEST_CASE("backward accumulates across reuse and respects NoGrad") {
  Var a = parameter(Tensor::from({1}, {2.0f}));
  Var y = add(mul(a, a), a);  // y = a^2 + a, dy/da = 2a + 1 = 5
  backward(sum_all(y));
  CHECK(a->grad[0] == doctest::Approx(5.0f));
  {
    NoGradGuard ng;
    Var z = mul(a, a);
    CHECK(z->parents.empty());
    CHECK_FALSE(z->requires_grad);
  }
}

TEST_CASE("reductions accumulate in double precision") {
  // 1e7 values of 0.1f: naive fp32 accumulation drifts well above 1e-2.
  Tensor t = Tensor::full({10000000}, 0.1f);
  double s = t.sum_double();
  CHECK(std::abs(s - 10000000.0 * static_cast<double>(0.1f)) < 1.0);
  Var v = constant(t);
  CHECK(std::abs(sum_all(v)->value[0] - 1e6) < 1.0);
  CHECK(mean_all(v)->value[0] == doctest::Approx(0.1).epsilon(1e-6));
}
