// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
//
// Graph machinery, elementwise ops, reductions and shape ops. The heavier
// NN ops (GEMM, conv, norms, resampling) live in nn_ops.cpp.
#include <cmath>
#include <unordered_set>

#include "gmldm/autodiff.hpp"
#include "gmldm/errors.hpp"

namespace gmldm::ag {

namespace {
thread_local bool g_grad_enabled = true;

void check_same_shape(const char* op, const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value))
    throw ValidationError(std::string(op) + ": shape mismatch " +
                          shape_str(a->shape()) + " vs " +
                          shape_str(b->shape()));
}
}  // namespace

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor& Node::ensure_grad() {
  if (!grad.defined()) grad = Tensor::zeros(value.shape());
  return grad;
}

Var constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return n;
}

Var parameter(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  n->op = "param";
  return n;
}

Var make_node(const char* op, Tensor value, std::vector<Var> parents,
              std::function<void(Node&)> bw) {
  bool needs = false;
  if (g_grad_enabled)
    for (const auto& p : parents)
      if (p->requires_grad) {
        needs = true;
        break;
      }
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(bw);
  }
  return n;
}

void backward(const Var& loss) {
  if (loss->numel() != 1)
    throw ValidationError("backward: loss must be scalar, got " +
                          shape_str(loss->shape()));
  if (!loss->requires_grad) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack{{loss.get(), 0}};
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p->requires_grad && p->backward_fn && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss->ensure_grad().fill(1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward_fn) continue;
    if (!n->grad.defined()) continue;  // unreachable from loss
    n->backward_fn(*n);
    n->backward_fn = nullptr;  // release captured activations eagerly
  }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  check_same_shape("add", a, b);
  Tensor out(a->shape());
  const float* pa = a->value.data();
  const float* pb = b->value.data();
  float* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  return make_node("add", std::move(out), {a, b}, [a, b](Node& self) {
    const float* g = self.grad.data();
    if (a->requires_grad) {
      float* da = a->ensure_grad().data();
      for (int64_t i = 0; i < self.grad.numel(); ++i) da[i] += g[i];
    }
    if (b->requires_grad) {
      float* db = b->ensure_grad().data();
      for (int64_t i = 0; i < self.grad.numel(); ++i) db[i] += g[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape("sub", a, b);
  Tensor out(a->shape());
  const float* pa = a->value.data();
  const float* pb = b->value.data();
  float* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
  return make_node("sub", std::move(out), {a, b}, [a, b](Node& self) {
    const float* g = self.grad.data();
    if (a->requires_grad) {
      float* da = a->ensure_grad().data();
      for (int64_t i = 0; i < self.grad.numel(); ++i) da[i] += g[i];
    }
    if (b->requires_grad) {
      float* db = b->ensure_grad().data();
      for (int64_t i = 0; i < self.grad.numel(); ++i) db[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape("mul", a, b);
  Tensor out(a->shape());
  const float* pa = a->value.data();
  const float* pb = b->value.data();
  float* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
  return make_node("mul", std::move(out), {a, b}, [a, b](Node& self) {
    const float* g = self.grad.data();
    const float* pa = a->value.data();
    const float* pb = b->value.data();
    if (a->requires_grad) {
      float* da = a->ensure_grad().data();
      for (int64_t i = 0; i < self.grad.numel(); ++i) da[i] += g[i] * pb[i];
    }
    if (b->requires_grad) {
      float* db = b->ensure_grad().data();
      for (int64_t i = 0; i < self.grad.numel(); ++i) db[i] += g[i] * pa[i];
    }
  });
}

Var add_scalar(const Var& a, float s) {
  Tensor out(a->shape());
  const float* pa = a->value.data();
  float* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + s;
  return make_node("add_scalar", std::move(out), {a}, [a](Node& self) {
    const float* g = self.grad.data();
    float* da = a->ensure_grad().data();
    for (int64_t i = 0; i < self.grad.numel(); ++i) da[i] += g[i];
  });
}

Var mul_scalar(const Var& a, float s) {
  Tensor out(a->shape());
  const float* pa = a->value.data();
  float* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * s;
  return make_node("mul_scalar", std::move(out), {a}, [a, s](Node& self) {
    const float* g = self.grad.data();
    float* da = a->ensure_grad().data();
    for (int64_t i = 0; i < self.grad.numel(); ++i) da[i] += g[i] * s;
  });
}

Var scale(const Var& x, const Var& s) {
  if (s->numel() != 1)
    throw ValidationError("scale: scalar operand must have one element");
  Tensor out(x->shape());
  const float* px = x->value.data();
  float sv = s->value[0];
  float* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = px[i] * sv;
  return make_node("scale", std::move(out), {x, s}, [x, s](Node& self) {
    const float* g = self.grad.data();
    if (x->requires_grad) {
      float sv = s->value[0];
      float* dx = x->ensure_grad().data();
      for (int64_t i = 0; i < self.grad.numel(); ++i) dx[i] += g[i] * sv;
    }
    if (s->requires_grad) {
      const float* px = x->value.data();
      double acc = 0.0;
      for (int64_t i = 0; i < self.grad.numel(); ++i)
        acc += static_cast<double>(g[i]) * px[i];
      s->ensure_grad()[0] += static_cast<float>(acc);
    }
  });
}

Var exp(const Var& a) {
  Tensor out(a->shape());
  const float* pa = a->value.data();
  float* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = std::exp(pa[i]);
  Tensor kept = out;  // shares storage with the output value
  return make_node("exp", std::move(out), {a}, [a, kept](Node& self) {
    const float* g = self.grad.data();
    const float* y = kept.data();
    float* da = a->ensure_grad().data();
    for (int64_t i = 0; i < self.grad.numel(); ++i) da[i] += g[i] * y[i];
  });
}

Var square(const Var& a) { return mul(a, a); }

Var silu(const Var& a) {
  Tensor out(a->shape());
  const float* pa = a->value.data();
  float* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) {
    float s = 1.0f / (1.0f + std::exp(-pa[i]));
    po[i] = pa[i] * s;
  }
  return make_node("silu", std::move(out), {a}, [a](Node& self) {
    const float* g = self.grad.data();
    const float* x = a->value.data();
    float* da = a->ensure_grad().data();
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      float s = 1.0f / (1.0f + std::exp(-x[i]));
      da[i] += g[i] * (s + x[i] * s * (1.0f - s));
    }
  });
}

Var gelu(const Var& a) {
  // Exact erf form; backward uses Phi(x) + x*phi(x).
  Tensor out(a->shape());
  const float* pa = a->value.data();
  float* po = out.data();
  constexpr float inv_sqrt2 = 0.7071067811865475f;
  for (int64_t i = 0; i < out.numel(); ++i)
    po[i] = 0.5f * pa[i] * (1.0f + std::erf(pa[i] * inv_sqrt2));
  return make_node("gelu", std::move(out), {a}, [a](Node& self) {
    const float* g = self.grad.data();
    const float* x = a->value.data();
    float* da = a->ensure_grad().data();
    constexpr float inv_sqrt2 = 0.7071067811865475f;
    constexpr float inv_sqrt2pi = 0.3989422804014327f;
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      float cdf = 0.5f * (1.0f + std::erf(x[i] * inv_sqrt2));
      float pdf = inv_sqrt2pi * std::exp(-0.5f * x[i] * x[i]);
      da[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
}

// ---------------------------------------------------------------- reductions

Var sum_all(const Var& a) {
  double s = 0.0;
  const float* pa = a->value.data();
  for (int64_t i = 0; i < a->numel(); ++i) s += pa[i];
  Tensor out = Tensor::scalar(static_cast<float>(s));
  return make_node("sum_all", std::move(out), {a}, [a](Node& self) {
    float g = self.grad[0];
    float* da = a->ensure_grad().data();
    for (int64_t i = 0; i < a->numel(); ++i) da[i] += g;
  });
}

Var mean_all(const Var& a) {
  double s = 0.0;
  const float* pa = a->value.data();
  int64_t n = a->numel();
  for (int64_t i = 0; i < n; ++i) s += pa[i];
  Tensor out = Tensor::scalar(static_cast<float>(s / static_cast<double>(n)));
  return make_node("mean_all", std::move(out), {a}, [a, n](Node& self) {
    float g = self.grad[0] / static_cast<float>(n);
    float* da = a->ensure_grad().data();
    for (int64_t i = 0; i < n; ++i) da[i] += g;
  });
}

Var mse(const Var& a, const Var& b) { return mean_all(square(sub(a, b))); }

// ---------------------------------------------------------------- shape ops

Var reshape(const Var& a, Shape shape) {
  Tensor out = a->value.reshaped(shape);  // shares storage
  Shape orig = a->shape();
  return make_node("reshape", std::move(out), {a}, [a, orig](Node& self) {
    Tensor g = self.grad.reshaped(orig);
    const float* pg = g.data();
    float* da = a->ensure_grad().data();
    for (int64_t i = 0; i < g.numel(); ++i) da[i] += pg[i];
  });
}

namespace {
// Maps flat index under `shape` to flat index under permuted shape.
void permute_copy(const Tensor& in, Tensor& out, const std::vector<int>& perm) {
  const Shape& is = in.shape();
  int nd = static_cast<int>(is.size());
  Shape istrides(static_cast<size_t>(nd)), ostrides(static_cast<size_t>(nd));
  int64_t s = 1;
  for (int i = nd - 1; i >= 0; --i) {
    istrides[static_cast<size_t>(i)] = s;
    s *= is[static_cast<size_t>(i)];
  }
  const Shape& os = out.shape();
  s = 1;
  for (int i = nd - 1; i >= 0; --i) {
    ostrides[static_cast<size_t>(i)] = s;
    s *= os[static_cast<size_t>(i)];
  }
  std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
  const float* pi = in.data();
  float* po = out.data();
  for (int64_t flat = 0; flat < in.numel(); ++flat) {
    int64_t oflat = 0;
    for (int d = 0; d < nd; ++d)
      oflat += idx[static_cast<size_t>(perm[static_cast<size_t>(d)])] *
               ostrides[static_cast<size_t>(d)];
    po[oflat] = pi[flat];
    for (int d = nd - 1; d >= 0; --d) {
      if (++idx[static_cast<size_t>(d)] < is[static_cast<size_t>(d)]) break;
      idx[static_cast<size_t>(d)] = 0;
    }
  }
}
}  // namespace

Var permute(const Var& a, const std::vector<int>& perm) {
  const Shape& is = a->shape();
  if (perm.size() != is.size())
    throw ValidationError("permute: rank mismatch");
  Shape os(is.size());
  for (size_t i = 0; i < perm.size(); ++i)
    os[i] = is[static_cast<size_t>(perm[i])];
  Tensor out(os);
  permute_copy(a->value, out, perm);
  return make_node("permute", std::move(out), {a}, [a, perm](Node& self) {
    // Adjoint of a permutation is its inverse.
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i)
      inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
    Tensor gin(a->shape());
    permute_copy(self.grad, gin, inv);
    const float* pg = gin.data();
    float* da = a->ensure_grad().data();
    for (int64_t i = 0; i < gin.numel(); ++i) da[i] += pg[i];
  });
}

Var concat(const Var& a, const Var& b, int axis) {
  const Shape& sa = a->shape();
  const Shape& sb = b->shape();
  if (sa.size() != sb.size())
    throw ValidationError("concat: rank mismatch");
  for (size_t i = 0; i < sa.size(); ++i)
    if (static_cast<int>(i) != axis && sa[i] != sb[i])
      throw ValidationError("concat: shapes differ off-axis");
  Shape os = sa;
  os[static_cast<size_t>(axis)] += sb[static_cast<size_t>(axis)];

  int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= sa[static_cast<size_t>(i)];
  int64_t inner = 1;
  for (size_t i = static_cast<size_t>(axis) + 1; i < sa.size(); ++i)
    inner *= sa[i];
  int64_t ca = sa[static_cast<size_t>(axis)] * inner;
  int64_t cb = sb[static_cast<size_t>(axis)] * inner;

  Tensor out(os);
  const float* pa = a->value.data();
  const float* pb = b->value.data();
  float* po = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    std::copy(pa + o * ca, pa + (o + 1) * ca, po + o * (ca + cb));
    std::copy(pb + o * cb, pb + (o + 1) * cb, po + o * (ca + cb) + ca);
  }
  return make_node(
      "concat", std::move(out), {a, b}, [a, b, outer, ca, cb](Node& self) {
        const float* g = self.grad.data();
        if (a->requires_grad) {
          float* da = a->ensure_grad().data();
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < ca; ++i)
              da[o * ca + i] += g[o * (ca + cb) + i];
        }
        if (b->requires_grad) {
          float* db = b->ensure_grad().data();
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < cb; ++i)
              db[o * cb + i] += g[o * (ca + cb) + ca + i];
        }
      });
}

// ---------------------------------------------------------------- broadcasts

Var add_bias_channel(const Var& x, const Var& b) {
  const Shape& xs = x->shape();
  if (xs.size() < 2 || b->shape().size() != 1 || b->shape()[0] != xs[1])
    throw ValidationError("add_bias_channel: expected (N,C,...) + (C)");
  int64_t n = xs[0], c = xs[1];
  int64_t inner = x->numel() / (n * c);
  Tensor out(xs);
  const float* px = x->value.data();
  const float* pb = b->value.data();
  float* po = out.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < c; ++j) {
      float bv = pb[j];
      const float* src = px + (i * c + j) * inner;
      float* dst = po + (i * c + j) * inner;
      for (int64_t k = 0; k < inner; ++k) dst[k] = src[k] + bv;
    }
  return make_node(
      "add_bias_channel", std::move(out), {x, b},
      [x, b, n, c, inner](Node& self) {
        const float* g = self.grad.data();
        if (x->requires_grad) {
          float* dx = x->ensure_grad().data();
          for (int64_t i = 0; i < self.grad.numel(); ++i) dx[i] += g[i];
        }
        if (b->requires_grad) {
          float* db = b->ensure_grad().data();
          for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < c; ++j) {
              const float* src = g + (i * c + j) * inner;
              double s = 0.0;
              for (int64_t k = 0; k < inner; ++k) s += src[k];
              db[j] += static_cast<float>(s);
            }
        }
      });
}

Var add_rows(const Var& x, const Var& v) {
  const Shape& xs = x->shape();
  if (xs.size() != 3 || v->shape().size() != 2 || v->shape()[0] != xs[0] ||
      v->shape()[1] != xs[2])
    throw ValidationError("add_rows: expected (N,T,D) + (N,D)");
  int64_t n = xs[0], t = xs[1], d = xs[2];
  Tensor out(xs);
  const float* px = x->value.data();
  const float* pv = v->value.data();
  float* po = out.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < t; ++j)
      for (int64_t k = 0; k < d; ++k)
        po[(i * t + j) * d + k] = px[(i * t + j) * d + k] + pv[i * d + k];
  return make_node("add_rows", std::move(out), {x, v},
                   [x, v, n, t, d](Node& self) {
                     const float* g = self.grad.data();
                     if (x->requires_grad) {
                       float* dx = x->ensure_grad().data();
                       for (int64_t i = 0; i < self.grad.numel(); ++i)
                         dx[i] += g[i];
                     }
                     if (v->requires_grad) {
                       float* dv = v->ensure_grad().data();
                       for (int64_t i = 0; i < n; ++i)
                         for (int64_t j = 0; j < t; ++j)
                           for (int64_t k = 0; k < d; ++k)
                             dv[i * d + k] += g[(i * t + j) * d + k];
                     }
                   });
}

Var add_token_bias(const Var& x, const Var& e) {
  const Shape& xs = x->shape();
  if (xs.size() != 3 || e->shape().size() != 2 || e->shape()[0] != xs[1] ||
      e->shape()[1] != xs[2])
    throw ValidationError("add_token_bias: expected (N,T,D) + (T,D)");
  int64_t n = xs[0], t = xs[1], d = xs[2];
  Tensor out(xs);
  const float* px = x->value.data();
  const float* pe = e->value.data();
  float* po = out.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < t * d; ++j)
      po[i * t * d + j] = px[i * t * d + j] + pe[j];
  return make_node("add_token_bias", std::move(out), {x, e},
                   [x, e, n, t, d](Node& self) {
                     const float* g = self.grad.data();
                     if (x->requires_grad) {
                       float* dx = x->ensure_grad().data();
                       for (int64_t i = 0; i < self.grad.numel(); ++i)
                         dx[i] += g[i];
                     }
                     if (e->requires_grad) {
                       float* de = e->ensure_grad().data();
                       for (int64_t i = 0; i < n; ++i)
                         for (int64_t j = 0; j < t * d; ++j)
                           de[j] += g[i * t * d + j];
                     }
                   });
}

Var dropout(const Var& x, float p, RngStream& rng) {
  if (p <= 0.0f) return x;
  if (p >= 1.0f) throw ValidationError("dropout: p must be < 1");
  Tensor mask(x->shape());
  float scale = 1.0f / (1.0f - p);
  float* pm = mask.data();
  for (int64_t i = 0; i < mask.numel(); ++i)
    pm[i] = (rng.uniform() < p) ? 0.0f : scale;
  Tensor out(x->shape());
  const float* px = x->value.data();
  float* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = px[i] * pm[i];
  return make_node("dropout", std::move(out), {x}, [x, mask](Node& self) {
    const float* g = self.grad.data();
    const float* pm = mask.data();
    float* dx = x->ensure_grad().data();
    for (int64_t i = 0; i < self.grad.numel(); ++i) dx[i] += g[i] * pm[i];
  });
}

// ---------------------------------------------------------------- params

Var ParamStore::add(const std::string& name, Tensor init) {
  if (has(name)) throw ValidationError("ParamStore: duplicate name " + name);
  Var p = parameter(std::move(init));
  items_.emplace_back(name, p);
  return p;
}

const Var& ParamStore::get(const std::string& name) const {
  for (const auto& [n, v] : items_)
    if (n == name) return v;
  throw ValidationError("ParamStore: no parameter named " + name);
}

bool ParamStore::has(const std::string& name) const {
  for (const auto& [n, v] : items_)
    if (n == name) return true;
  return false;
}

int64_t ParamStore::total_elements() const {
  int64_t n = 0;
  for (const auto& [name, v] : items_) n += v->numel();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& [name, v] : items_)
    if (v->grad.defined()) v->grad.fill(0.0f);
}

bool ParamStore::all_finite() const {
  for (const auto& [name, v] : items_)
    if (!v->value.all_finite()) return false;
  return true;
}

Tensor normal_init(Shape shape, float stddev, RngStream& rng) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<float>(rng.normal()) * stddev;
  return t;
}

Tensor he_init(Shape shape, int64_t fan_in, RngStream& rng) {
  float stddev = std::sqrt(2.0f / static_cast<float>(fan_in));
  return normal_init(std::move(shape), stddev, rng);
}

Tensor zeros_init(Shape shape) { return Tensor::zeros(std::move(shape)); }
Tensor ones_init(Shape shape) { return Tensor::full(std::move(shape), 1.0f); }

}  // namespace gmldm::ag
