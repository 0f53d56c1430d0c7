// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "gmldm/rng.hpp"
#include "gmldm/tensor.hpp"

namespace gmldm::ag {

// Reverse-mode autodiff over a dynamically recorded DAG. Every op returns a
// new node; values are never mutated in place, so forward passes are
// reentrant. Gradients accumulate into `grad` on backward().
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // undefined until backward touches this node
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  const char* op = "leaf";

  Tensor& ensure_grad();
  const Shape& shape() const { return value.shape(); }
  int64_t numel() const { return value.numel(); }
};

// Thread-local recording switch. Inference paths wrap themselves in a
// NoGradGuard and pay no graph cost.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();

 private:
  bool prev_;
};

Var constant(Tensor v);
Var parameter(Tensor v);
Var make_node(const char* op, Tensor value, std::vector<Var> parents,
              std::function<void(Node&)> bw);

// Runs reverse accumulation from a scalar loss. Frees each node's closure
// after use so activation memory is released as the sweep proceeds.
void backward(const Var& loss);

// ----- elementwise -----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_scalar(const Var& a, float s);
Var mul_scalar(const Var& a, float s);
Var scale(const Var& x, const Var& s);  // s is shape {1}: out = x * s[0]
Var exp(const Var& a);
Var square(const Var& a);
Var silu(const Var& a);
Var gelu(const Var& a);

// ----- reductions -----
Var sum_all(const Var& a);   // shape {1}
Var mean_all(const Var& a);  // shape {1}
Var mse(const Var& a, const Var& b);

// ----- shape -----
Var reshape(const Var& a, Shape shape);
Var permute(const Var& a, const std::vector<int>& perm);
Var concat(const Var& a, const Var& b, int axis);

// ----- linear algebra -----
Var matmul(const Var& a, const Var& b);                        // (M,K)x(K,N)
Var bmm(const Var& a, const Var& b, bool trans_b = false);     // batched
Var linear(const Var& x, const Var& w, const Var& b);          // (...,Din)
Var linear(const Var& x, const Var& w);

// ----- broadcasts -----
Var add_bias_channel(const Var& x, const Var& b);  // (N,C,...) + (C)
Var add_rows(const Var& x, const Var& v);          // (N,T,D) + (N,D)
Var add_token_bias(const Var& x, const Var& e);    // (N,T,D) + (T,D)

// ----- normalization / activation over structure -----
Var softmax_lastdim(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta,
               float eps = 1e-5f);
Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta,
               float eps = 1e-5f);

// ----- convolutions (im2col + GEMM) -----
Var conv3d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

// ----- spatial -----
// Trilinear resampling with align-corners coordinates; reproduces constants
// and affine ramps exactly.
Var resize3d(const Var& x, int64_t od, int64_t oh, int64_t ow);
// Shift a (N,C,D,H,W) tensor by one voxel along a spatial axis (0=D,1=H,2=W)
// with clamped borders.
Var shift3d(const Var& x, int axis, int offset);

// ----- token ops -----
// (N,C,D,H,W) -> (N, T, C*p^3) with T = (D/p)(H/p)(W/p); exact inverse pair.
Var patchify3d(const Var& x, int p);
Var unpatchify3d(const Var& tokens, int64_t channels, int64_t d, int64_t h,
                 int64_t w, int p);

Var dropout(const Var& x, float p, RngStream& rng);

// ----- parameters -----
class ParamStore {
 public:
  Var add(const std::string& name, Tensor init);
  const Var& get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::pair<std::string, Var>>& items() const {
    return items_;
  }
  int64_t total_elements() const;
  void zero_grads();
  bool all_finite() const;

 private:
  std::vector<std::pair<std::string, Var>> items_;
};

// ----- init helpers -----
Tensor normal_init(Shape shape, float stddev, RngStream& rng);
Tensor he_init(Shape shape, int64_t fan_in, RngStream& rng);
Tensor zeros_init(Shape shape);
Tensor ones_init(Shape shape);

}  // namespace gmldm::ag
