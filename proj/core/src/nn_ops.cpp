// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
//
// GEMM-backed NN ops: matmul/linear, convolutions via im2col, norms,
// softmax, trilinear resampling, patch tokenization. im2col buffers are
// rebuilt in the backward closures instead of being retained, which keeps
// graph memory at activation size.
#include <Eigen/Core>
#include <cmath>

#include "gmldm/autodiff.hpp"
#include "gmldm/errors.hpp"

namespace gmldm::ag {

namespace {

using RowMat =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

// C (M,N) = A (M,K) * op(B); accumulate adds into C.
void gemm_nn(const float* a, const float* b, float* c, int64_t m, int64_t k,
             int64_t n, bool accumulate) {
  CMapMat A(a, m, k), B(b, k, n);
  MapMat C(c, m, n);
  if (accumulate)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

void gemm_nt(const float* a, const float* b, float* c, int64_t m, int64_t k,
             int64_t n, bool accumulate) {
  CMapMat A(a, m, k), B(b, n, k);
  MapMat C(c, m, n);
  if (accumulate)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

void gemm_tn(const float* a, const float* b, float* c, int64_t m, int64_t k,
             int64_t n, bool accumulate) {
  CMapMat A(a, k, m), B(b, k, n);
  MapMat C(c, m, n);
  if (accumulate)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

int64_t conv_out_dim(int64_t in, int64_t k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace

// ------------------------------------------------------------------- matmul

Var matmul(const Var& a, const Var& b) {
  const Shape& sa = a->shape();
  const Shape& sb = b->shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw ValidationError("matmul: incompatible " + shape_str(sa) + " x " +
                          shape_str(sb));
  int64_t m = sa[0], k = sa[1], n = sb[1];
  Tensor out({m, n});
  gemm_nn(a->value.data(), b->value.data(), out.data(), m, k, n, false);
  return make_node("matmul", std::move(out), {a, b},
                   [a, b, m, k, n](Node& self) {
                     if (a->requires_grad)
                       gemm_nt(self.grad.data(), b->value.data(),
                               a->ensure_grad().data(), m, n, k, true);
                     if (b->requires_grad)
                       gemm_tn(a->value.data(), self.grad.data(),
                               b->ensure_grad().data(), k, m, n, true);
                   });
}

Var bmm(const Var& a, const Var& b, bool trans_b) {
  const Shape& sa = a->shape();
  const Shape& sb = b->shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0])
    throw ValidationError("bmm: incompatible " + shape_str(sa) + " x " +
                          shape_str(sb));
  int64_t bs = sa[0], m = sa[1], k = sa[2];
  int64_t n = trans_b ? sb[1] : sb[2];
  if ((trans_b ? sb[2] : sb[1]) != k)
    throw ValidationError("bmm: inner dimension mismatch " + shape_str(sa) +
                          " x " + shape_str(sb));
  Tensor out({bs, m, n});
  for (int64_t i = 0; i < bs; ++i) {
    const float* pa = a->value.data() + i * m * k;
    const float* pb = b->value.data() + i * k * n;
    float* po = out.data() + i * m * n;
    if (trans_b)
      gemm_nt(pa, pb, po, m, k, n, false);
    else
      gemm_nn(pa, pb, po, m, k, n, false);
  }
  return make_node(
      "bmm", std::move(out), {a, b}, [a, b, bs, m, k, n, trans_b](Node& self) {
        for (int64_t i = 0; i < bs; ++i) {
          const float* g = self.grad.data() + i * m * n;
          const float* pa = a->value.data() + i * m * k;
          const float* pb = b->value.data() + i * k * n;
          if (a->requires_grad) {
            float* da = a->ensure_grad().data() + i * m * k;
            if (trans_b)
              gemm_nn(g, pb, da, m, n, k, true);  // dA = dY * B
            else
              gemm_nt(g, pb, da, m, n, k, true);  // dA = dY * B^T
          }
          if (b->requires_grad) {
            float* db = b->ensure_grad().data() + i * k * n;
            if (trans_b)
              gemm_tn(g, pa, db, n, m, k, true);  // dB = dY^T * A
            else
              gemm_tn(pa, g, db, k, m, n, true);  // dB = A^T * dY
          }
        }
      });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const Shape& xs = x->shape();
  const Shape& ws = w->shape();
  if (ws.size() != 2 || xs.empty() || xs.back() != ws[0])
    throw ValidationError("linear: incompatible " + shape_str(xs) + " x " +
                          shape_str(ws));
  if (b && (b->shape().size() != 1 || b->shape()[0] != ws[1]))
    throw ValidationError("linear: bias shape mismatch");
  int64_t din = ws[0], dout = ws[1];
  int64_t rows = x->numel() / din;
  Shape os = xs;
  os.back() = dout;
  Tensor out(os);
  gemm_nn(x->value.data(), w->value.data(), out.data(), rows, din, dout,
          false);
  if (b) {
    float* po = out.data();
    const float* pb = b->value.data();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < dout; ++j) po[r * dout + j] += pb[j];
  }
  std::vector<Var> parents = b ? std::vector<Var>{x, w, b}
                               : std::vector<Var>{x, w};
  return make_node(
      "linear", std::move(out), std::move(parents),
      [x, w, b, rows, din, dout](Node& self) {
        const float* g = self.grad.data();
        if (x->requires_grad)
          gemm_nt(g, w->value.data(), x->ensure_grad().data(), rows, dout, din,
                  true);
        if (w->requires_grad)
          gemm_tn(x->value.data(), g, w->ensure_grad().data(), din, rows, dout,
                  true);
        if (b && b->requires_grad) {
          float* db = b->ensure_grad().data();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < dout; ++j) db[j] += g[r * dout + j];
        }
      });
}

Var linear(const Var& x, const Var& w) { return linear(x, w, nullptr); }

// ------------------------------------------------------------------ softmax

Var softmax_lastdim(const Var& a) {
  const Shape& s = a->shape();
  int64_t d = s.back();
  int64_t rows = a->numel() / d;
  Tensor out(s);
  const float* pa = a->value.data();
  float* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = pa + r * d;
    float* y = po + r * d;
    float mx = x[0];
    for (int64_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    double sum = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      y[i] = std::exp(x[i] - mx);
      sum += y[i];
    }
    float inv = static_cast<float>(1.0 / sum);
    for (int64_t i = 0; i < d; ++i) y[i] *= inv;
  }
  Tensor kept = out;
  return make_node("softmax", std::move(out), {a},
                   [a, kept, rows, d](Node& self) {
                     const float* g = self.grad.data();
                     const float* y = kept.data();
                     float* da = a->ensure_grad().data();
                     for (int64_t r = 0; r < rows; ++r) {
                       double dot = 0.0;
                       for (int64_t i = 0; i < d; ++i)
                         dot += static_cast<double>(g[r * d + i]) *
                                y[r * d + i];
                       for (int64_t i = 0; i < d; ++i)
                         da[r * d + i] +=
                             y[r * d + i] *
                             (g[r * d + i] - static_cast<float>(dot));
                     }
                   });
}

// -------------------------------------------------------------------- norms

namespace {
// Shared normalization backward for a contiguous block of `len` elements:
// dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
void norm_block_backward(const float* x, const float* dxhat, float mean,
                         float inv, int64_t len, float* dx) {
  double s1 = 0.0, s2 = 0.0;
  for (int64_t i = 0; i < len; ++i) {
    float xh = (x[i] - mean) * inv;
    s1 += dxhat[i];
    s2 += static_cast<double>(dxhat[i]) * xh;
  }
  float m1 = static_cast<float>(s1 / static_cast<double>(len));
  float m2 = static_cast<float>(s2 / static_cast<double>(len));
  for (int64_t i = 0; i < len; ++i) {
    float xh = (x[i] - mean) * inv;
    dx[i] += inv * (dxhat[i] - m1 - xh * m2);
  }
}
}  // namespace

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
  const Shape& s = x->shape();
  int64_t d = s.back();
  if (gamma->shape() != Shape{d} || beta->shape() != Shape{d})
    throw ValidationError("layer_norm: affine params must be (" +
                          std::to_string(d) + ")");
  int64_t rows = x->numel() / d;
  Tensor out(s);
  Tensor mean({rows}), inv({rows});
  const float* px = x->value.data();
  const float* pg = gamma->value.data();
  const float* pb = beta->value.data();
  float* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = px + r * d;
    double m = 0.0;
    for (int64_t i = 0; i < d; ++i) m += xr[i];
    m /= static_cast<double>(d);
    double v = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      double t = xr[i] - m;
      v += t * t;
    }
    v /= static_cast<double>(d);
    float iv = static_cast<float>(1.0 / std::sqrt(v + eps));
    mean[r] = static_cast<float>(m);
    inv[r] = iv;
    float* yr = po + r * d;
    for (int64_t i = 0; i < d; ++i)
      yr[i] = (xr[i] - static_cast<float>(m)) * iv * pg[i] + pb[i];
  }
  return make_node(
      "layer_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, mean, inv, rows, d](Node& self) {
        const float* g = self.grad.data();
        const float* px = x->value.data();
        const float* pg = gamma->value.data();
        std::vector<float> dxhat(static_cast<size_t>(d));
        for (int64_t r = 0; r < rows; ++r) {
          const float* xr = px + r * d;
          const float* gr = g + r * d;
          if (gamma->requires_grad || beta->requires_grad) {
            float* dgamma =
                gamma->requires_grad ? gamma->ensure_grad().data() : nullptr;
            float* dbeta =
                beta->requires_grad ? beta->ensure_grad().data() : nullptr;
            for (int64_t i = 0; i < d; ++i) {
              float xh = (xr[i] - mean[r]) * inv[r];
              if (dgamma) dgamma[i] += gr[i] * xh;
              if (dbeta) dbeta[i] += gr[i];
            }
          }
          if (x->requires_grad) {
            for (int64_t i = 0; i < d; ++i) dxhat[static_cast<size_t>(i)] = gr[i] * pg[i];
            norm_block_backward(xr, dxhat.data(), mean[r], inv[r], d,
                                x->ensure_grad().data() + r * d);
          }
        }
      });
}

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta,
               float eps) {
  const Shape& s = x->shape();
  if (s.size() < 3) throw ValidationError("group_norm: expected (N,C,...)");
  int64_t n = s[0], c = s[1];
  if (c % groups != 0)
    throw ValidationError("group_norm: channels not divisible by groups");
  if (gamma->shape() != Shape{c} || beta->shape() != Shape{c})
    throw ValidationError("group_norm: affine params must be (C)");
  int64_t spatial = x->numel() / (n * c);
  int64_t cg = c / groups;
  int64_t glen = cg * spatial;

  Tensor out(s);
  Tensor mean({n * groups}), inv({n * groups});
  const float* px = x->value.data();
  const float* pg = gamma->value.data();
  const float* pb = beta->value.data();
  float* po = out.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t g = 0; g < groups; ++g) {
      const float* base = px + (i * c + g * cg) * spatial;
      double m = 0.0;
      for (int64_t k = 0; k < glen; ++k) m += base[k];
      m /= static_cast<double>(glen);
      double v = 0.0;
      for (int64_t k = 0; k < glen; ++k) {
        double t = base[k] - m;
        v += t * t;
      }
      v /= static_cast<double>(glen);
      float iv = static_cast<float>(1.0 / std::sqrt(v + eps));
      mean[i * groups + g] = static_cast<float>(m);
      inv[i * groups + g] = iv;
      float* ob = po + (i * c + g * cg) * spatial;
      for (int64_t ch = 0; ch < cg; ++ch) {
        float gm = pg[g * cg + ch], bt = pb[g * cg + ch];
        const float* xr = base + ch * spatial;
        float* yr = ob + ch * spatial;
        for (int64_t k = 0; k < spatial; ++k)
          yr[k] = (xr[k] - static_cast<float>(m)) * iv * gm + bt;
      }
    }
  return make_node(
      "group_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, mean, inv, n, c, groups, cg, spatial,
       glen](Node& self) {
        const float* g = self.grad.data();
        const float* px = x->value.data();
        const float* pgm = gamma->value.data();
        std::vector<float> dxhat(static_cast<size_t>(glen));
        for (int64_t i = 0; i < n; ++i)
          for (int64_t gr = 0; gr < groups; ++gr) {
            const float* base = px + (i * c + gr * cg) * spatial;
            const float* gb = g + (i * c + gr * cg) * spatial;
            float m = mean[i * groups + gr], iv = inv[i * groups + gr];
            if (gamma->requires_grad || beta->requires_grad) {
              float* dgamma =
                  gamma->requires_grad ? gamma->ensure_grad().data() : nullptr;
              float* dbeta =
                  beta->requires_grad ? beta->ensure_grad().data() : nullptr;
              for (int64_t ch = 0; ch < cg; ++ch) {
                double sg = 0.0, sb = 0.0;
                for (int64_t k = 0; k < spatial; ++k) {
                  float xh = (base[ch * spatial + k] - m) * iv;
                  sg += static_cast<double>(gb[ch * spatial + k]) * xh;
                  sb += gb[ch * spatial + k];
                }
                if (dgamma) dgamma[gr * cg + ch] += static_cast<float>(sg);
                if (dbeta) dbeta[gr * cg + ch] += static_cast<float>(sb);
              }
            }
            if (x->requires_grad) {
              for (int64_t ch = 0; ch < cg; ++ch) {
                float gm = pgm[gr * cg + ch];
                for (int64_t k = 0; k < spatial; ++k)
                  dxhat[static_cast<size_t>(ch * spatial + k)] =
                      gb[ch * spatial + k] * gm;
              }
              norm_block_backward(
                  base, dxhat.data(), m, iv, glen,
                  x->ensure_grad().data() + (i * c + gr * cg) * spatial);
            }
          }
      });
}

// ------------------------------------------------------------- convolutions

namespace {

// Generic im2col over 3 spatial dims (use kd=1/D=1/pad_d=0 for 2-D). Column
// layout: row = output position (od,oh,ow), col = (ci,kz,ky,kx).
void im2col3d(const float* x, int64_t ci, int64_t D, int64_t H, int64_t W,
              int64_t kd, int64_t kh, int64_t kw, int stride, int pad_d,
              int pad, int64_t OD, int64_t OH, int64_t OW, float* col) {
  int64_t K = ci * kd * kh * kw;
  for (int64_t od = 0; od < OD; ++od)
    for (int64_t oh = 0; oh < OH; ++oh)
      for (int64_t ow = 0; ow < OW; ++ow) {
        float* row = col + ((od * OH + oh) * OW + ow) * K;
        int64_t zi = od * stride - pad_d;
        int64_t yi = oh * stride - pad;
        int64_t xi = ow * stride - pad;
        int64_t idx = 0;
        for (int64_t c = 0; c < ci; ++c) {
          const float* xc = x + c * D * H * W;
          for (int64_t kz = 0; kz < kd; ++kz) {
            int64_t z = zi + kz;
            for (int64_t ky = 0; ky < kh; ++ky) {
              int64_t y = yi + ky;
              bool in_plane =
                  (z >= 0 && z < D && y >= 0 && y < H);
              const float* xp = in_plane ? xc + (z * H + y) * W : nullptr;
              for (int64_t kx = 0; kx < kw; ++kx, ++idx) {
                int64_t xx = xi + kx;
                row[idx] =
                    (in_plane && xx >= 0 && xx < W) ? xp[xx] : 0.0f;
              }
            }
          }
        }
      }
}

void col2im3d(const float* col, int64_t ci, int64_t D, int64_t H, int64_t W,
              int64_t kd, int64_t kh, int64_t kw, int stride, int pad_d,
              int pad, int64_t OD, int64_t OH, int64_t OW, float* dx) {
  int64_t K = ci * kd * kh * kw;
  for (int64_t od = 0; od < OD; ++od)
    for (int64_t oh = 0; oh < OH; ++oh)
      for (int64_t ow = 0; ow < OW; ++ow) {
        const float* row = col + ((od * OH + oh) * OW + ow) * K;
        int64_t zi = od * stride - pad_d;
        int64_t yi = oh * stride - pad;
        int64_t xi = ow * stride - pad;
        int64_t idx = 0;
        for (int64_t c = 0; c < ci; ++c) {
          float* xc = dx + c * D * H * W;
          for (int64_t kz = 0; kz < kd; ++kz) {
            int64_t z = zi + kz;
            for (int64_t ky = 0; ky < kh; ++ky) {
              int64_t y = yi + ky;
              bool in_plane = (z >= 0 && z < D && y >= 0 && y < H);
              float* xp = in_plane ? xc + (z * H + y) * W : nullptr;
              for (int64_t kx = 0; kx < kw; ++kx, ++idx) {
                int64_t xx = xi + kx;
                if (in_plane && xx >= 0 && xx < W) xp[xx] += row[idx];
              }
            }
          }
        }
      }
}

// Shared conv forward/backward for 2-D (leading unit depth) and 3-D.
Var conv_impl(const char* name, const Var& x, const Var& w, const Var& b,
              int stride, int pad, bool two_d) {
  const Shape& xs = x->shape();
  const Shape& ws = w->shape();
  size_t want = two_d ? 4 : 5;
  if (xs.size() != want || ws.size() != want)
    throw ValidationError(std::string(name) + ": expected rank " +
                          std::to_string(want) + " input/weight, got " +
                          shape_str(xs) + " / " + shape_str(ws));
  if (xs[1] != ws[1])
    throw ValidationError(std::string(name) + ": channel mismatch " +
                          shape_str(xs) + " vs " + shape_str(ws));
  int64_t n = xs[0], ci = xs[1];
  int64_t D = two_d ? 1 : xs[2];
  int64_t H = xs[two_d ? 2 : 3], W = xs[two_d ? 3 : 4];
  int64_t co = ws[0];
  int64_t kd = two_d ? 1 : ws[2];
  int64_t kh = ws[two_d ? 2 : 3], kw = ws[two_d ? 3 : 4];
  int pad_d = two_d ? 0 : pad;
  int64_t OD = two_d ? 1 : conv_out_dim(D, kd, stride, pad);
  int64_t OH = conv_out_dim(H, kh, stride, pad);
  int64_t OW = conv_out_dim(W, kw, stride, pad);
  if (OD <= 0 || OH <= 0 || OW <= 0)
    throw ValidationError(std::string(name) + ": output would be empty for " +
                          shape_str(xs));
  if (b && (b->shape().size() != 1 || b->shape()[0] != co))
    throw ValidationError(std::string(name) + ": bias shape mismatch");

  int64_t P = OD * OH * OW;
  int64_t K = ci * kd * kh * kw;
  Shape os = two_d ? Shape{n, co, OH, OW} : Shape{n, co, OD, OH, OW};
  Tensor out(os);

  std::vector<float> col(static_cast<size_t>(P * K));
  std::vector<float> omat(static_cast<size_t>(P * co));
  const float* pb = b ? b->value.data() : nullptr;
  int64_t in_vol = ci * D * H * W;
  for (int64_t i = 0; i < n; ++i) {
    im2col3d(x->value.data() + i * in_vol, ci, D, H, W, kd, kh, kw, stride,
             pad_d, pad, OD, OH, OW, col.data());
    gemm_nt(col.data(), w->value.data(), omat.data(), P, K, co, false);
    float* po = out.data() + i * co * P;
    for (int64_t c = 0; c < co; ++c) {
      float bv = pb ? pb[c] : 0.0f;
      for (int64_t p = 0; p < P; ++p) po[c * P + p] = omat[p * co + c] + bv;
    }
  }

  std::vector<Var> parents = b ? std::vector<Var>{x, w, b}
                               : std::vector<Var>{x, w};
  return make_node(
      name, std::move(out), std::move(parents),
      [x, w, b, n, ci, D, H, W, kd, kh, kw, stride, pad_d, pad, OD, OH, OW, P,
       K, in_vol](Node& self) {
        int64_t co = w->shape()[0];
        std::vector<float> col(static_cast<size_t>(P * K));
        std::vector<float> gmat(static_cast<size_t>(P * co));
        std::vector<float> dcol;
        if (x->requires_grad) dcol.resize(static_cast<size_t>(P * K));
        for (int64_t i = 0; i < n; ++i) {
          const float* g = self.grad.data() + i * co * P;
          for (int64_t c = 0; c < co; ++c)
            for (int64_t p = 0; p < P; ++p) gmat[static_cast<size_t>(p * co + c)] = g[c * P + p];
          if (w->requires_grad || b) {
            im2col3d(x->value.data() + i * in_vol, ci, D, H, W, kd, kh, kw,
                     stride, pad_d, pad, OD, OH, OW, col.data());
            if (w->requires_grad)
              gemm_tn(gmat.data(), col.data(), w->ensure_grad().data(), co, P,
                      K, true);
            if (b && b->requires_grad) {
              float* db = b->ensure_grad().data();
              for (int64_t c = 0; c < co; ++c) {
                double s = 0.0;
                for (int64_t p = 0; p < P; ++p) s += g[c * P + p];
                db[c] += static_cast<float>(s);
              }
            }
          }
          if (x->requires_grad) {
            gemm_nn(gmat.data(), w->value.data(), dcol.data(), P, co, K,
                    false);
            col2im3d(dcol.data(), ci, D, H, W, kd, kh, kw, stride, pad_d, pad,
                     OD, OH, OW, x->ensure_grad().data() + i * in_vol);
          }
        }
      });
}

}  // namespace

Var conv3d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  return conv_impl("conv3d", x, w, b, stride, pad, false);
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  return conv_impl("conv2d", x, w, b, stride, pad, true);
}

// ----------------------------------------------------------------- resize3d

namespace {
struct AxisTaps {
  std::vector<int64_t> i0, i1;
  std::vector<float> w1;  // weight on i1; weight on i0 is 1-w1
};

// Align-corners source coordinates.
AxisTaps make_taps(int64_t in, int64_t out) {
  AxisTaps t;
  t.i0.resize(static_cast<size_t>(out));
  t.i1.resize(static_cast<size_t>(out));
  t.w1.resize(static_cast<size_t>(out));
  for (int64_t i = 0; i < out; ++i) {
    double c = (out > 1 && in > 1)
                   ? static_cast<double>(i) * static_cast<double>(in - 1) /
                         static_cast<double>(out - 1)
                   : 0.0;
    int64_t lo = static_cast<int64_t>(c);
    if (lo >= in - 1) lo = in > 1 ? in - 2 : 0;
    t.i0[static_cast<size_t>(i)] = lo;
    t.i1[static_cast<size_t>(i)] = (in > 1) ? lo + 1 : 0;
    t.w1[static_cast<size_t>(i)] = static_cast<float>(c - static_cast<double>(lo));
  }
  return t;
}
}  // namespace

Var resize3d(const Var& x, int64_t od, int64_t oh, int64_t ow) {
  const Shape& s = x->shape();
  if (s.size() != 5) throw ValidationError("resize3d: expected (N,C,D,H,W)");
  int64_t n = s[0], c = s[1], D = s[2], H = s[3], W = s[4];
  if (od <= 0 || oh <= 0 || ow <= 0)
    throw ValidationError("resize3d: non-positive target shape");
  AxisTaps tz = make_taps(D, od), ty = make_taps(H, oh), tx = make_taps(W, ow);
  Tensor out({n, c, od, oh, ow});
  const float* px = x->value.data();
  float* po = out.data();
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const float* src = px + nc * D * H * W;
    float* dst = po + nc * od * oh * ow;
    for (int64_t z = 0; z < od; ++z) {
      float wz = tz.w1[static_cast<size_t>(z)];
      int64_t z0 = tz.i0[static_cast<size_t>(z)], z1 = tz.i1[static_cast<size_t>(z)];
      for (int64_t y = 0; y < oh; ++y) {
        float wy = ty.w1[static_cast<size_t>(y)];
        int64_t y0 = ty.i0[static_cast<size_t>(y)], y1 = ty.i1[static_cast<size_t>(y)];
        const float* p00 = src + (z0 * H + y0) * W;
        const float* p01 = src + (z0 * H + y1) * W;
        const float* p10 = src + (z1 * H + y0) * W;
        const float* p11 = src + (z1 * H + y1) * W;
        float* row = dst + (z * oh + y) * ow;
        for (int64_t xo = 0; xo < ow; ++xo) {
          float wx = tx.w1[static_cast<size_t>(xo)];
          int64_t x0 = tx.i0[static_cast<size_t>(xo)], x1 = tx.i1[static_cast<size_t>(xo)];
          float v00 = p00[x0] * (1 - wx) + p00[x1] * wx;
          float v01 = p01[x0] * (1 - wx) + p01[x1] * wx;
          float v10 = p10[x0] * (1 - wx) + p10[x1] * wx;
          float v11 = p11[x0] * (1 - wx) + p11[x1] * wx;
          float v0 = v00 * (1 - wy) + v01 * wy;
          float v1 = v10 * (1 - wy) + v11 * wy;
          row[xo] = v0 * (1 - wz) + v1 * wz;
        }
      }
    }
  }
  return make_node(
      "resize3d", std::move(out), {x},
      [x, n, c, D, H, W, od, oh, ow, tz, ty, tx](Node& self) {
        const float* g = self.grad.data();
        float* dx = x->ensure_grad().data();
        for (int64_t nc = 0; nc < n * c; ++nc) {
          float* dst = dx + nc * D * H * W;
          const float* src = g + nc * od * oh * ow;
          for (int64_t z = 0; z < od; ++z) {
            float wz = tz.w1[static_cast<size_t>(z)];
            int64_t z0 = tz.i0[static_cast<size_t>(z)], z1 = tz.i1[static_cast<size_t>(z)];
            for (int64_t y = 0; y < oh; ++y) {
              float wy = ty.w1[static_cast<size_t>(y)];
              int64_t y0 = ty.i0[static_cast<size_t>(y)], y1 = ty.i1[static_cast<size_t>(y)];
              const float* row = src + (z * oh + y) * ow;
              for (int64_t xo = 0; xo < ow; ++xo) {
                float wx = tx.w1[static_cast<size_t>(xo)];
                int64_t x0 = tx.i0[static_cast<size_t>(xo)], x1 = tx.i1[static_cast<size_t>(xo)];
                float gv = row[xo];
                dst[(z0 * H + y0) * W + x0] += gv * (1 - wz) * (1 - wy) * (1 - wx);
                dst[(z0 * H + y0) * W + x1] += gv * (1 - wz) * (1 - wy) * wx;
                dst[(z0 * H + y1) * W + x0] += gv * (1 - wz) * wy * (1 - wx);
                dst[(z0 * H + y1) * W + x1] += gv * (1 - wz) * wy * wx;
                dst[(z1 * H + y0) * W + x0] += gv * wz * (1 - wy) * (1 - wx);
                dst[(z1 * H + y0) * W + x1] += gv * wz * (1 - wy) * wx;
                dst[(z1 * H + y1) * W + x0] += gv * wz * wy * (1 - wx);
                dst[(z1 * H + y1) * W + x1] += gv * wz * wy * wx;
              }
            }
          }
        }
      });
}

Var shift3d(const Var& x, int axis, int offset) {
  const Shape& s = x->shape();
  if (s.size() != 5) throw ValidationError("shift3d: expected (N,C,D,H,W)");
  if (axis < 0 || axis > 2) throw ValidationError("shift3d: axis in [0,2]");
  if (offset != 1 && offset != -1)
    throw ValidationError("shift3d: offset must be +/-1");
  int64_t n = s[0], c = s[1], D = s[2], H = s[3], W = s[4];
  int64_t dims[3] = {D, H, W};
  Tensor out(s);
  const float* px = x->value.data();
  float* po = out.data();
  auto clampi = [](int64_t v, int64_t hi) {
    return v < 0 ? 0 : (v >= hi ? hi - 1 : v);
  };
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const float* src = px + nc * D * H * W;
    float* dst = po + nc * D * H * W;
    for (int64_t z = 0; z < D; ++z)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t xw = 0; xw < W; ++xw) {
          int64_t zz = z, yy = y, xx = xw;
          if (axis == 0) zz = clampi(z + offset, dims[0]);
          if (axis == 1) yy = clampi(y + offset, dims[1]);
          if (axis == 2) xx = clampi(xw + offset, dims[2]);
          dst[(z * H + y) * W + xw] = src[(zz * H + yy) * W + xx];
        }
  }
  return make_node(
      "shift3d", std::move(out), {x},
      [x, n, c, D, H, W, axis, offset](Node& self) {
        int64_t dims[3] = {D, H, W};
        const float* g = self.grad.data();
        float* dx = x->ensure_grad().data();
        auto clampi = [](int64_t v, int64_t hi) {
          return v < 0 ? 0 : (v >= hi ? hi - 1 : v);
        };
        for (int64_t nc = 0; nc < n * c; ++nc) {
          const float* src = g + nc * D * H * W;
          float* dst = dx + nc * D * H * W;
          for (int64_t z = 0; z < D; ++z)
            for (int64_t y = 0; y < H; ++y)
              for (int64_t xw = 0; xw < W; ++xw) {
                int64_t zz = z, yy = y, xx = xw;
                if (axis == 0) zz = clampi(z + offset, dims[0]);
                if (axis == 1) yy = clampi(y + offset, dims[1]);
                if (axis == 2) xx = clampi(xw + offset, dims[2]);
                dst[(zz * H + yy) * W + xx] += src[(z * H + y) * W + xw];
              }
        }
      });
}

// ------------------------------------------------------------------- tokens

namespace {
void patchify_copy(const float* x, float* tok, int64_t c, int64_t d, int64_t h,
                   int64_t w, int p, bool inverse) {
  int64_t bd = d / p, bh = h / p, bw = w / p;
  int64_t fdim = c * p * p * p;
  for (int64_t bz = 0; bz < bd; ++bz)
    for (int64_t by = 0; by < bh; ++by)
      for (int64_t bx = 0; bx < bw; ++bx) {
        int64_t t = (bz * bh + by) * bw + bx;
        for (int64_t ch = 0; ch < c; ++ch)
          for (int64_t iz = 0; iz < p; ++iz)
            for (int64_t iy = 0; iy < p; ++iy)
              for (int64_t ix = 0; ix < p; ++ix) {
                int64_t f = ((ch * p + iz) * p + iy) * p + ix;
                int64_t v = ((ch * d + bz * p + iz) * h + by * p + iy) * w +
                            bx * p + ix;
                if (inverse)
                  tok[v] = x[t * fdim + f];
                else
                  tok[t * fdim + f] = x[v];
              }
      }
}
}  // namespace

Var patchify3d(const Var& x, int p) {
  const Shape& s = x->shape();
  if (s.size() != 5) throw ValidationError("patchify3d: expected (N,C,D,H,W)");
  int64_t n = s[0], c = s[1], d = s[2], h = s[3], w = s[4];
  if (p <= 0 || d % p || h % p || w % p)
    throw ValidationError("patchify3d: spatial dims " + shape_str(s) +
                          " not divisible by patch size " + std::to_string(p));
  int64_t tcount = (d / p) * (h / p) * (w / p);
  int64_t fdim = c * p * p * p;
  Tensor out({n, tcount, fdim});
  int64_t vol = c * d * h * w;
  for (int64_t i = 0; i < n; ++i)
    patchify_copy(x->value.data() + i * vol, out.data() + i * tcount * fdim, c,
                  d, h, w, p, false);
  return make_node("patchify3d", std::move(out), {x},
                   [x, n, c, d, h, w, p, tcount, fdim, vol](Node& self) {
                     float* dx = x->ensure_grad().data();
                     Tensor scratch({c, d, h, w});
                     for (int64_t i = 0; i < n; ++i) {
                       patchify_copy(self.grad.data() + i * tcount * fdim,
                                     scratch.data(), c, d, h, w, p, true);
                       const float* ps = scratch.data();
                       for (int64_t k = 0; k < vol; ++k) dx[i * vol + k] += ps[k];
                     }
                   });
}

Var unpatchify3d(const Var& tokens, int64_t channels, int64_t d, int64_t h,
                 int64_t w, int p) {
  const Shape& s = tokens->shape();
  if (s.size() != 3) throw ValidationError("unpatchify3d: expected (N,T,F)");
  int64_t n = s[0], tcount = s[1], fdim = s[2];
  if (p <= 0 || d % p || h % p || w % p)
    throw ValidationError("unpatchify3d: target dims not divisible by patch");
  if (tcount != (d / p) * (h / p) * (w / p) || fdim != channels * p * p * p)
    throw ValidationError("unpatchify3d: token layout does not match target " +
                          shape_str(s));
  Tensor out({n, channels, d, h, w});
  int64_t vol = channels * d * h * w;
  for (int64_t i = 0; i < n; ++i)
    patchify_copy(tokens->value.data() + i * tcount * fdim,
                  out.data() + i * vol, channels, d, h, w, p, true);
  return make_node(
      "unpatchify3d", std::move(out), {tokens},
      [tokens, n, channels, d, h, w, p, tcount, fdim, vol](Node& self) {
        float* dt = tokens->ensure_grad().data();
        Tensor scratch({tcount, fdim});
        for (int64_t i = 0; i < n; ++i) {
          patchify_copy(self.grad.data() + i * vol, scratch.data(), channels,
                        d, h, w, p, false);
          const float* ps = scratch.data();
          for (int64_t k = 0; k < tcount * fdim; ++k)
            dt[i * tcount * fdim + k] += ps[k];
        }
      });
}

}  // namespace gmldm::ag
