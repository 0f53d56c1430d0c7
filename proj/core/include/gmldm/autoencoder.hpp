// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
//
// KL-regularized 3D autoencoder: learnable interpolation layers at entry and
// exit, a strided conv encoder to a Gaussian latent at 1/8 resolution, and
// the mirrored decoder. Losses: analytic KL (sum over latent elements, mean
// over batch) and voxel MSE, mixed as alpha*KL + (1-alpha)*recon.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "gmldm/autodiff.hpp"
#include "gmldm/tensor.hpp"
#include "gmldm/volumes.hpp"

namespace gmldm {

struct AEConfig {
  // standardized shape the interpolation layers map to/from
  int64_t L = 32, W = 32, H = 32;
  int base_channels = 8;
  std::vector<int> channel_mult = {1, 2, 4};  // one entry per resolution level
  std::vector<int> attention_levels = {2};    // levels given self-attention
  int conv_layers_per_module = 8;
  double alpha = 0.1;  // loss mix: alpha*KL + (1-alpha)*recon
  int latent_channels = 256;
  int groupnorm_groups = 4;

  void validate() const;
  Shape latent_shape() const {  // {C, L/8, W/8, H/8}
    return {latent_channels, L / 8, W / 8, H / 8};
  }
};

struct GaussianLatent {
  Tensor mu;       // {C, L/8, W/8, H/8}
  Tensor log_var;  // same shape
  void validate(int expect_channels) const;
};

// z0 = mu + exp(log_var/2) * eps, elementwise.
Tensor sample_latent(const GaussianLatent& g, const Tensor& eps);

// Analytic KL to the standard-normal prior: -1/2 sum(1 + log s^2 - mu^2 -
// s^2) over all latent elements. Throws on non-finite input.
double kl_loss(const GaussianLatent& g);
// Mean squared voxel difference.
double recon_loss(const Volume3D& x, const Volume3D& x_hat);
// alpha*kl + (1-alpha)*recon; alpha validated in [0,1].
double total_loss(double kl, double recon, double alpha);

// Trilinear resample to (l,w,h) plus a learnable correction: for each axis
// and direction, blend weight lam[k] mixes in (shifted - identity). All-zero
// lam reproduces exact trilinear resampling.
ag::Var interp_resample(const ag::Var& x, int64_t l, int64_t w, int64_t h,
                        const std::array<ag::Var, 6>& lam);

class Autoencoder {
 public:
  Autoencoder(AEConfig cfg, uint64_t init_seed);

  const AEConfig& config() const { return cfg_; }
  ag::ParamStore& params() { return params_; }
  const ag::ParamStore& params() const { return params_; }

  // Graph builders over batch tensors (N,1,l',w',h'); x may be at any shape.
  ag::Var standardize(const ag::Var& x_raw) const;  // I1
  struct LatentNodes {
    ag::Var mu, log_var;  // each (N,C,L/8,W/8,H/8)
  };
  LatentNodes encode_graph(const ag::Var& x_std) const;
  // z (N,C,L/8,W/8,H/8) -> standardized volume (N,1,L,W,H)
  ag::Var decode_graph(const ag::Var& z) const;
  // I2: standardized volume back to the original shape
  ag::Var restore(const ag::Var& y_std, int64_t l, int64_t w,
                  int64_t h) const;

  // Whole-volume eval wrappers (no graph, eps = 0 latent).
  GaussianLatent encode(const Volume3D& x) const;
  Volume3D decode(const Tensor& z0, int64_t l, int64_t w, int64_t h) const;
  Volume3D reconstruct(const Volume3D& x) const;

  void save(const std::filesystem::path& path) const;
  static Autoencoder load(const std::filesystem::path& path);

 private:
  AEConfig cfg_;
  ag::ParamStore params_;
  std::array<ag::Var, 6> lam(const char* layer) const;
};

// Volume <-> network tensor conversion. Tensor layout is (1,1,L,W,H) with
// axis order (x,y,z); voxel storage is x-fastest, so this transposes.
Tensor volume_to_tensor(const Volume3D& v);
Volume3D tensor_to_volume(const Tensor& t);

}  // namespace gmldm
