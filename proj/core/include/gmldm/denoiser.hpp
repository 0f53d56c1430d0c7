// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
//
// Hybrid ViT denoiser: patchified latent tokens through a 12-layer
// self-attention encoder, a decoder whose layers fuse CNN-extracted
// condition features via cross-attention, and two parallel MLP heads summed
// into the epsilon prediction.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "gmldm/autodiff.hpp"
#include "gmldm/tensor.hpp"
#include "gmldm/volumes.hpp"

namespace gmldm {

struct DenoiserConfig {
  int patch_size = 2;
  int token_dim = 128;
  int n_encoder_layers = 12;  // architecture contract, must stay 12
  int n_decoder_layers = 4;
  int n_heads = 4;
  int ffn_dim = 256;
  std::vector<int> cond_feature_dims = {8, 16};  // channels per CNN scale
  int null_tokens = 4;  // learned token count for the unconditional path
  double dropout = 0.0;

  void validate() const;
};

// Sinusoidal embedding of a 1-indexed timestep; entries in [-1,1], distinct
// for every t up to at least 10^4. dim must be even.
Tensor timestep_embed(int t, int dim);

// softmax(Q K^T / sqrt(d_k)) for 2-D Q (n,d_k), K (m,d_k): rows sum to 1.
ag::Var attention_weights(const ag::Var& q, const ag::Var& k);
// attention_weights(Q,K) @ V; every output row is a convex combination of
// V rows.
ag::Var cross_attention(const ag::Var& q, const ag::Var& k, const ag::Var& v);

class Denoiser {
 public:
  // latent_shape is {C, l, w, h} (the autoencoder latent); n_components is
  // the FNC matrix size K the condition CNN ingests.
  Denoiser(DenoiserConfig cfg, Shape latent_shape, int64_t n_components,
           uint64_t init_seed);

  const DenoiserConfig& config() const { return cfg_; }
  const Shape& latent_shape() const { return latent_shape_; }
  int64_t n_components() const { return n_components_; }
  int64_t n_tokens() const;
  ag::ParamStore& params() { return params_; }
  const ag::ParamStore& params() const { return params_; }

  // Condition images (N,1,K,K) -> fused multi-scale tokens (N, m, token_dim).
  ag::Var encode_condition(const ag::Var& c_images) const;
  // Learned null-condition tokens broadcast to (N, null_tokens, token_dim).
  ag::Var null_condition(int64_t batch) const;
  // Per-scale token counts before projection for a K x K input.
  std::vector<int64_t> scale_token_counts() const;

  // Full graph: z_batch (N,C,l,w,h), one timestep per sample, cond tokens
  // (N,m,token_dim). dropout_rng enables train-mode dropout when the config
  // rate is positive.
  ag::Var denoise_graph(const ag::Var& z_batch, const std::vector<int>& ts,
                        const ag::Var& cond_tokens,
                        RngStream* dropout_rng = nullptr) const;

  // Eval wrapper for a single latent; c == nullptr takes the learned
  // null-condition path. Deterministic.
  Tensor denoise(const Tensor& z_t, int t, const FNCMatrix* c) const;

  void save(const std::filesystem::path& path) const;
  static Denoiser load(const std::filesystem::path& path);

 private:
  DenoiserConfig cfg_;
  Shape latent_shape_;
  int64_t n_components_ = 0;
  ag::ParamStore params_;
};

// FNC matrix as a (1,1,K,K) condition image tensor.
Tensor fnc_to_image(const FNCMatrix& c);

}  // namespace gmldm
