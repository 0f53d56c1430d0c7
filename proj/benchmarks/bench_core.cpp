// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
//
// Microbenchmarks for the pipeline's hot paths: 3D convolution, the
// denoiser forward pass, ancestral sampling, and SSIM scoring.

#include <benchmark/benchmark.h>

#include "gmldm/autodiff.hpp"
#include "gmldm/autoencoder.hpp"
#include "gmldm/denoiser.hpp"
#include "gmldm/diffusion.hpp"
#include "gmldm/metrics.hpp"
#include "gmldm/rng.hpp"
#include "gmldm/tensor.hpp"
#include "gmldm/volumes.hpp"

namespace {

using namespace gmldm;

Tensor randn(RngStream& rng, const Shape& s, float scale = 1.0f) {
  Tensor t(s);
  for (int64_t i = 0; i < t.numel(); ++i)
    t[i] = scale * static_cast<float>(rng.normal());
  return t;
}

// One mid-size convolution from the encoder trunk: 16ch, 16^3, k=3.
void bm_conv3d_forward(benchmark::State& state) {
  RngStream rng(1);
  Tensor x = randn(rng, {1, 16, 16, 16, 16});
  Tensor w = randn(rng, {16, 16, 3, 3, 3}, 0.1f);
  Tensor b = Tensor::zeros({16});
  ag::NoGradGuard ng;
  for (auto _ : state) {
    ag::Var y = ag::conv3d(ag::constant(x.clone()), ag::constant(w.clone()),
                           ag::constant(b.clone()), 1, 1);
    benchmark::DoNotOptimize(y->value.data());
  }
}
BENCHMARK(bm_conv3d_forward)->Unit(benchmark::kMillisecond);

// Full 12+2-layer denoiser forward on a 64-token latent with conditioning.
void bm_denoise_forward(benchmark::State& state) {
  DenoiserConfig dc;
  dc.patch_size = 1;
  dc.token_dim = 96;
  dc.n_decoder_layers = 2;
  dc.n_heads = 4;
  dc.ffn_dim = 192;
  dc.cond_feature_dims = {4, 8};
  dc.null_tokens = 4;
  Denoiser dn(dc, {8, 4, 4, 4}, 16, 7);
  RngStream rng(2);
  Tensor z = randn(rng, {1, 8, 4, 4, 4});
  Tensor c = randn(rng, {1, 1, 16, 16});
  ag::NoGradGuard ng;
  ag::Var cond = dn.encode_condition(ag::constant(c));
  for (auto _ : state) {
    ag::Var eps =
        dn.denoise_graph(ag::constant(z.clone()), {5}, cond, nullptr);
    benchmark::DoNotOptimize(eps->value.data());
  }
}
BENCHMARK(bm_denoise_forward)->Unit(benchmark::kMillisecond);

// T=50 ancestral sampling through the same denoiser (null condition).
void bm_sample_loop(benchmark::State& state) {
  DenoiserConfig dc;
  dc.patch_size = 1;
  dc.token_dim = 96;
  dc.n_decoder_layers = 2;
  dc.n_heads = 4;
  dc.ffn_dim = 192;
  dc.cond_feature_dims = {4, 8};
  dc.null_tokens = 4;
  Denoiser dn(dc, {8, 4, 4, 4}, 16, 7);
  auto sch = diff::make_schedule<float>(
      diff::DiffusionConfig{50, "linear", 1e-4, 0.2, "epsilon"});
  ag::NoGradGuard ng;
  ag::Var cond = dn.null_condition(1);
  diff::DenoiseFn fn = [&](const Tensor& z_t, int t) {
    ag::Var z = ag::constant(z_t.clone().reshaped({1, 8, 4, 4, 4}));
    return dn.denoise_graph(z, {t}, cond, nullptr)
        ->value.reshaped({8, 4, 4, 4});
  };
  uint64_t seed = 0;
  for (auto _ : state) {
    Tensor z0 = diff::sample_loop(fn, {8, 4, 4, 4}, sch, seed++);
    benchmark::DoNotOptimize(z0.data());
  }
}
BENCHMARK(bm_sample_loop)->Unit(benchmark::kMillisecond);

// Windowed SSIM over a 32^3 pair.
void bm_ssim3d(benchmark::State& state) {
  PhantomSpec spec;
  spec.L = spec.W = spec.H = 32;
  spec.n_regions = 8;
  spec.n_components = 16;
  spec.seed = 3;
  auto [a, fa] = generate_phantom(spec, 0);
  auto [b, fb] = generate_phantom(spec, 1);
  for (auto _ : state) {
    double s = ssim3d(a, b);
    benchmark::DoNotOptimize(s);
  }
}
BENCHMARK(bm_ssim3d)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
