// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
#include "gmldm/diffusion.hpp"

#include "gmldm/io.hpp"
#include "gmldm/rng.hpp"

namespace gmldm::diff {

Tensor forward_sample(const Tensor& z0, int t, const Tensor& eps,
                      const NoiseSchedule<float>& sch) {
  if (z0.shape() != eps.shape())
    throw ValidationError("forward_sample: z0/eps shape mismatch");
  Tensor out(z0.shape());
  forward_sample(z0.data(), eps.data(), z0.numel(), t, sch, out.data());
  return out;
}

TrainTarget train_target(const Tensor& z0, int t, const Tensor& eps,
                         const NoiseSchedule<float>& sch) {
  return TrainTarget{forward_sample(z0, t, eps, sch), eps.clone()};
}

Tensor sample_loop(const DenoiseFn& denoise_fn, const Shape& latent_shape,
                   const NoiseSchedule<float>& sch, uint64_t seed) {
  RngStream rng(derive_seed(seed, "sample-loop", 0));
  Tensor z(latent_shape);
  rng.fill_normal(std::span<float>(z.data(), static_cast<size_t>(z.numel())));
  Tensor noise(latent_shape);
  Tensor next(latent_shape);
  for (int t = sch.T(); t >= 1; --t) {
    Tensor eps_hat = denoise_fn(z, t);
    if (eps_hat.shape() != z.shape())
      throw NumericsError("sample_loop: denoiser returned shape " +
                          shape_str(eps_hat.shape()) + ", expected " +
                          shape_str(z.shape()) + " at t=" + std::to_string(t));
    if (!eps_hat.all_finite())
      throw NumericsError("sample_loop: denoiser returned non-finite values "
                          "at t=" + std::to_string(t));
    if (t > 1)
      rng.fill_normal(
          std::span<float>(noise.data(), static_cast<size_t>(noise.numel())));
    reverse_step(z.data(), eps_hat.data(), t > 1 ? noise.data() : nullptr,
                 z.numel(), t, sch, next.data());
    std::swap(z, next);
  }
  return z;
}

void dump_schedule_csv(const NoiseSchedule<float>& sch,
                       const std::filesystem::path& path) {
  io::CsvWriter csv(path, {"t", "beta", "alpha", "alpha_bar"});
  for (int t = 1; t <= sch.T(); ++t)
    csv.row({std::to_string(t), io::fmt_g9(sch.beta(t)),
             io::fmt_g9(sch.alpha(t)), io::fmt_g9(sch.alpha_bar(t))});
}

}  // namespace gmldm::diff
