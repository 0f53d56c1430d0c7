// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
//
// DDPM machinery: linear beta schedule, forward kernel and its closed-form
// marginal, fixed-variance reverse step, epsilon-prediction targets, and the
// ancestral sampling loop. Kernels are templated on the scalar type: float
// for training, double for the tight-tolerance inversion oracles.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include "gmldm/errors.hpp"
#include "gmldm/tensor.hpp"

namespace gmldm::diff {

struct DiffusionConfig {
  int T = 1000;
  std::string schedule = "linear";
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::string prediction = "epsilon";

  void validate() const {
    if (T < 1) throw ValidationError("DiffusionConfig: T >= 1");
    if (schedule != "linear")
      throw ValidationError("DiffusionConfig: unknown schedule '" + schedule +
                            "'");
    if (prediction != "epsilon")
      throw ValidationError("DiffusionConfig: unknown prediction target '" +
                            prediction + "'");
    if (!(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 &&
          beta_end < 1.0))
      throw ValidationError("DiffusionConfig: betas must lie in (0,1)");
    if (beta_start > beta_end)
      throw ValidationError("DiffusionConfig: beta_start <= beta_end");
  }
};

// Desk-scale default: T=50 with beta_end raised so alpha_bar_T < 0.01 and
// the chain still ends at near-pure noise.
inline DiffusionConfig desk_config() {
  return DiffusionConfig{50, "linear", 1e-4, 0.2, "epsilon"};
}

template <typename S>
struct NoiseSchedule {
  std::vector<S> betas, alphas, alpha_bars;

  int T() const { return static_cast<int>(betas.size()); }
  // t is 1-indexed per the z_0..z_T convention
  S beta(int t) const { return betas[check(t)]; }
  S alpha(int t) const { return alphas[check(t)]; }
  S alpha_bar(int t) const { return alpha_bars[check(t)]; }

  size_t check(int t) const {
    if (t < 1 || t > T())
      throw ValidationError("timestep " + std::to_string(t) +
                            " out of [1, " + std::to_string(T()) + "]");
    return static_cast<size_t>(t - 1);
  }

  void validate() const {
    if (betas.empty() || alphas.size() != betas.size() ||
        alpha_bars.size() != betas.size())
      throw ValidationError("NoiseSchedule: array sizes disagree");
    // Markov consistency abar_t = abar_{t-1} * alpha_t must hold to within
    // one rounding of the scalar type: < 1e-15 for double (inside the 1e-12
    // contract the oracle suite checks), ~1e-6 for float.
    const double tol = 8.0 * static_cast<double>(
                                 std::numeric_limits<S>::epsilon());
    long double run = 1.0L;
    for (size_t i = 0; i < betas.size(); ++i) {
      if (!(betas[i] > S(0) && betas[i] < S(1)))
        throw ValidationError("NoiseSchedule: beta out of (0,1)");
      if (std::abs(static_cast<double>(alphas[i]) -
                   (1.0 - static_cast<double>(betas[i]))) > tol)
        throw ValidationError("NoiseSchedule: alpha != 1 - beta");
      run *= static_cast<long double>(alphas[i]);
      if (std::abs(static_cast<double>(
              static_cast<long double>(alpha_bars[i]) - run)) > tol)
        throw ValidationError("NoiseSchedule: alpha_bar inconsistent");
      if (i > 0 && !(alpha_bars[i] < alpha_bars[i - 1]))
        throw ValidationError("NoiseSchedule: alpha_bar not decreasing");
      run = static_cast<long double>(alpha_bars[i]);
    }
  }
};

template <typename S>
NoiseSchedule<S> make_schedule(const DiffusionConfig& cfg) {
  cfg.validate();
  NoiseSchedule<S> s;
  s.betas.resize(static_cast<size_t>(cfg.T));
  s.alphas.resize(static_cast<size_t>(cfg.T));
  s.alpha_bars.resize(static_cast<size_t>(cfg.T));
  long double run = 1.0L;
  for (int t = 0; t < cfg.T; ++t) {
    double frac = cfg.T > 1 ? static_cast<double>(t) / (cfg.T - 1) : 0.0;
    double beta = cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac;
    s.betas[static_cast<size_t>(t)] = static_cast<S>(beta);
    s.alphas[static_cast<size_t>(t)] = static_cast<S>(1.0 - beta);
    run *= static_cast<long double>(s.alphas[static_cast<size_t>(t)]);
    s.alpha_bars[static_cast<size_t>(t)] = static_cast<S>(run);
    run = static_cast<long double>(s.alpha_bars[static_cast<size_t>(t)]);
  }
  s.validate();
  return s;
}

// z_t = sqrt(1-beta_t) * z_{t-1} + sqrt(beta_t) * eps
template <typename S>
void forward_step(const S* z_prev, const S* eps, int64_t n, int t,
                  const NoiseSchedule<S>& sch, S* z_t) {
  S a = std::sqrt(S(1) - sch.beta(t));
  S b = std::sqrt(sch.beta(t));
  for (int64_t i = 0; i < n; ++i) z_t[i] = a * z_prev[i] + b * eps[i];
}

// Closed-form marginal: z_t = sqrt(abar_t) * z0 + sqrt(1-abar_t) * eps
template <typename S>
void forward_sample(const S* z0, const S* eps, int64_t n, int t,
                    const NoiseSchedule<S>& sch, S* z_t) {
  S a = std::sqrt(sch.alpha_bar(t));
  S b = std::sqrt(S(1) - sch.alpha_bar(t));
  for (int64_t i = 0; i < n; ++i) z_t[i] = a * z0[i] + b * eps[i];
}

// mu = (z_t - beta_t/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t);
// z_{t-1} = mu + sqrt(beta_t) * noise for t > 1, mu for t = 1.
// noise may be null when t == 1.
template <typename S>
void reverse_step(const S* z_t, const S* eps_hat,
                  std::type_identity_t<const S*> noise, int64_t n, int t,
                  const NoiseSchedule<S>& sch, S* z_prev) {
  S inv_sqrt_a = S(1) / std::sqrt(sch.alpha(t));
  S coef = sch.beta(t) / std::sqrt(S(1) - sch.alpha_bar(t));
  S sigma = t > 1 ? std::sqrt(sch.beta(t)) : S(0);
  if (t > 1 && noise == nullptr)
    throw ValidationError("reverse_step: noise required for t > 1");
  for (int64_t i = 0; i < n; ++i) {
    S mu = inv_sqrt_a * (z_t[i] - coef * eps_hat[i]);
    z_prev[i] = (t > 1) ? mu + sigma * noise[i] : mu;
  }
}

// Float tensor conveniences used by the training loops.
Tensor forward_sample(const Tensor& z0, int t, const Tensor& eps,
                      const NoiseSchedule<float>& sch);

struct TrainTarget {
  Tensor z_t;
  Tensor target;  // equals the eps that produced z_t
};
TrainTarget train_target(const Tensor& z0, int t, const Tensor& eps,
                         const NoiseSchedule<float>& sch);

// denoise_fn(z_t, t) -> eps_hat; conditioning is bound inside the closure.
using DenoiseFn = std::function<Tensor(const Tensor&, int)>;

// Ancestral sampling from z_T ~ N(0,I); deterministic per seed. Throws
// NumericsError if the denoiser emits a wrong shape or non-finite values.
Tensor sample_loop(const DenoiseFn& denoise_fn, const Shape& latent_shape,
                   const NoiseSchedule<float>& sch, uint64_t seed);

// Audit dump: CSV with columns t, beta, alpha, alpha_bar.
void dump_schedule_csv(const NoiseSchedule<float>& sch,
                       const std::filesystem::path& path);

}  // namespace gmldm::diff
