// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
//
// Schedule algebra, kernel identities, and the two diffusion oracle suites:
// Gaussian closure (stepwise composition vs closed-form marginal) and
// oracle-epsilon inversion (reverse chain recovers z0 to 1e-8 in double).
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gmldm/diffusion.hpp"
#include "gmldm/io.hpp"
#include "gmldm/rng.hpp"

using namespace gmldm;
using namespace gmldm::diff;
namespace fs = std::filesystem;

namespace {
DiffusionConfig cfg(int T, double b0, double b1) {
  DiffusionConfig c;
  c.T = T;
  c.beta_start = b0;
  c.beta_end = b1;
  return c;
}

// Five schedules spanning short/long chains and mild/aggressive noise.
std::vector<DiffusionConfig> oracle_configs() {
  return {cfg(50, 1e-4, 0.2), cfg(10, 0.01, 0.1), cfg(37, 5e-4, 0.15),
          cfg(25, 1e-3, 0.3), cfg(50, 1e-2, 0.02)};
}
}  // namespace

TEST_CASE("make_schedule: hand-derived values and invariants") {
  {
    auto s = make_schedule<double>(cfg(1, 0.1, 0.1));
    REQUIRE(s.T() == 1);
    CHECK(s.beta(1) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(s.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-15));
  }
  {
    auto s = make_schedule<double>(cfg(2, 0.5, 0.5));
    CHECK(s.alpha_bar(1) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(s.alpha_bar(2) == doctest::Approx(0.25).epsilon(1e-15));
  }
  for (auto& c : oracle_configs()) {
    auto s = make_schedule<double>(c);
    CHECK(s.alpha_bar(s.T()) < s.alpha_bar(1));
    s.validate();
  }
  // the desk default must end near pure noise
  auto desk = make_schedule<double>(desk_config());
  CHECK(desk.alpha_bar(desk.T()) < 0.01);

  CHECK_THROWS_AS(make_schedule<double>(cfg(5, 0.2, 0.1)), ValidationError);
  CHECK_THROWS_AS(make_schedule<double>(cfg(5, 0.0, 0.1)), ValidationError);
  CHECK_THROWS_AS(make_schedule<double>(cfg(0, 0.1, 0.2)), ValidationError);

  auto bad = make_schedule<double>(cfg(4, 0.01, 0.1));
  bad.alpha_bars[2] += 1e-6;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("forward_step and forward_sample scalar identities") {
  auto s = make_schedule<double>(cfg(2, 0.25, 0.5));
  double z_prev = 0.0, eps = 1.0, z_t = 0.0;
  forward_step(&z_prev, &eps, 1, 1, s, &z_t);
  CHECK(z_t == doctest::Approx(0.5).epsilon(1e-15));  // sqrt(beta)=0.5

  double z1 = 3.0, eps0 = 0.0;
  forward_step(&z1, &eps0, 1, 1, s, &z_t);
  CHECK(z_t == doctest::Approx(3.0 * std::sqrt(0.75)).epsilon(1e-15));

  auto s2 = make_schedule<double>(cfg(2, 0.5, 0.5));  // abar_2 = 0.25
  double z0 = 1.0;
  forward_sample(&z0, &eps0, 1, 2, s2, &z_t);
  CHECK(z_t == doctest::Approx(0.5).epsilon(1e-15));

  // tiny beta at t=1: z_t ~ z0
  auto s3 = make_schedule<double>(cfg(10, 1e-6, 1e-5));
  forward_sample(&z0, &eps0, 1, 1, s3, &z_t);
  CHECK(z_t == doctest::Approx(1.0).epsilon(1e-5));

  CHECK_THROWS_AS(forward_sample(&z0, &eps0, 1, 11, s3, &z_t),
                  ValidationError);
  CHECK_THROWS_AS(forward_step(&z0, &eps0, 1, 0, s3, &z_t), ValidationError);
}

TEST_CASE("oracle: Gaussian closure of stepwise composition vs marginal") {
  // Empirical mean/var of composed forward_steps must match the closed-form
  // marginal N(sqrt(abar_t) z0, 1-abar_t) within 4 standard errors.
  const int n = 10000;
  int cfg_idx = 0;
  for (auto& c : oracle_configs()) {
    auto s = make_schedule<double>(c);
    RngStream rng(derive_seed(99, "closure", static_cast<uint64_t>(cfg_idx)));
    int t = 1 + static_cast<int>(rng.uniform_int(0, s.T() - 1));
    double z0 = 1.7;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
      double z = z0;
      for (int step = 1; step <= t; ++step) {
        double eps = rng.normal();
        forward_step(&z, &eps, 1, step, s, &z);
      }
      sum += z;
      sum2 += z * z;
    }
    double mean = sum / n;
    double var = (sum2 - n * mean * mean) / (n - 1);
    double want_mean = std::sqrt(s.alpha_bar(t)) * z0;
    double want_var = 1.0 - s.alpha_bar(t);
    double se_mean = std::sqrt(want_var / n);
    double se_var = want_var * std::sqrt(2.0 / (n - 1));
    INFO("config ", cfg_idx, " t=", t);
    CHECK(std::abs(mean - want_mean) < 4.0 * se_mean);
    CHECK(std::abs(var - want_var) < 4.0 * se_var);
    ++cfg_idx;
  }
}

TEST_CASE("oracle: reverse chain with oracle epsilon recovers z0 to 1e-8") {
  int cfg_idx = 0;
  for (auto& c : oracle_configs()) {
    auto s = make_schedule<double>(c);
    RngStream rng(derive_seed(7, "invert", static_cast<uint64_t>(cfg_idx)));
    const int64_t n = 8;
    std::vector<double> z0(n), z(n), eps(n), eps_bar(n);
    std::vector<double> no_noise(n, 0.0);
    for (auto& v : z0) v = 2.0 * rng.uniform() - 1.0;
    for (int t : {1, s.T() / 2 + 1, s.T()}) {
      // noise the latent to level t with the closed-form marginal
      for (auto& v : eps) v = rng.normal();
      forward_sample(z0.data(), eps.data(), n, t, s, z.data());
      // walk back down, feeding the algebraically exact epsilon at each step
      for (int step = t; step >= 1; --step) {
        double a = std::sqrt(s.alpha_bar(step));
        double b = std::sqrt(1.0 - s.alpha_bar(step));
        for (int64_t i = 0; i < n; ++i)
          eps_bar[static_cast<size_t>(i)] =
              (z[static_cast<size_t>(i)] - a * z0[static_cast<size_t>(i)]) /
              b;
        reverse_step(z.data(), eps_bar.data(), no_noise.data(), n, step, s,
                     z.data());
      }
      for (int64_t i = 0; i < n; ++i) {
        INFO("config ", cfg_idx, " t=", t, " i=", i);
        CHECK(std::abs(z[static_cast<size_t>(i)] -
                       z0[static_cast<size_t>(i)]) < 1e-8);
      }
    }
    ++cfg_idx;
  }
}

TEST_CASE("reverse_step adds exactly beta_t of variance") {
  auto s = make_schedule<double>(cfg(20, 0.01, 0.2));
  RngStream rng(derive_seed(3, "revvar", 0));
  int t = 9;
  double z_t = 0.4, eps_hat = -0.3;
  const int n = 10000;
  double sum = 0, sum2 = 0;
  for (int i = 0; i < n; ++i) {
    double noise = rng.normal(), z_prev = 0.0;
    reverse_step(&z_t, &eps_hat, &noise, 1, t, s, &z_prev);
    sum += z_prev;
    sum2 += z_prev * z_prev;
  }
  double mean = sum / n;
  double var = (sum2 - n * mean * mean) / (n - 1);
  double want = s.beta(t);
  CHECK(std::abs(var - want) < 4.0 * want * std::sqrt(2.0 / (n - 1)));
  // mu itself: z=0, eps_hat=0 -> 0
  double zero = 0.0, mu = 1.0;
  reverse_step(&zero, &zero, nullptr, 1, 1, s, &mu);
  CHECK(mu == 0.0);
  CHECK_THROWS_AS(reverse_step(&z_t, &eps_hat, nullptr, 1, 5, s, &mu),
                  ValidationError);
}

TEST_CASE("train_target pairs the marginal sample with its epsilon") {
  auto s = make_schedule<float>(cfg(10, 0.01, 0.1));
  RngStream rng(derive_seed(4, "tt", 0));
  Tensor z0({2, 3});
  Tensor eps({2, 3});
  rng.fill_normal(std::span<float>(z0.data(), 6));
  rng.fill_normal(std::span<float>(eps.data(), 6));
  auto tt = train_target(z0, 4, eps, s);
  Tensor direct = forward_sample(z0, 4, eps, s);
  for (int64_t i = 0; i < 6; ++i) {
    CHECK(tt.target[i] == eps[i]);
    CHECK(tt.z_t[i] == direct[i]);
  }
}

TEST_CASE("sample_loop: determinism, T=1 algebra, error surfacing") {
  auto s = make_schedule<float>(desk_config());
  DenoiseFn zero_fn = [](const Tensor& z, int) {
    return Tensor::zeros(z.shape());
  };
  Tensor a = sample_loop(zero_fn, {2, 4}, s, 123);
  Tensor b = sample_loop(zero_fn, {2, 4}, s, 123);
  Tensor c = sample_loop(zero_fn, {2, 4}, s, 124);
  REQUIRE(a.shape() == Shape{2, 4});
  bool same = true, differs = false;
  for (int64_t i = 0; i < a.numel(); ++i) {
    same &= (a[i] == b[i]);
    differs |= (a[i] != c[i]);
  }
  CHECK(same);
  CHECK(differs);

  // T=1, f==0: z0_hat = z_T / sqrt(alpha_1); z_T reproduced from the stream
  auto s1 = make_schedule<float>(cfg(1, 0.1, 0.1));
  Tensor out = sample_loop(zero_fn, {5}, s1, 77);
  RngStream rng(derive_seed(77, "sample-loop", 0));
  Tensor zT({5});
  rng.fill_normal(std::span<float>(zT.data(), 5));
  for (int64_t i = 0; i < 5; ++i)
    CHECK(out[i] ==
          doctest::Approx(zT[i] / std::sqrt(0.9f)).epsilon(1e-6));

  DenoiseFn bad_shape = [](const Tensor&, int) { return Tensor::zeros({1}); };
  CHECK_THROWS_AS(sample_loop(bad_shape, {2, 4}, s, 1), NumericsError);
  DenoiseFn bad_val = [](const Tensor& z, int) {
    Tensor t = Tensor::zeros(z.shape());
    t[0] = std::nanf("");
    return t;
  };
  CHECK_THROWS_AS(sample_loop(bad_val, {2, 4}, s, 1), NumericsError);
}

TEST_CASE("schedule CSV dump is audit-ready") {
  auto s = make_schedule<float>(cfg(3, 0.1, 0.3));
  fs::path p = fs::temp_directory_path() / "gmldm-sched.csv";
  dump_schedule_csv(s, p);
  auto rows = io::read_csv(p);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0] == std::vector<std::string>{"t", "beta", "alpha",
                                            "alpha_bar"});
  CHECK(rows[1][0] == "1");
  CHECK(rows[2][1] == "0.200000003");  // float(0.2) printed at %.9g
}
