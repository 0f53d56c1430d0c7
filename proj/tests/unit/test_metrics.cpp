// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
//
// Metric oracles: Pearson against closed-form hand computations and affine
// invariance, SSIM against an independent direct-window re-implementation,
// and difference saliency against constructed single-region phantoms.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "gmldm/errors.hpp"
#include "gmldm/io.hpp"
#include "gmldm/metrics.hpp"
#include "gmldm/rng.hpp"
#include "gmldm/volumes.hpp"

using namespace gmldm;

namespace {

Volume3D random_volume(RngStream& rng, int64_t l, int64_t w, int64_t h,
                       float offset = 0.5f, float scale = 0.15f) {
  Volume3D v(l, w, h);
  rng.fill_normal(std::span<float>(v.voxels.data(), v.voxels.size()));
  for (auto& f : v.voxels) f = offset + scale * f;
  return v;
}

// Independent SSIM: direct window loops, no shared code with the library.
double ssim_direct(const Volume3D& a, const Volume3D& b, int w, double c1,
                   double c2) {
  double acc = 0.0;
  int64_t count = 0;
  for (int64_t x0 = 0; x0 + w <= a.L; ++x0)
    for (int64_t y0 = 0; y0 + w <= a.W; ++y0)
      for (int64_t z0 = 0; z0 + w <= a.H; ++z0) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (int64_t x = x0; x < x0 + w; ++x)
          for (int64_t y = y0; y < y0 + w; ++y)
            for (int64_t z = z0; z < z0 + w; ++z) {
              double va = a.at(x, y, z), vb = b.at(x, y, z);
              sa += va;
              sb += vb;
              saa += va * va;
              sbb += vb * vb;
              sab += va * vb;
            }
        double n = static_cast<double>(w) * w * w;
        double ma = sa / n, mb = sb / n;
        double va = saa / n - ma * ma, vb = sbb / n - mb * mb;
        double cov = sab / n - ma * mb;
        acc += ((2 * ma * mb + c1) * (2 * cov + c2)) /
               ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return acc / static_cast<double>(count);
}

}  // namespace

TEST_CASE("pearson: closed-form examples") {
  Volume3D a(4, 4, 4), b(4, 4, 4);
  RngStream rng(derive_seed(30, "pearson", 0));
  rng.fill_normal(std::span<float>(a.voxels.data(), a.voxels.size()));

  // identical non-constant volumes correlate exactly
  CHECK(pearson(a, a) == doctest::Approx(1.0).epsilon(1e-12));

  // negation flips the sign exactly
  for (size_t i = 0; i < a.voxels.size(); ++i) b.voxels[i] = -a.voxels[i];
  CHECK(pearson(a, b) == doctest::Approx(-1.0).epsilon(1e-12));

  // the [1,2,3,4] vs [2,4,5,4] toy: cov = 3.5, var_a = 5, var_b = 4.75,
  // r = 3.5 / sqrt(23.75); frozen against the definition in closed form
  std::vector<float> xs = {1, 2, 3, 4};
  std::vector<float> ys = {2, 4, 5, 4};
  double want = 3.5 / std::sqrt(5.0 * 4.75);
  CHECK(pearson(std::span<const float>(xs), std::span<const float>(ys)) ==
        doctest::Approx(want).epsilon(1e-12));

  // constant inputs are an error, never a silent zero
  Volume3D flat(4, 4, 4);
  for (auto& v : flat.voxels) v = 0.7f;
  CHECK_THROWS_AS(pearson(flat, a), ValidationError);
  CHECK_THROWS_AS(pearson(a, flat), ValidationError);

  Volume3D small(4, 4, 8);
  CHECK_THROWS_AS(pearson(a, small), ValidationError);
}

TEST_CASE("pearson is invariant under positive affine transforms") {
  // voxels quantized to 1/1024 and power-of-two scales keep the affine
  // transform exact in fp32, isolating the metric's own invariance
  RngStream rng(derive_seed(30, "pearson-affine", 0));
  Volume3D a = random_volume(rng, 6, 5, 7);
  Volume3D b = random_volume(rng, 6, 5, 7);
  for (auto& v : a.voxels) v = std::round(v * 1024.0f) / 1024.0f;
  for (auto& v : b.voxels) v = std::round(v * 1024.0f) / 1024.0f;
  double base = pearson(a, b);

  Volume3D bt = b;
  for (auto& v : bt.voxels) v = 2.0f * v + 0.25f;
  CHECK(std::abs(pearson(a, bt) - base) < 1e-10);

  Volume3D at = a;
  for (auto& v : at.voxels) v = 0.03125f * v - 1.75f;
  CHECK(std::abs(pearson(at, b) - base) < 1e-10);

  // negative scale flips the sign
  Volume3D bn = b;
  for (auto& v : bn.voxels) v = -4.0f * v + 1.0f;
  CHECK(std::abs(pearson(a, bn) + base) < 1e-10);
}

TEST_CASE("pearson_masked restricts to foreground voxels") {
  RngStream rng(derive_seed(30, "pearson-mask", 0));
  Volume3D a = random_volume(rng, 5, 5, 5);
  Volume3D b = random_volume(rng, 5, 5, 5);
  Volume3D mask(5, 5, 5);
  std::vector<float> fa, fb;
  for (size_t i = 0; i < mask.voxels.size(); ++i) {
    mask.voxels[i] = (i % 3 == 0) ? 1.0f : 0.0f;
    if (i % 3 == 0) {
      fa.push_back(a.voxels[i]);
      fb.push_back(b.voxels[i]);
    }
  }
  double want = pearson(std::span<const float>(fa),
                        std::span<const float>(fb));
  CHECK(pearson_masked(a, b, mask) == doctest::Approx(want).epsilon(1e-12));

  Volume3D empty_mask(5, 5, 5);
  CHECK_THROWS_AS(pearson_masked(a, b, empty_mask), ValidationError);
}

TEST_CASE("ssim3d: identity, shift penalty, symmetry") {
  RngStream rng(derive_seed(30, "ssim-id", 0));
  Volume3D a = random_volume(rng, 9, 8, 10);
  CHECK(std::abs(ssim3d(a, a) - 1.0) < 1e-9);

  // constant a, b = a + 0.1: structure/contrast terms cancel, luminance < 1
  Volume3D ca(8, 8, 8), cb(8, 8, 8);
  for (auto& v : ca.voxels) v = 0.4f;
  for (auto& v : cb.voxels) v = 0.5f;
  double shifted = ssim3d(ca, cb);
  CHECK(shifted < 1.0);
  CHECK(shifted > 0.0);

  Volume3D b = random_volume(rng, 9, 8, 10);
  CHECK(std::abs(ssim3d(a, b) - ssim3d(b, a)) < 1e-10);

  // range [-1, 1] on anti-correlated structure
  Volume3D neg = a;
  for (auto& v : neg.voxels) v = 1.0f - v;
  double s = ssim3d(a, neg);
  CHECK(s >= -1.0);
  CHECK(s < 1.0);

  Volume3D tiny(5, 5, 5);
  CHECK_THROWS_AS(ssim3d(tiny, tiny), ValidationError);
  CHECK_THROWS_AS(ssim3d(a, Volume3D(9, 8, 11)), ValidationError);
}

TEST_CASE("ssim3d matches the independent direct-window implementation") {
  RngStream rng(derive_seed(30, "ssim-oracle", 0));
  Volume3D a = random_volume(rng, 8, 8, 8);
  Volume3D b = random_volume(rng, 8, 8, 8);
  double got = ssim3d(a, b);
  double want = ssim_direct(a, b, 7, 0.01 * 0.01, 0.03 * 0.03);
  CHECK(std::abs(got - want) < 1e-7);

  // a non-cubic volume with more window positions
  Volume3D c = random_volume(rng, 12, 9, 10);
  Volume3D d = random_volume(rng, 12, 9, 10);
  CHECK(std::abs(ssim3d(c, d) -
                 ssim_direct(c, d, 7, 0.01 * 0.01, 0.03 * 0.03)) < 1e-7);

  // correlated pair (not near zero) to exercise the covariance path
  Volume3D e = c;
  for (size_t i = 0; i < e.voxels.size(); ++i)
    e.voxels[i] = 0.8f * c.voxels[i] + 0.05f * d.voxels[i];
  CHECK(std::abs(ssim3d(c, e) -
                 ssim_direct(c, e, 7, 0.01 * 0.01, 0.03 * 0.03)) < 1e-7);
}

TEST_CASE("evaluate_pairs aggregates and writes the report CSV") {
  RngStream rng(derive_seed(30, "eval-pairs", 0));
  std::vector<Volume3D> real, gen;
  std::vector<std::string> ids;
  for (int i = 0; i < 3; ++i) {
    real.push_back(random_volume(rng, 8, 8, 8));
    gen.push_back(i == 0 ? real.back() : random_volume(rng, 8, 8, 8));
    ids.push_back("s" + std::to_string(i));
  }
  MetricReport rep = evaluate_pairs(real, gen, ids);
  REQUIRE(rep.subjects.size() == 3);
  CHECK(rep.subjects[0].pearson == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rep.subjects[0].ssim == doctest::Approx(1.0).epsilon(1e-9));
  double mean_p = (rep.subjects[0].pearson + rep.subjects[1].pearson +
                   rep.subjects[2].pearson) /
                  3.0;
  CHECK(rep.pearson == doctest::Approx(mean_p).epsilon(1e-12));
  CHECK(rep.n_voxels == 512);

  auto dir = std::filesystem::temp_directory_path() / "gmldm-metrics";
  std::filesystem::create_directories(dir);
  auto path = dir / "report.csv";
  write_metric_report(path, rep);
  auto rows = io::read_csv(path);
  REQUIRE(rows.size() == 5);  // header + 3 subjects + mean
  CHECK(rows[0] == std::vector<std::string>{"subject_id", "pearson", "ssim"});
  CHECK(rows[4][0] == "mean");
}

TEST_CASE("difference_saliency: zero map for identical sets") {
  RngStream rng(derive_seed(30, "sal-zero", 0));
  PhantomSpec spec;
  spec.n_regions = 4;
  spec.L = spec.W = spec.H = 16;
  spec.n_components = 8;
  spec.seed = 31;
  Volume3D atlas = generate_atlas(spec);

  std::vector<Volume3D> samples;
  for (int i = 0; i < 3; ++i)
    samples.push_back(generate_phantom(spec, i).first);

  SaliencyMap sal = difference_saliency(samples, samples, atlas,
                                        spec.n_regions);
  for (float v : sal.map.voxels) CHECK(v == 0.0f);
  for (double s : sal.region_scores) CHECK(s == 0.0);
}

TEST_CASE("difference_saliency ranks the single coupled region first") {
  PhantomSpec coupled;
  coupled.n_regions = 6;
  coupled.L = 20;
  coupled.W = 24;
  coupled.H = 20;
  coupled.n_components = 12;
  coupled.coupling_strength = 1.0;
  coupled.coupled_region = 3;  // only region 3 tracks the FNC
  coupled.noise_sigma = 0.0;
  coupled.seed = 77;

  PhantomSpec uncoupled = coupled;
  uncoupled.coupling_strength = 0.0;

  std::vector<Volume3D> fnc_guided, random_guided;
  for (int i = 0; i < 8; ++i) {
    fnc_guided.push_back(generate_phantom(coupled, i).first);
    random_guided.push_back(generate_phantom(uncoupled, i).first);
  }
  Volume3D atlas = generate_atlas(coupled);

  SaliencyMap sal = difference_saliency(fnc_guided, random_guided, atlas,
                                        coupled.n_regions);
  REQUIRE(sal.ranking.size() == 6);
  CHECK(sal.ranking[0] == 3);
  CHECK(sal.region_scores[3] > 0.0);
  // the other regions are identical across both sets by construction
  for (int r = 0; r < 6; ++r)
    if (r != 3) CHECK(sal.region_scores[static_cast<size_t>(r)] == 0.0);

  // nonnegativity
  for (float v : sal.map.voxels) CHECK(v >= 0.0f);

  // region ranking CSV
  auto dir = std::filesystem::temp_directory_path() / "gmldm-metrics";
  std::filesystem::create_directories(dir);
  auto path = dir / "ranking.csv";
  write_region_ranking(path, sal);
  auto rows = io::read_csv(path);
  REQUIRE(rows.size() == 7);
  CHECK(rows[1][1] == "3");
}

TEST_CASE("difference_saliency: order invariance and weighted-mean identity") {
  RngStream rng(derive_seed(30, "sal-order", 0));
  PhantomSpec spec;
  spec.n_regions = 4;
  spec.L = spec.W = spec.H = 16;
  spec.n_components = 8;
  spec.seed = 13;
  Volume3D atlas = generate_atlas(spec);

  std::vector<Volume3D> fa, fb;
  for (int i = 0; i < 4; ++i) fa.push_back(generate_phantom(spec, i).first);
  for (int i = 4; i < 7; ++i) fb.push_back(generate_phantom(spec, i).first);

  SaliencyMap s1 = difference_saliency(fa, fb, atlas, spec.n_regions);
  std::vector<Volume3D> fa_shuffled = {fa[2], fa[0], fa[3], fa[1]};
  std::vector<Volume3D> fb_shuffled = {fb[1], fb[2], fb[0]};
  SaliencyMap s2 = difference_saliency(fa_shuffled, fb_shuffled, atlas,
                                       spec.n_regions);
  for (size_t i = 0; i < s1.map.voxels.size(); ++i)
    CHECK(s1.map.voxels[i] == s2.map.voxels[i]);

  // region-size-weighted mean of scores equals the masked mean of the map
  std::vector<int64_t> sizes(static_cast<size_t>(spec.n_regions), 0);
  double masked_sum = 0.0;
  int64_t masked_count = 0;
  for (size_t i = 0; i < atlas.voxels.size(); ++i) {
    if (atlas.voxels[i] < 0.0f) continue;
    sizes[static_cast<size_t>(atlas.voxels[i])] += 1;
    masked_sum += s1.map.voxels[i];
    masked_count += 1;
  }
  double weighted = 0.0;
  for (int r = 0; r < spec.n_regions; ++r)
    weighted += s1.region_scores[static_cast<size_t>(r)] *
                static_cast<double>(sizes[static_cast<size_t>(r)]);
  CHECK(std::abs(weighted / static_cast<double>(masked_count) -
                 masked_sum / static_cast<double>(masked_count)) < 1e-9);

  // shape mismatch and empty-list errors
  std::vector<Volume3D> bad = {Volume3D(8, 8, 8)};
  CHECK_THROWS_AS(difference_saliency(fa, bad, atlas, spec.n_regions),
                  ValidationError);
  CHECK_THROWS_AS(difference_saliency({}, fb, atlas, spec.n_regions),
                  ValidationError);
}
