// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
#include "gmldm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gmldm/errors.hpp"
#include "gmldm/io.hpp"

namespace gmldm {

double pearson(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size() || a.empty())
    throw ValidationError("pearson: length mismatch or empty input");
  const size_t n = a.size();
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0)
    throw ValidationError(
        "pearson: correlation undefined for a constant input");
  return sab / std::sqrt(saa * sbb);
}

double pearson(const Volume3D& a, const Volume3D& b) {
  if (a.L != b.L || a.W != b.W || a.H != b.H)
    throw ValidationError("pearson: volume shape mismatch");
  return pearson(std::span<const float>(a.voxels),
                 std::span<const float>(b.voxels));
}

double pearson_masked(const Volume3D& a, const Volume3D& b,
                      const Volume3D& mask) {
  if (a.L != b.L || a.W != b.W || a.H != b.H || a.L != mask.L ||
      a.W != mask.W || a.H != mask.H)
    throw ValidationError("pearson_masked: shape mismatch");
  std::vector<float> fa, fb;
  for (size_t i = 0; i < mask.voxels.size(); ++i)
    if (mask.voxels[i] > 0.5f) {
      fa.push_back(a.voxels[i]);
      fb.push_back(b.voxels[i]);
    }
  if (fa.empty()) throw ValidationError("pearson_masked: empty mask");
  return pearson(std::span<const float>(fa), std::span<const float>(fb));
}

namespace {

// Inclusive 3-D prefix sums in double for O(1) window sums.
class IntegralVolume {
 public:
  IntegralVolume(const Volume3D& v, bool square, const Volume3D* other)
      : L(v.L), W(v.W), H(v.H), s_(static_cast<size_t>((L + 1) * (W + 1) *
                                                       (H + 1)),
                                   0.0) {
    for (int64_t x = 0; x < L; ++x)
      for (int64_t y = 0; y < W; ++y)
        for (int64_t z = 0; z < H; ++z) {
          double val;
          if (other)
            val = static_cast<double>(v.at(x, y, z)) * other->at(x, y, z);
          else if (square)
            val = static_cast<double>(v.at(x, y, z)) * v.at(x, y, z);
          else
            val = v.at(x, y, z);
          at(x + 1, y + 1, z + 1) =
              val + at(x, y + 1, z + 1) + at(x + 1, y, z + 1) +
              at(x + 1, y + 1, z) - at(x, y, z + 1) - at(x, y + 1, z) -
              at(x + 1, y, z) + at(x, y, z);
        }
  }

  // Sum over the closed voxel box [x0,x1) x [y0,y1) x [z0,z1).
  double box(int64_t x0, int64_t y0, int64_t z0, int64_t x1, int64_t y1,
             int64_t z1) const {
    return at(x1, y1, z1) - at(x0, y1, z1) - at(x1, y0, z1) - at(x1, y1, z0) +
           at(x0, y0, z1) + at(x0, y1, z0) + at(x1, y0, z0) - at(x0, y0, z0);
  }

 private:
  int64_t L, W, H;
  std::vector<double> s_;
  double& at(int64_t x, int64_t y, int64_t z) {
    return s_[static_cast<size_t>((x * (W + 1) + y) * (H + 1) + z)];
  }
  double at(int64_t x, int64_t y, int64_t z) const {
    return s_[static_cast<size_t>((x * (W + 1) + y) * (H + 1) + z)];
  }
};

}  // namespace

double ssim3d(const Volume3D& a, const Volume3D& b, SsimOptions opt) {
  if (a.L != b.L || a.W != b.W || a.H != b.H)
    throw ValidationError("ssim3d: shape mismatch");
  if (opt.window < 1)
    throw ValidationError("ssim3d: window must be positive");
  const int64_t w = opt.window;
  if (a.L < w || a.W < w || a.H < w)
    throw ValidationError("ssim3d: volume smaller than the " +
                          std::to_string(w) + "^3 window");
  a.validate();
  b.validate();

  IntegralVolume sa(a, false, nullptr), sb(b, false, nullptr);
  IntegralVolume saa(a, true, nullptr), sbb(b, true, nullptr);
  IntegralVolume sab(a, false, &b);

  const double n = static_cast<double>(w * w * w);
  double acc = 0.0;
  int64_t count = 0;
  for (int64_t x = 0; x + w <= a.L; ++x)
    for (int64_t y = 0; y + w <= a.W; ++y)
      for (int64_t z = 0; z + w <= a.H; ++z) {
        double mu_a = sa.box(x, y, z, x + w, y + w, z + w) / n;
        double mu_b = sb.box(x, y, z, x + w, y + w, z + w) / n;
        double var_a = saa.box(x, y, z, x + w, y + w, z + w) / n -
                       mu_a * mu_a;
        double var_b = sbb.box(x, y, z, x + w, y + w, z + w) / n -
                       mu_b * mu_b;
        double cov = sab.box(x, y, z, x + w, y + w, z + w) / n - mu_a * mu_b;
        double num = (2.0 * mu_a * mu_b + opt.c1) * (2.0 * cov + opt.c2);
        double den = (mu_a * mu_a + mu_b * mu_b + opt.c1) *
                     (var_a + var_b + opt.c2);
        acc += num / den;
        ++count;
      }
  return acc / static_cast<double>(count);
}

MetricReport evaluate_pairs(const std::vector<Volume3D>& real,
                            const std::vector<Volume3D>& generated,
                            const std::vector<std::string>& subject_ids) {
  if (real.size() != generated.size() || real.size() != subject_ids.size() ||
      real.empty())
    throw ValidationError("evaluate_pairs: list sizes must match, non-empty");
  MetricReport rep;
  rep.n_voxels = real.front().numel();
  for (size_t i = 0; i < real.size(); ++i) {
    SubjectMetrics m;
    m.subject_id = subject_ids[i];
    m.pearson = pearson(real[i], generated[i]);
    m.ssim = ssim3d(real[i], generated[i]);
    rep.pearson += m.pearson;
    rep.ssim += m.ssim;
    rep.subjects.push_back(std::move(m));
  }
  rep.pearson /= static_cast<double>(real.size());
  rep.ssim /= static_cast<double>(real.size());
  return rep;
}

void write_metric_report(const std::filesystem::path& csv_path,
                         const MetricReport& report) {
  io::CsvWriter csv(csv_path, {"subject_id", "pearson", "ssim"});
  for (const auto& s : report.subjects)
    csv.row({s.subject_id, io::fmt_g9(s.pearson), io::fmt_g9(s.ssim)});
  csv.row({"mean", io::fmt_g9(report.pearson), io::fmt_g9(report.ssim)});
}

SaliencyMap difference_saliency(const std::vector<Volume3D>& fnc_samples,
                                const std::vector<Volume3D>& random_samples,
                                const Volume3D& atlas, int n_regions) {
  if (fnc_samples.empty() || random_samples.empty())
    throw ValidationError("difference_saliency: sample lists must be "
                          "non-empty");
  const Volume3D& ref = fnc_samples.front();
  auto check = [&](const Volume3D& v) {
    if (v.L != ref.L || v.W != ref.W || v.H != ref.H)
      throw ValidationError("difference_saliency: sample shape mismatch");
  };
  for (const auto& v : fnc_samples) check(v);
  for (const auto& v : random_samples) check(v);
  check(atlas);

  SaliencyMap out;
  out.map = Volume3D(ref.L, ref.W, ref.H);
  const size_t n = out.map.voxels.size();
  std::vector<double> mean_f(n, 0.0), mean_r(n, 0.0);
  for (const auto& v : fnc_samples)
    for (size_t i = 0; i < n; ++i) mean_f[i] += v.voxels[i];
  for (const auto& v : random_samples)
    for (size_t i = 0; i < n; ++i) mean_r[i] += v.voxels[i];
  for (size_t i = 0; i < n; ++i)
    out.map.voxels[i] = static_cast<float>(
        std::abs(mean_f[i] / static_cast<double>(fnc_samples.size()) -
                 mean_r[i] / static_cast<double>(random_samples.size())));

  out.region_scores = region_means(out.map, atlas, n_regions);
  out.ranking.resize(static_cast<size_t>(n_regions));
  std::iota(out.ranking.begin(), out.ranking.end(), 0);
  std::stable_sort(out.ranking.begin(), out.ranking.end(),
                   [&](int lhs, int rhs) {
                     return out.region_scores[static_cast<size_t>(lhs)] >
                            out.region_scores[static_cast<size_t>(rhs)];
                   });
  return out;
}

void write_region_ranking(const std::filesystem::path& csv_path,
                          const SaliencyMap& sal) {
  io::CsvWriter csv(csv_path, {"rank", "region", "mean_saliency"});
  for (size_t i = 0; i < sal.ranking.size(); ++i) {
    int r = sal.ranking[i];
    csv.row({std::to_string(i + 1), std::to_string(r),
             io::fmt_g9(sal.region_scores[static_cast<size_t>(r)])});
  }
}

}  // namespace gmldm
