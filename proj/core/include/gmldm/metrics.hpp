// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
//
// Similarity metrics for generated volumes (Pearson over voxels, local
// 7^3-window SSIM) and the FNC-guided vs random-guided difference saliency
// analysis over the synthetic atlas.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "gmldm/volumes.hpp"

namespace gmldm {

// Product-moment correlation over flattened voxels; double accumulation.
// Constant input (either side) is an undefined correlation and throws.
double pearson(std::span<const float> a, std::span<const float> b);
double pearson(const Volume3D& a, const Volume3D& b);
// Foreground-only variant: voxels where mask > 0.5 participate.
double pearson_masked(const Volume3D& a, const Volume3D& b,
                      const Volume3D& mask);

struct SsimOptions {
  int window = 7;
  // K1=0.01, K2=0.03 on dynamic range 1.0
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
};

// Mean local SSIM over all valid sliding window positions with uniform
// weighting. Volume dims must each be >= window.
double ssim3d(const Volume3D& a, const Volume3D& b, SsimOptions opt = {});

struct SubjectMetrics {
  std::string subject_id;
  double pearson = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  double pearson = 0.0;  // mean over subjects
  double ssim = 0.0;
  int64_t n_voxels = 0;
  std::vector<SubjectMetrics> subjects;
};

MetricReport evaluate_pairs(const std::vector<Volume3D>& real,
                            const std::vector<Volume3D>& generated,
                            const std::vector<std::string>& subject_ids);
void write_metric_report(const std::filesystem::path& csv_path,
                         const MetricReport& report);

struct SaliencyMap {
  Volume3D map;  // voxelwise |mean(fnc) - mean(random)|, nonnegative
  std::vector<double> region_scores;  // indexed by region id
  std::vector<int> ranking;           // region ids, descending score
};

// Voxelwise absolute difference of per-list means, scored per atlas region.
SaliencyMap difference_saliency(const std::vector<Volume3D>& fnc_samples,
                                const std::vector<Volume3D>& random_samples,
                                const Volume3D& atlas, int n_regions);

void write_region_ranking(const std::filesystem::path& csv_path,
                          const SaliencyMap& sal);

}  // namespace gmldm
