// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic paired data: ellipsoid-phantom volumes whose regional intensity
// is an affine function of the paired connectivity matrix's row-sums, plus
// bit-exact .vol/.fnc file I/O and the dataset manifest.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gmldm/tensor.hpp"

namespace gmldm {

// Dense voxel grid. Storage is x-fastest: index = x + L*(y + W*z).
struct Volume3D {
  int64_t L = 0, W = 0, H = 0;
  std::vector<float> voxels;

  Volume3D() = default;
  Volume3D(int64_t l, int64_t w, int64_t h);

  int64_t numel() const { return L * W * H; }
  float& at(int64_t x, int64_t y, int64_t z) {
    return voxels[static_cast<size_t>(x + L * (y + W * z))];
  }
  float at(int64_t x, int64_t y, int64_t z) const {
    return voxels[static_cast<size_t>(x + L * (y + W * z))];
  }
  // throws ValidationError on non-finite entries or dims < 4
  void validate() const;
};

// Symmetric correlation matrix with unit diagonal, row-major K×K.
struct FNCMatrix {
  int64_t K = 0;
  std::vector<float> data;

  FNCMatrix() = default;
  explicit FNCMatrix(int64_t k);

  float& at(int64_t i, int64_t j) {
    return data[static_cast<size_t>(i * K + j)];
  }
  float at(int64_t i, int64_t j) const {
    return data[static_cast<size_t>(i * K + j)];
  }
  // symmetry within 1e-9, unit diagonal, off-diagonal in [-1,1],
  // eigenvalues >= -1e-8 (checked in double precision)
  void validate() const;
  Tensor tensor() const;  // shape {K,K}
};

enum class GroupLabel { control, patient };
std::string to_string(GroupLabel g);
GroupLabel group_from_string(const std::string& s);

struct PhantomSpec {
  int n_regions = 8;
  int64_t L = 48, W = 56, H = 48;
  double coupling_strength = 0.8;  // in [0,1]
  double noise_sigma = 0.02;
  uint64_t seed = 0;
  int n_components = 53;   // K of the paired FNC
  int coupled_region = -1;  // -1: all regions track the FNC; r: only region r

  void validate() const;
};

// Deterministic region-label volume for the spec's fixed ellipsoid template.
// Voxel value = region id (0..n_regions-1) or -1 for background.
Volume3D generate_atlas(const PhantomSpec& spec);

// Pure function of (spec, subject_index); alternating control/patient groups.
std::pair<Volume3D, FNCMatrix> generate_phantom(const PhantomSpec& spec,
                                                int64_t subject_index);
bool is_patient(const PhantomSpec& spec, int64_t subject_index);

// Mean off-diagonal entry per row, the quantity regional intensity tracks.
std::vector<double> fnc_rowsums(const FNCMatrix& m);

// Mean voxel intensity per region id under the atlas labels.
std::vector<double> region_means(const Volume3D& v, const Volume3D& atlas,
                                 int n_regions);

// Raw f32le payload + JSON sidecar at <path>.json. Round-trip bitwise.
void save_volume(const Volume3D& v, const std::filesystem::path& path);
Volume3D load_volume(const std::filesystem::path& path);
void save_fnc(const FNCMatrix& m, const std::filesystem::path& path);
FNCMatrix load_fnc(const std::filesystem::path& path);

// Upper triangle (excluding diagonal) flattened row-major, length K(K-1)/2.
std::vector<float> vectorize_fnc(const FNCMatrix& m);

// i.i.d. standard-normal K×K array, lower triangle mirrored from the upper so
// every off-diagonal marginal stays N(0,1); diagonal set to 1.
Tensor random_condition(const FNCMatrix& reference, uint64_t seed);

struct ManifestEntry {
  std::string volume_path;
  std::string fnc_path;
  std::string subject_id;
  GroupLabel group = GroupLabel::control;
};

struct DatasetManifest {
  uint64_t seed = 0;
  PhantomSpec spec;
  std::vector<ManifestEntry> entries;
  // directory entry paths are relative to; set by load(), not serialized
  std::filesystem::path root;

  std::filesystem::path volume_file(size_t i) const {
    return root / entries.at(i).volume_path;
  }
  std::filesystem::path fnc_file(size_t i) const {
    return root / entries.at(i).fnc_path;
  }

  void save(const std::filesystem::path& path) const;
  // verifies path uniqueness and that every referenced file exists
  static DatasetManifest load(const std::filesystem::path& path);
};

}  // namespace gmldm
