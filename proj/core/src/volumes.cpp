// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
#include "gmldm/volumes.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>

#include "gmldm/errors.hpp"
#include "gmldm/io.hpp"
#include "gmldm/rng.hpp"

namespace gmldm {

namespace fs = std::filesystem;

Volume3D::Volume3D(int64_t l, int64_t w, int64_t h) : L(l), W(w), H(h) {
  if (l < 4 || w < 4 || h < 4)
    throw ValidationError("Volume3D dims must each be >= 4, got " +
                          std::to_string(l) + "x" + std::to_string(w) + "x" +
                          std::to_string(h));
  voxels.assign(static_cast<size_t>(numel()), 0.0f);
}

void Volume3D::validate() const {
  if (L < 4 || W < 4 || H < 4)
    throw ValidationError("Volume3D dims must each be >= 4");
  if (voxels.size() != static_cast<size_t>(numel()))
    throw ValidationError("Volume3D buffer size does not match shape");
  for (float v : voxels)
    if (!std::isfinite(v))
      throw ValidationError("Volume3D contains non-finite voxels");
}

FNCMatrix::FNCMatrix(int64_t k) : K(k) {
  if (k < 2) throw ValidationError("FNCMatrix needs K >= 2");
  data.assign(static_cast<size_t>(k * k), 0.0f);
  for (int64_t i = 0; i < k; ++i) at(i, i) = 1.0f;
}

void FNCMatrix::validate() const {
  if (K < 2 || data.size() != static_cast<size_t>(K * K))
    throw ValidationError("FNCMatrix malformed shape");
  for (int64_t i = 0; i < K; ++i) {
    if (at(i, i) != 1.0f)
      throw ValidationError("FNCMatrix diagonal must be exactly 1");
    for (int64_t j = 0; j < K; ++j) {
      float v = at(i, j);
      if (!std::isfinite(v))
        throw ValidationError("FNCMatrix has non-finite entries");
      if (i != j && (v < -1.0f || v > 1.0f))
        throw ValidationError("FNCMatrix off-diagonal entry out of [-1,1]");
      if (std::abs(static_cast<double>(v) - at(j, i)) > 1e-9)
        throw ValidationError("FNCMatrix not symmetric within 1e-9");
    }
  }
  Eigen::MatrixXd m(K, K);
  for (int64_t i = 0; i < K; ++i)
    for (int64_t j = 0; j < K; ++j) m(i, j) = at(i, j);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m,
                                                    Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < -1e-8)
    throw ValidationError("FNCMatrix not positive semi-definite");
}

Tensor FNCMatrix::tensor() const {
  Tensor t({K, K});
  std::copy(data.begin(), data.end(), t.data());
  return t;
}

std::string to_string(GroupLabel g) {
  return g == GroupLabel::control ? "control" : "patient";
}

GroupLabel group_from_string(const std::string& s) {
  if (s == "control") return GroupLabel::control;
  if (s == "patient") return GroupLabel::patient;
  throw ValidationError("unknown group label: " + s);
}

void PhantomSpec::validate() const {
  if (n_regions < 2) throw ValidationError("PhantomSpec: n_regions >= 2");
  if (L < 4 || W < 4 || H < 4)
    throw ValidationError("PhantomSpec: shape dims must each be >= 4");
  if (coupling_strength < 0.0 || coupling_strength > 1.0)
    throw ValidationError("PhantomSpec: coupling_strength in [0,1]");
  if (noise_sigma < 0.0) throw ValidationError("PhantomSpec: noise_sigma >= 0");
  if (n_components < n_regions)
    throw ValidationError(
        "PhantomSpec: n_components must be >= n_regions so every region has "
        "an FNC row");
  if (coupled_region < -1 || coupled_region >= n_regions)
    throw ValidationError("PhantomSpec: coupled_region in [-1, n_regions)");
}

// ----------------------------------------------------------------- phantom

namespace {

struct Ellipsoid {
  double cx, cy, cz, rx, ry, rz;
};

// Fixed template: regions on a regular grid filling the volume, radii 35% of
// the cell so neighbours never touch.
std::vector<Ellipsoid> region_template(const PhantomSpec& spec) {
  int g = 1;
  while (g * g * g < spec.n_regions) ++g;
  double cell_x = static_cast<double>(spec.L) / g;
  double cell_y = static_cast<double>(spec.W) / g;
  double cell_z = static_cast<double>(spec.H) / g;
  std::vector<Ellipsoid> out;
  for (int r = 0; r < spec.n_regions; ++r) {
    int ix = r % g, iy = (r / g) % g, iz = r / (g * g);
    out.push_back({(ix + 0.5) * cell_x, (iy + 0.5) * cell_y,
                   (iz + 0.5) * cell_z, 0.35 * cell_x, 0.35 * cell_y,
                   0.35 * cell_z});
  }
  return out;
}

constexpr float kBackground = 0.05f;
constexpr double kIntensityBase = 0.5;
constexpr double kIntensitySlope = 0.45;  // keeps base + slope*[-1,1] in (0,1)
constexpr double kPatientShift = 0.8;     // added to the common-factor mean

}  // namespace

Volume3D generate_atlas(const PhantomSpec& spec) {
  spec.validate();
  Volume3D atlas(spec.L, spec.W, spec.H);
  std::fill(atlas.voxels.begin(), atlas.voxels.end(), -1.0f);
  auto regions = region_template(spec);
  for (int r = 0; r < spec.n_regions; ++r) {
    const Ellipsoid& e = regions[static_cast<size_t>(r)];
    int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(e.cx - e.rx));
    int64_t x1 = std::min(spec.L - 1, static_cast<int64_t>(e.cx + e.rx) + 1);
    int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(e.cy - e.ry));
    int64_t y1 = std::min(spec.W - 1, static_cast<int64_t>(e.cy + e.ry) + 1);
    int64_t z0 = std::max<int64_t>(0, static_cast<int64_t>(e.cz - e.rz));
    int64_t z1 = std::min(spec.H - 1, static_cast<int64_t>(e.cz + e.rz) + 1);
    for (int64_t z = z0; z <= z1; ++z)
      for (int64_t y = y0; y <= y1; ++y)
        for (int64_t x = x0; x <= x1; ++x) {
          double dx = (x + 0.5 - e.cx) / e.rx;
          double dy = (y + 0.5 - e.cy) / e.ry;
          double dz = (z + 0.5 - e.cz) / e.rz;
          if (dx * dx + dy * dy + dz * dz <= 1.0)
            atlas.at(x, y, z) = static_cast<float>(r);
        }
  }
  return atlas;
}

bool is_patient(const PhantomSpec& spec, int64_t subject_index) {
  (void)spec;
  return subject_index % 2 == 1;
}

namespace {

// Random factor model: one common factor with per-subject strength plus
// rank ceil(K/4) idiosyncratic factors, normalized to unit diagonal. The
// common factor gives row-sums real spread across subjects; patients get a
// shifted common-factor mean (the synthetic group contrast).
FNCMatrix generate_fnc(const PhantomSpec& spec, int64_t subject_index) {
  int64_t K = spec.n_components;
  int64_t rank = (K + 3) / 4;
  RngStream rng(derive_seed(spec.seed, "phantom-fnc",
                            static_cast<uint64_t>(subject_index)));
  double g_mean =
      is_patient(spec, subject_index) ? 1.0 + kPatientShift : 1.0;
  double g = g_mean + 0.6 * rng.normal();
  double psi = std::exp(rng.uniform() * 1.3862943611198906 -
                        0.6931471805599453);  // log-uniform on [0.5, 2]
  Eigen::MatrixXd F(K, rank + 1);
  for (int64_t i = 0; i < K; ++i) F(i, 0) = g;
  for (int64_t i = 0; i < K; ++i)
    for (int64_t j = 1; j <= rank; ++j) F(i, j) = rng.normal();
  Eigen::MatrixXd C = F * F.transpose();
  Eigen::VectorXd d = C.diagonal().array() + psi;
  FNCMatrix m(K);
  for (int64_t i = 0; i < K; ++i)
    for (int64_t j = i + 1; j < K; ++j) {
      double v = C(i, j) / std::sqrt(d(i) * d(j));
      v = std::clamp(v, -1.0, 1.0);
      float f = static_cast<float>(v);
      m.at(i, j) = f;
      m.at(j, i) = f;
    }
  return m;
}

}  // namespace

std::vector<double> fnc_rowsums(const FNCMatrix& m) {
  std::vector<double> out(static_cast<size_t>(m.K));
  for (int64_t i = 0; i < m.K; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < m.K; ++j)
      if (j != i) s += m.at(i, j);
    out[static_cast<size_t>(i)] = s / static_cast<double>(m.K - 1);
  }
  return out;
}

std::pair<Volume3D, FNCMatrix> generate_phantom(const PhantomSpec& spec,
                                                int64_t subject_index) {
  spec.validate();
  if (subject_index < 0)
    throw ValidationError("generate_phantom: subject_index >= 0");
  FNCMatrix fnc = generate_fnc(spec, subject_index);
  std::vector<double> rowsums = fnc_rowsums(fnc);

  Volume3D atlas = generate_atlas(spec);
  Volume3D vol(spec.L, spec.W, spec.H);
  std::vector<float> intensity(static_cast<size_t>(spec.n_regions));
  for (int r = 0; r < spec.n_regions; ++r) {
    bool coupled = spec.coupled_region < 0 || spec.coupled_region == r;
    double v = kIntensityBase;
    if (coupled)
      v += kIntensitySlope * spec.coupling_strength *
           rowsums[static_cast<size_t>(r)];
    intensity[static_cast<size_t>(r)] = static_cast<float>(v);
  }
  for (int64_t i = 0; i < vol.numel(); ++i) {
    float lab = atlas.voxels[static_cast<size_t>(i)];
    vol.voxels[static_cast<size_t>(i)] =
        lab < 0.0f ? kBackground : intensity[static_cast<size_t>(lab)];
  }
  if (spec.noise_sigma > 0.0) {
    RngStream noise(derive_seed(spec.seed, "phantom-noise",
                                static_cast<uint64_t>(subject_index)));
    for (float& v : vol.voxels) {
      v = static_cast<float>(v + spec.noise_sigma * noise.normal());
      v = std::clamp(v, 0.0f, 1.0f);
    }
  }
  return {std::move(vol), std::move(fnc)};
}

std::vector<double> region_means(const Volume3D& v, const Volume3D& atlas,
                                 int n_regions) {
  if (v.L != atlas.L || v.W != atlas.W || v.H != atlas.H)
    throw ValidationError("region_means: volume/atlas shape mismatch");
  std::vector<double> sum(static_cast<size_t>(n_regions), 0.0);
  std::vector<int64_t> count(static_cast<size_t>(n_regions), 0);
  for (int64_t i = 0; i < v.numel(); ++i) {
    float lab = atlas.voxels[static_cast<size_t>(i)];
    if (lab < 0.0f) continue;
    auto r = static_cast<size_t>(lab);
    if (r >= sum.size())
      throw ValidationError("region_means: atlas label out of range");
    sum[r] += v.voxels[static_cast<size_t>(i)];
    count[r] += 1;
  }
  std::vector<double> out(static_cast<size_t>(n_regions), 0.0);
  for (size_t r = 0; r < out.size(); ++r) {
    if (count[r] == 0)
      throw ValidationError("region_means: empty region " +
                            std::to_string(r));
    out[r] = sum[r] / static_cast<double>(count[r]);
  }
  return out;
}

// --------------------------------------------------------------------- I/O

namespace {
constexpr int kVolFormatVersion = 1;

void save_raw_f32(const fs::path& path, const float* data, int64_t count,
                  const io::json& sidecar) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(count * sizeof(float)));
  if (!out) throw IoError("write failed: " + path.string());
  io::write_json(fs::path(path.string() + ".json"), sidecar);
}

std::vector<float> load_raw_f32(const fs::path& path, const io::json& sidecar,
                                int64_t expect, const char* order) {
  int version = sidecar.value("version", -1);
  if (version != kVolFormatVersion)
    throw IoError("unknown format version " + std::to_string(version) +
                  " in " + path.string() + ".json");
  if (sidecar.value("dtype", "") != "f32le")
    throw IoError("unsupported dtype in " + path.string() + ".json");
  if (sidecar.value("order", "") != order)
    throw IoError("unsupported element order in " + path.string() + ".json");
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw MissingArtifactError("payload not found: " + path.string());
  auto bytes = static_cast<int64_t>(in.tellg());
  if (bytes != expect * static_cast<int64_t>(sizeof(float)))
    throw IoError("truncated or oversized payload: " + path.string() +
                  " holds " + std::to_string(bytes / sizeof(float)) +
                  " elements, header declares " + std::to_string(expect));
  in.seekg(0);
  std::vector<float> buf(static_cast<size_t>(expect));
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(expect * sizeof(float)));
  if (!in) throw IoError("read failed: " + path.string());
  return buf;
}

io::json load_sidecar(const fs::path& path) {
  fs::path side(path.string() + ".json");
  if (!fs::exists(side))
    throw MissingArtifactError("sidecar header not found: " + side.string());
  return io::read_json(side);
}
}  // namespace

void save_volume(const Volume3D& v, const fs::path& path) {
  v.validate();
  io::json side = {{"version", kVolFormatVersion},
                   {"shape", {v.L, v.W, v.H}},
                   {"dtype", "f32le"},
                   {"order", "x-fastest"}};
  save_raw_f32(path, v.voxels.data(), v.numel(), side);
}

Volume3D load_volume(const fs::path& path) {
  io::json side = load_sidecar(path);
  auto shape = side.value("shape", std::vector<int64_t>{});
  if (shape.size() != 3)
    throw IoError("volume sidecar shape must have 3 dims: " + path.string());
  Volume3D v(shape[0], shape[1], shape[2]);
  v.voxels = load_raw_f32(path, side, v.numel(), "x-fastest");
  v.validate();
  return v;
}

void save_fnc(const FNCMatrix& m, const fs::path& path) {
  io::json side = {{"version", kVolFormatVersion},
                   {"shape", {m.K, m.K}},
                   {"dtype", "f32le"},
                   {"order", "row-major"}};
  save_raw_f32(path, m.data.data(), m.K * m.K, side);
}

FNCMatrix load_fnc(const fs::path& path) {
  io::json side = load_sidecar(path);
  auto shape = side.value("shape", std::vector<int64_t>{});
  if (shape.size() != 2 || shape[0] != shape[1])
    throw IoError("fnc sidecar shape must be square 2D: " + path.string());
  FNCMatrix m(shape[0]);
  m.data = load_raw_f32(path, side, m.K * m.K, "row-major");
  return m;
}

std::vector<float> vectorize_fnc(const FNCMatrix& m) {
  for (int64_t i = 0; i < m.K; ++i)
    for (int64_t j = i + 1; j < m.K; ++j)
      if (std::abs(static_cast<double>(m.at(i, j)) - m.at(j, i)) > 1e-9)
        throw ValidationError("vectorize_fnc: input not symmetric");
  std::vector<float> out;
  out.reserve(static_cast<size_t>(m.K * (m.K - 1) / 2));
  for (int64_t i = 0; i < m.K; ++i)
    for (int64_t j = i + 1; j < m.K; ++j) out.push_back(m.at(i, j));
  return out;
}

Tensor random_condition(const FNCMatrix& reference, uint64_t seed) {
  int64_t K = reference.K;
  RngStream rng(derive_seed(seed, "random-condition", 0));
  Tensor t({K, K});
  rng.fill_normal(std::span<float>(t.data(), static_cast<size_t>(K * K)));
  for (int64_t i = 0; i < K; ++i) {
    t[i * K + i] = 1.0f;
    for (int64_t j = i + 1; j < K; ++j) t[j * K + i] = t[i * K + j];
  }
  return t;
}

// ---------------------------------------------------------------- manifest

namespace {
io::json spec_to_json(const PhantomSpec& s) {
  return {{"n_regions", s.n_regions},
          {"shape", {s.L, s.W, s.H}},
          {"coupling_strength", s.coupling_strength},
          {"noise_sigma", s.noise_sigma},
          {"seed", s.seed},
          {"n_components", s.n_components},
          {"coupled_region", s.coupled_region}};
}

PhantomSpec spec_from_json(const io::json& j) {
  PhantomSpec s;
  s.n_regions = j.at("n_regions").get<int>();
  auto shape = j.at("shape").get<std::vector<int64_t>>();
  if (shape.size() != 3)
    throw ValidationError("phantom spec shape must have 3 dims");
  s.L = shape[0];
  s.W = shape[1];
  s.H = shape[2];
  s.coupling_strength = j.at("coupling_strength").get<double>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.seed = j.at("seed").get<uint64_t>();
  s.n_components = j.value("n_components", 53);
  s.coupled_region = j.value("coupled_region", -1);
  s.validate();
  return s;
}
}  // namespace

void DatasetManifest::save(const fs::path& path) const {
  io::json entries_j = io::json::array();
  for (const auto& e : entries)
    entries_j.push_back({{"volume", e.volume_path},
                         {"fnc", e.fnc_path},
                         {"subject_id", e.subject_id},
                         {"group", to_string(e.group)}});
  io::json j = {{"version", 1},
                {"seed", seed},
                {"spec", spec_to_json(spec)},
                {"entries", entries_j}};
  io::write_json(path, j);
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  if (!fs::exists(path))
    throw MissingArtifactError("manifest not found: " + path.string());
  io::json j = io::read_json(path);
  if (j.value("version", -1) != 1)
    throw IoError("unknown manifest version in " + path.string());
  DatasetManifest m;
  m.seed = j.at("seed").get<uint64_t>();
  m.spec = spec_from_json(j.at("spec"));
  m.root = path.parent_path();
  const fs::path& root = m.root;
  std::vector<std::string> seen;
  for (const auto& e : j.at("entries")) {
    ManifestEntry me;
    me.volume_path = e.at("volume").get<std::string>();
    me.fnc_path = e.at("fnc").get<std::string>();
    me.subject_id = e.at("subject_id").get<std::string>();
    me.group = group_from_string(e.at("group").get<std::string>());
    for (const auto& p : {me.volume_path, me.fnc_path}) {
      if (std::find(seen.begin(), seen.end(), p) != seen.end())
        throw ValidationError("manifest has duplicate path: " + p);
      seen.push_back(p);
      if (!fs::exists(root / p))
        throw MissingArtifactError("manifest references missing file: " +
                                   (root / p).string());
    }
    m.entries.push_back(std::move(me));
  }
  return m;
}

}  // namespace gmldm
