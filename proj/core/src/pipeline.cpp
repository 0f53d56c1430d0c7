// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0

#include "gmldm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "gmldm/errors.hpp"
#include "gmldm/rng.hpp"

namespace gmldm::pipeline {

namespace fs = std::filesystem;

namespace {

// ---- strict config parsing -------------------------------------------------

void check_keys(const io::json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw ValidationError("config: " + where + " must be a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw ValidationError("config: unknown key '" + item.key() + "' in " +
                            where);
  }
}

template <typename T>
void read_field(const io::json& j, const char* key, T& out,
                const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const io::json::exception&) {
    throw ValidationError("config: bad value for '" + std::string(key) +
                          "' in " + where);
  }
}

void read_dims(const io::json& j, const char* key, int64_t& l, int64_t& w,
               int64_t& h, const std::string& where) {
  if (!j.contains(key)) return;
  std::vector<int64_t> d;
  read_field(j, key, d, where);
  if (d.size() != 3)
    throw ValidationError("config: '" + std::string(key) + "' in " + where +
                          " must have 3 entries");
  l = d[0];
  w = d[1];
  h = d[2];
}

void parse_data(const io::json& j, RunConfig& c) {
  check_keys(j, "data",
             {"n_subjects", "n_regions", "dims", "coupling_strength",
              "noise_sigma", "n_components", "coupled_region"});
  read_field(j, "n_subjects", c.n_subjects, "data");
  read_field(j, "n_regions", c.phantom.n_regions, "data");
  read_dims(j, "dims", c.phantom.L, c.phantom.W, c.phantom.H, "data");
  read_field(j, "coupling_strength", c.phantom.coupling_strength, "data");
  read_field(j, "noise_sigma", c.phantom.noise_sigma, "data");
  read_field(j, "n_components", c.phantom.n_components, "data");
  read_field(j, "coupled_region", c.phantom.coupled_region, "data");
}

void parse_autoencoder(const io::json& j, AEConfig& a) {
  check_keys(j, "autoencoder",
             {"standard_dims", "base_channels", "channel_mult",
              "attention_levels", "conv_layers_per_module", "alpha",
              "latent_channels", "groupnorm_groups"});
  read_dims(j, "standard_dims", a.L, a.W, a.H, "autoencoder");
  read_field(j, "base_channels", a.base_channels, "autoencoder");
  read_field(j, "channel_mult", a.channel_mult, "autoencoder");
  read_field(j, "attention_levels", a.attention_levels, "autoencoder");
  read_field(j, "conv_layers_per_module", a.conv_layers_per_module,
             "autoencoder");
  read_field(j, "alpha", a.alpha, "autoencoder");
  read_field(j, "latent_channels", a.latent_channels, "autoencoder");
  read_field(j, "groupnorm_groups", a.groupnorm_groups, "autoencoder");
}

void parse_denoiser(const io::json& j, DenoiserConfig& d) {
  check_keys(j, "denoiser",
             {"patch_size", "token_dim", "n_encoder_layers",
              "n_decoder_layers", "n_heads", "ffn_dim", "cond_feature_dims",
              "null_tokens", "dropout"});
  read_field(j, "patch_size", d.patch_size, "denoiser");
  read_field(j, "token_dim", d.token_dim, "denoiser");
  read_field(j, "n_encoder_layers", d.n_encoder_layers, "denoiser");
  read_field(j, "n_decoder_layers", d.n_decoder_layers, "denoiser");
  read_field(j, "n_heads", d.n_heads, "denoiser");
  read_field(j, "ffn_dim", d.ffn_dim, "denoiser");
  read_field(j, "cond_feature_dims", d.cond_feature_dims, "denoiser");
  read_field(j, "null_tokens", d.null_tokens, "denoiser");
  read_field(j, "dropout", d.dropout, "denoiser");
}

void parse_diffusion(const io::json& j, diff::DiffusionConfig& d) {
  check_keys(j, "diffusion",
             {"T", "schedule", "beta_start", "beta_end", "prediction"});
  read_field(j, "T", d.T, "diffusion");
  read_field(j, "schedule", d.schedule, "diffusion");
  read_field(j, "beta_start", d.beta_start, "diffusion");
  read_field(j, "beta_end", d.beta_end, "diffusion");
  read_field(j, "prediction", d.prediction, "diffusion");
}

void parse_train(const io::json& j, const std::string& where, TrainConfig& t) {
  check_keys(j, where,
             {"learning_rate", "batch_size", "optimizer", "beta1", "beta2",
              "weight_decay", "lr_milestones", "lr_decay", "max_steps",
              "grad_clip_norm"});
  read_field(j, "learning_rate", t.learning_rate, where);
  read_field(j, "batch_size", t.batch_size, where);
  read_field(j, "optimizer", t.optimizer, where);
  read_field(j, "beta1", t.beta1, where);
  read_field(j, "beta2", t.beta2, where);
  read_field(j, "weight_decay", t.weight_decay, where);
  read_field(j, "lr_milestones", t.lr_milestones, where);
  read_field(j, "lr_decay", t.lr_decay, where);
  read_field(j, "max_steps", t.max_steps, where);
  read_field(j, "grad_clip_norm", t.grad_clip_norm, where);
}

io::json train_json(const TrainConfig& t) {
  return io::json{{"learning_rate", t.learning_rate},
                  {"batch_size", t.batch_size},
                  {"optimizer", t.optimizer},
                  {"beta1", t.beta1},
                  {"beta2", t.beta2},
                  {"weight_decay", t.weight_decay},
                  {"lr_milestones", t.lr_milestones},
                  {"lr_decay", t.lr_decay},
                  {"max_steps", t.max_steps},
                  {"grad_clip_norm", t.grad_clip_norm}};
}

// ---- artifact plumbing -----------------------------------------------------

void require_file(const fs::path& p, const std::string& what) {
  if (p.empty() || !fs::exists(p))
    throw MissingArtifactError(what + " not found: " + p.string());
}

void write_text(const fs::path& p, const std::string& body) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  f << body;
  if (!f) throw IoError("short write to " + p.string());
}

std::string subject_name(int64_t i) {
  char id[24];
  std::snprintf(id, sizeof id, "s%04lld", static_cast<long long>(i));
  return id;
}

// Subjects named by the sample section, defaulting to the whole manifest.
std::vector<int64_t> select_subjects(const RunConfig& cfg, int64_t n) {
  std::vector<int64_t> idx = cfg.sample_subjects;
  if (idx.empty()) {
    idx.resize(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), int64_t{0});
  }
  for (int64_t i : idx)
    if (i < 0 || i >= n)
      throw ValidationError("subject index " + std::to_string(i) +
                            " outside [0, " + std::to_string(n) + ")");
  return idx;
}

// ---- montage rendering -----------------------------------------------------

struct Tile {
  int64_t w = 0, h = 0;
  std::vector<float> px;  // row-major
};

// plane 0: axial z=H/2 (width L, height W); 1: coronal y=W/2 (width L,
// height H); 2: sagittal x=L/2 (width W, height H).
Tile mid_slice(const Volume3D& v, int plane) {
  Tile t;
  if (plane == 0) {
    t.w = v.L;
    t.h = v.W;
    t.px.resize(static_cast<size_t>(t.w * t.h));
    int64_t z = v.H / 2;
    for (int64_t y = 0; y < v.W; ++y)
      for (int64_t x = 0; x < v.L; ++x)
        t.px[static_cast<size_t>(y * t.w + x)] = v.at(x, y, z);
  } else if (plane == 1) {
    t.w = v.L;
    t.h = v.H;
    t.px.resize(static_cast<size_t>(t.w * t.h));
    int64_t y = v.W / 2;
    for (int64_t z = 0; z < v.H; ++z)
      for (int64_t x = 0; x < v.L; ++x)
        t.px[static_cast<size_t>(z * t.w + x)] = v.at(x, y, z);
  } else {
    t.w = v.W;
    t.h = v.H;
    t.px.resize(static_cast<size_t>(t.w * t.h));
    int64_t x = v.L / 2;
    for (int64_t z = 0; z < v.H; ++z)
      for (int64_t y = 0; y < v.W; ++y)
        t.px[static_cast<size_t>(z * t.w + y)] = v.at(x, y, z);
  }
  return t;
}

// One row per volume, columns axial/coronal/sagittal; 2px white separators;
// values clamp-mapped from [lo, hi] to 0..255.
void write_slice_montage(const fs::path& p,
                         const std::vector<const Volume3D*>& rows, float lo,
                         float hi) {
  const int64_t sep = 2;
  const size_t ncols = 3;
  std::vector<std::vector<Tile>> tiles;
  for (const Volume3D* v : rows)
    tiles.push_back({mid_slice(*v, 0), mid_slice(*v, 1), mid_slice(*v, 2)});
  std::vector<int64_t> colw(ncols, 0), rowh(rows.size(), 0);
  for (size_t r = 0; r < rows.size(); ++r)
    for (size_t c = 0; c < ncols; ++c) {
      colw[c] = std::max(colw[c], tiles[r][c].w);
      rowh[r] = std::max(rowh[r], tiles[r][c].h);
    }
  int64_t width = std::accumulate(colw.begin(), colw.end(), int64_t{0}) +
                  sep * static_cast<int64_t>(ncols - 1);
  int64_t height = std::accumulate(rowh.begin(), rowh.end(), int64_t{0}) +
                   sep * static_cast<int64_t>(rows.size() - 1);
  std::vector<uint8_t> img(static_cast<size_t>(width * height), 255);
  double range = static_cast<double>(hi) - static_cast<double>(lo);
  if (range <= 0) range = 1.0;
  int64_t oy = 0;
  for (size_t r = 0; r < rows.size(); ++r) {
    int64_t ox = 0;
    for (size_t c = 0; c < ncols; ++c) {
      const Tile& t = tiles[r][c];
      for (int64_t rr = 0; rr < t.h; ++rr)
        for (int64_t cc = 0; cc < t.w; ++cc) {
          double u = (t.px[static_cast<size_t>(rr * t.w + cc)] - lo) / range;
          u = std::clamp(u, 0.0, 1.0);
          img[static_cast<size_t>((oy + rr) * width + ox + cc)] =
              static_cast<uint8_t>(std::lround(u * 255.0));
        }
      ox += colw[c] + sep;
    }
    oy += rowh[r] + sep;
  }
  io::write_pgm(p, static_cast<int>(width), static_cast<int>(height), img);
}

std::vector<Volume3D> load_vol_dir(const fs::path& dir,
                                   const std::string& what) {
  if (dir.empty() || !fs::exists(dir))
    throw MissingArtifactError(what + " directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".vol")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty())
    throw MissingArtifactError(what + ": no .vol files in " + dir.string());
  std::vector<Volume3D> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(load_volume(f));
  return out;
}

// ---- ablation worker protocol ----------------------------------------------

io::json cell_to_json(const AblationCellResult& r) {
  return io::json{{"name", r.spec.name},
                  {"model", r.spec.model},
                  {"pretrained", r.spec.pretrained},
                  {"condition", to_string(r.spec.condition)},
                  {"fold_pearson", r.fold_pearson},
                  {"fold_ssim", r.fold_ssim},
                  {"pearson_mean", r.pearson_mean},
                  {"pearson_se", r.pearson_se},
                  {"ssim_mean", r.ssim_mean},
                  {"ssim_se", r.ssim_se},
                  {"failed", r.failed},
                  {"error", r.error}};
}

AblationCellResult cell_from_json(const io::json& j,
                                  const AblationCellSpec& spec) {
  AblationCellResult r;
  r.spec = spec;
  try {
    r.fold_pearson = j.at("fold_pearson").get<std::vector<double>>();
    r.fold_ssim = j.at("fold_ssim").get<std::vector<double>>();
    r.pearson_mean = j.at("pearson_mean").get<double>();
    r.pearson_se = j.at("pearson_se").get<double>();
    r.ssim_mean = j.at("ssim_mean").get<double>();
    r.ssim_se = j.at("ssim_se").get<double>();
    r.failed = j.at("failed").get<bool>();
    r.error = j.at("error").get<std::string>();
  } catch (const io::json::exception& e) {
    throw IoError(std::string("malformed cell result: ") + e.what());
  }
  return r;
}

fs::path cell_json_path(const fs::path& run_dir, const std::string& name) {
  return run_dir / "cells" / name / "cell.json";
}

void write_cell_json(const fs::path& run_dir, const AblationCellResult& r) {
  fs::path p = cell_json_path(run_dir, r.spec.name);
  fs::create_directories(p.parent_path());
  write_text(p, cell_to_json(r).dump(2) + "\n");
}

std::string sh_quote(const std::string& s) {
  std::string out = "'";
  for (char ch : s) {
    if (ch == '\'')
      out += "'\\''";
    else
      out += ch;
  }
  out += "'";
  return out;
}

}  // namespace

// ---- RunConfig ---------------------------------------------------------

RunConfig::RunConfig() {
  // Desk-scale diffusion; the paper-scale schedule (T=1000, beta_end=0.02)
  // stays reachable through the diffusion section.
  diffusion.T = 50;
  diffusion.beta_end = 0.2;
  ldm_train.learning_rate = 3e-5;
}

void RunConfig::validate() const {
  PhantomSpec ps = phantom;
  ps.seed = seed;
  ps.validate();
  ae.validate();
  denoiser.validate();
  diffusion.validate();
  ae_train.validate();
  ldm_train.validate();
  if (n_subjects < 1) throw ValidationError("config: n_subjects >= 1");
  if (k_folds < 2) throw ValidationError("config: k_folds >= 2");
  if (pixel_patch < 1) throw ValidationError("config: pixel_patch >= 1");
  if (pretrain_pool < 0) throw ValidationError("config: pretrain_pool >= 0");
  if (eval_subjects < 0) throw ValidationError("config: eval_subjects >= 0");
  if (report_subjects < 1) throw ValidationError("config: max_subjects >= 1");
  if (sample_condition != "fnc" && sample_condition != "random" &&
      sample_condition != "null" && sample_condition != "file")
    throw ValidationError("config: sample.condition must be one of "
                          "fnc|random|null|file, got '" +
                          sample_condition + "'");
}

RunConfig RunConfig::from_json(const io::json& j) {
  RunConfig c;
  check_keys(j, "config root",
             {"seed", "command", "inputs", "data", "autoencoder", "denoiser",
              "diffusion", "ae_train", "ldm_train", "ldm", "ablation",
              "sample", "report"});
  read_field(j, "seed", c.seed, "config root");
  if (j.contains("data")) parse_data(j.at("data"), c);
  if (j.contains("autoencoder")) parse_autoencoder(j.at("autoencoder"), c.ae);
  if (j.contains("denoiser")) parse_denoiser(j.at("denoiser"), c.denoiser);
  if (j.contains("diffusion")) parse_diffusion(j.at("diffusion"), c.diffusion);
  if (j.contains("ae_train"))
    parse_train(j.at("ae_train"), "ae_train", c.ae_train);
  if (j.contains("ldm_train"))
    parse_train(j.at("ldm_train"), "ldm_train", c.ldm_train);
  if (j.contains("ldm")) {
    const io::json& l = j.at("ldm");
    check_keys(l, "ldm",
               {"condition", "joint_autoencoder", "fresh_posterior_sample"});
    if (l.contains("condition")) {
      std::string s;
      read_field(l, "condition", s, "ldm");
      c.condition = condition_mode_from_string(s);
    }
    read_field(l, "joint_autoencoder", c.joint_autoencoder, "ldm");
    read_field(l, "fresh_posterior_sample", c.fresh_posterior_sample, "ldm");
  }
  if (j.contains("ablation")) {
    const io::json& a = j.at("ablation");
    check_keys(a, "ablation",
               {"k_folds", "pixel_patch", "pretrain_pool", "eval_subjects"});
    read_field(a, "k_folds", c.k_folds, "ablation");
    read_field(a, "pixel_patch", c.pixel_patch, "ablation");
    read_field(a, "pretrain_pool", c.pretrain_pool, "ablation");
    read_field(a, "eval_subjects", c.eval_subjects, "ablation");
  }
  if (j.contains("sample")) {
    const io::json& s = j.at("sample");
    check_keys(s, "sample", {"subjects", "condition", "condition_file"});
    read_field(s, "subjects", c.sample_subjects, "sample");
    read_field(s, "condition", c.sample_condition, "sample");
    std::string cf;
    read_field(s, "condition_file", cf, "sample");
    if (!cf.empty()) c.condition_file = cf;
  }
  if (j.contains("report")) {
    const io::json& r = j.at("report");
    check_keys(r, "report", {"max_subjects"});
    read_field(r, "max_subjects", c.report_subjects, "report");
  }
  c.phantom.seed = c.seed;
  c.validate();
  return c;
}

RunConfig RunConfig::from_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("config: cannot open " + p.string());
  io::json j;
  try {
    j = io::json::parse(f);
  } catch (const io::json::parse_error& e) {
    throw ValidationError("config: " + p.string() + ": " + e.what());
  }
  return from_json(j);
}

io::json RunConfig::to_json() const {
  io::json j;
  j["seed"] = seed;
  j["data"] = io::json{{"n_subjects", n_subjects},
                       {"n_regions", phantom.n_regions},
                       {"dims", {phantom.L, phantom.W, phantom.H}},
                       {"coupling_strength", phantom.coupling_strength},
                       {"noise_sigma", phantom.noise_sigma},
                       {"n_components", phantom.n_components},
                       {"coupled_region", phantom.coupled_region}};
  j["autoencoder"] = io::json{
      {"standard_dims", {ae.L, ae.W, ae.H}},
      {"base_channels", ae.base_channels},
      {"channel_mult", ae.channel_mult},
      {"attention_levels", ae.attention_levels},
      {"conv_layers_per_module", ae.conv_layers_per_module},
      {"alpha", ae.alpha},
      {"latent_channels", ae.latent_channels},
      {"groupnorm_groups", ae.groupnorm_groups}};
  j["denoiser"] = io::json{{"patch_size", denoiser.patch_size},
                           {"token_dim", denoiser.token_dim},
                           {"n_encoder_layers", denoiser.n_encoder_layers},
                           {"n_decoder_layers", denoiser.n_decoder_layers},
                           {"n_heads", denoiser.n_heads},
                           {"ffn_dim", denoiser.ffn_dim},
                           {"cond_feature_dims", denoiser.cond_feature_dims},
                           {"null_tokens", denoiser.null_tokens},
                           {"dropout", denoiser.dropout}};
  j["diffusion"] = io::json{{"T", diffusion.T},
                            {"schedule", diffusion.schedule},
                            {"beta_start", diffusion.beta_start},
                            {"beta_end", diffusion.beta_end},
                            {"prediction", diffusion.prediction}};
  j["ae_train"] = train_json(ae_train);
  j["ldm_train"] = train_json(ldm_train);
  j["ldm"] = io::json{{"condition", to_string(condition)},
                      {"joint_autoencoder", joint_autoencoder},
                      {"fresh_posterior_sample", fresh_posterior_sample}};
  j["ablation"] = io::json{{"k_folds", k_folds},
                           {"pixel_patch", pixel_patch},
                           {"pretrain_pool", pretrain_pool},
                           {"eval_subjects", eval_subjects}};
  j["sample"] = io::json{{"subjects", sample_subjects},
                         {"condition", sample_condition},
                         {"condition_file", condition_file.string()}};
  j["report"] = io::json{{"max_subjects", report_subjects}};
  return j;
}

// ---- run directory ---------------------------------------------------------

void prepare_run_dir(const RunContext& ctx, const RunConfig& cfg,
                     const std::string& command, const io::json& inputs) {
  if (ctx.out_dir.empty())
    throw ValidationError(command + ": output directory required");
  if (fs::exists(ctx.out_dir) && !fs::is_empty(ctx.out_dir) && !ctx.force)
    throw ValidationError(command + ": output directory " +
                          ctx.out_dir.string() +
                          " already holds a run; pass --force to overwrite");
  fs::create_directories(ctx.out_dir);
  io::json j = cfg.to_json();
  j["command"] = command;
  j["inputs"] = inputs;
  write_text(ctx.out_dir / "config.json", j.dump(2) + "\n");
}

// ---- commands ----------------------------------------------------------

fs::path cmd_gen_data(const RunConfig& cfg, const RunContext& ctx) {
  cfg.validate();
  prepare_run_dir(ctx, cfg, "gen-data", io::json::object());
  PhantomSpec spec = cfg.phantom;
  spec.seed = cfg.seed;
  fs::create_directories(ctx.out_dir / "vols");
  fs::create_directories(ctx.out_dir / "fncs");
  DatasetManifest m;
  m.seed = cfg.seed;
  m.spec = spec;
  for (int64_t i = 0; i < cfg.n_subjects; ++i) {
    auto [vol, fnc] = generate_phantom(spec, i);
    ManifestEntry e;
    e.subject_id = subject_name(i);
    e.volume_path = "vols/" + e.subject_id + ".vol";
    e.fnc_path = "fncs/" + e.subject_id + ".fnc";
    e.group = is_patient(spec, i) ? GroupLabel::patient : GroupLabel::control;
    save_volume(vol, ctx.out_dir / e.volume_path);
    save_fnc(fnc, ctx.out_dir / e.fnc_path);
    m.entries.push_back(std::move(e));
  }
  fs::path mpath = ctx.out_dir / "manifest.json";
  m.save(mpath);
  return mpath;
}

void cmd_pretrain_ae(const RunConfig& cfg, const fs::path& data_manifest,
                     const fs::path& resume_from, const RunContext& ctx) {
  cfg.validate();
  require_file(data_manifest, "data manifest");
  if (!resume_from.empty()) require_file(resume_from, "resume checkpoint");
  DatasetManifest m = DatasetManifest::load(data_manifest);
  prepare_run_dir(ctx, cfg, "pretrain-ae",
                  io::json{{"data", data_manifest.string()},
                           {"resume", resume_from.string()}});
  Dataset data = Dataset::load(m);
  Autoencoder ae(cfg.ae, derive_seed(cfg.seed, "ae-init"));
  TrainConfig tc = cfg.ae_train;
  tc.seed = derive_seed(cfg.seed, "pretrain");
  PretrainOptions opt;
  opt.out_dir = ctx.out_dir;
  opt.resume_from = resume_from;
  pretrain_autoencoder(data, ae, tc, opt);
}

void cmd_train_ldm(const RunConfig& cfg, const fs::path& data_manifest,
                   const fs::path& ae_checkpoint, const fs::path& resume_from,
                   const RunContext& ctx) {
  cfg.validate();
  require_file(data_manifest, "data manifest");
  if (!ae_checkpoint.empty() && cfg.joint_autoencoder)
    throw ValidationError(
        "train-ldm: a pretrained --ae and ldm.joint_autoencoder are "
        "mutually exclusive");
  if (!ae_checkpoint.empty())
    require_file(ae_checkpoint, "autoencoder checkpoint");
  if (!resume_from.empty()) require_file(resume_from, "resume checkpoint");
  DatasetManifest m = DatasetManifest::load(data_manifest);
  prepare_run_dir(ctx, cfg, "train-ldm",
                  io::json{{"data", data_manifest.string()},
                           {"ae", ae_checkpoint.string()},
                           {"resume", resume_from.string()}});
  Dataset data = Dataset::load(m);

  std::optional<Autoencoder> ae;
  if (!ae_checkpoint.empty())
    ae.emplace(Autoencoder::load(ae_checkpoint));
  else if (cfg.joint_autoencoder)
    ae.emplace(cfg.ae, derive_seed(cfg.seed, "ae-init"));
  Shape lat = ae ? ae->config().latent_shape()
                 : Shape{1, m.spec.L, m.spec.W, m.spec.H};
  Denoiser dn(cfg.denoiser, lat, m.spec.n_components,
              derive_seed(cfg.seed, "dn-init"));
  auto sch = diff::make_schedule<float>(cfg.diffusion);

  TrainConfig tc = cfg.ldm_train;
  tc.seed = derive_seed(cfg.seed, "train");
  LdmOptions opt;
  opt.condition = cfg.condition;
  opt.joint_autoencoder = cfg.joint_autoencoder;
  opt.ae_train = cfg.ae_train;
  opt.fresh_posterior_sample = cfg.fresh_posterior_sample;
  opt.out_dir = ctx.out_dir;
  opt.resume_from = resume_from;
  train_ldm(data, ae ? &*ae : nullptr, dn, sch, tc, opt);
}

void cmd_sample(const RunConfig& cfg, const fs::path& data_manifest,
                const fs::path& denoiser_checkpoint,
                const fs::path& ae_checkpoint, const RunContext& ctx) {
  cfg.validate();
  require_file(data_manifest, "data manifest");
  require_file(denoiser_checkpoint, "denoiser checkpoint");
  if (!ae_checkpoint.empty())
    require_file(ae_checkpoint, "autoencoder checkpoint");
  if (cfg.sample_condition == "file")
    require_file(cfg.condition_file, "condition file");
  DatasetManifest m = DatasetManifest::load(data_manifest);
  prepare_run_dir(ctx, cfg, "sample",
                  io::json{{"data", data_manifest.string()},
                           {"denoiser", denoiser_checkpoint.string()},
                           {"ae", ae_checkpoint.string()}});

  Denoiser dn = Denoiser::load(denoiser_checkpoint);
  std::optional<Autoencoder> ae;
  if (!ae_checkpoint.empty()) ae.emplace(Autoencoder::load(ae_checkpoint));
  auto sch = diff::make_schedule<float>(cfg.diffusion);
  if (m.spec.n_components != dn.n_components())
    throw ValidationError(
        "sample: manifest n_components " +
        std::to_string(m.spec.n_components) + " != denoiser's " +
        std::to_string(dn.n_components()));

  Tensor file_cond;
  if (cfg.sample_condition == "file") {
    FNCMatrix f = load_fnc(cfg.condition_file);
    if (f.K != dn.n_components())
      throw ValidationError("sample: condition file K " + std::to_string(f.K) +
                            " != denoiser's " +
                            std::to_string(dn.n_components()));
    file_cond = fnc_to_image(f);
  }

  std::vector<int64_t> idx =
      select_subjects(cfg, static_cast<int64_t>(m.entries.size()));
  for (int64_t i : idx) {
    const ManifestEntry& e = m.entries[static_cast<size_t>(i)];
    Tensor cond;
    const Tensor* cp = nullptr;
    if (cfg.sample_condition == "fnc") {
      cond = fnc_to_image(load_fnc(m.fnc_file(static_cast<size_t>(i))));
      cp = &cond;
    } else if (cfg.sample_condition == "random") {
      Tensor r = random_condition(
          load_fnc(m.fnc_file(static_cast<size_t>(i))),
          derive_seed(cfg.seed, "rand-cond", static_cast<uint64_t>(i)));
      int64_t k = r.dim(0);
      cond = r.reshaped({1, 1, k, k});
      cp = &cond;
    } else if (cfg.sample_condition == "file") {
      cp = &file_cond;
    }
    Volume3D g = generate_volume(
        ae ? &*ae : nullptr, dn, sch, cp,
        derive_seed(cfg.seed, "sample", static_cast<uint64_t>(i)), m.spec.L,
        m.spec.W, m.spec.H);
    save_volume(g, ctx.out_dir / ("gen_" + e.subject_id + ".vol"));
  }
}

MetricReport cmd_eval(const RunConfig& cfg, const fs::path& data_manifest,
                      const fs::path& generated_dir, const RunContext& ctx) {
  cfg.validate();
  require_file(data_manifest, "data manifest");
  if (generated_dir.empty() || !fs::exists(generated_dir))
    throw MissingArtifactError("generated directory not found: " +
                               generated_dir.string());
  DatasetManifest m = DatasetManifest::load(data_manifest);
  prepare_run_dir(ctx, cfg, "eval",
                  io::json{{"data", data_manifest.string()},
                           {"generated", generated_dir.string()}});

  std::vector<Volume3D> real, gen;
  std::vector<std::string> ids;
  for (int64_t i :
       select_subjects(cfg, static_cast<int64_t>(m.entries.size()))) {
    const ManifestEntry& e = m.entries[static_cast<size_t>(i)];
    fs::path gp = generated_dir / ("gen_" + e.subject_id + ".vol");
    require_file(gp, "generated volume for " + e.subject_id);
    real.push_back(load_volume(m.volume_file(static_cast<size_t>(i))));
    gen.push_back(load_volume(gp));
    ids.push_back(e.subject_id);
  }
  MetricReport r = evaluate_pairs(real, gen, ids);
  write_metric_report(ctx.out_dir / "metrics.csv", r);
  return r;
}

std::vector<AblationCellResult> cmd_ablate(const RunConfig& cfg,
                                           const AblateArgs& args,
                                           const RunContext& ctx) {
  cfg.validate();
  if (args.workers < 1) throw ValidationError("ablate: workers >= 1");
  require_file(args.data_manifest, "data manifest");
  DatasetManifest m = DatasetManifest::load(args.data_manifest);
  Dataset data = Dataset::load(m);

  AblationGridConfig g;
  g.ae = cfg.ae;
  g.denoiser = cfg.denoiser;
  g.diffusion = cfg.diffusion;
  g.ae_train = cfg.ae_train;
  g.ldm_train = cfg.ldm_train;
  g.k_folds = cfg.k_folds;
  g.pixel_patch = cfg.pixel_patch;
  g.pretrain_pool = cfg.pretrain_pool;
  g.eval_subjects = cfg.eval_subjects;
  g.seed = cfg.seed;
  g.out_dir = ctx.out_dir / "grid";

  std::vector<AblationCellSpec> cells = table1_cells();
  FoldSplit folds =
      kfold_split(data.size(), g.k_folds, derive_seed(g.seed, "folds"));
  fs::path pre_path = g.out_dir / "pretrain" / "autoencoder.gmlc";

  if (!args.only_cell.empty()) {
    // Worker: the parent prepared the run directory and shared pretraining.
    if (!fs::exists(ctx.out_dir / "config.json"))
      throw MissingArtifactError("ablate worker: no run snapshot in " +
                                 ctx.out_dir.string());
    const AblationCellSpec* cell = nullptr;
    for (const auto& c : cells)
      if (c.name == args.only_cell) cell = &c;
    if (!cell)
      throw ValidationError("ablate: unknown cell '" + args.only_cell + "'");
    fs::path ae_path;
    if (cell->pretrained) {
      if (!fs::exists(pre_path))
        throw MissingArtifactError(
            "ablate worker: pretrained autoencoder missing: " +
            pre_path.string() + " (run the parent ablate first)");
      ae_path = pre_path;
    }
    AblationCellResult r = run_ablation_cell(data, g, *cell, folds, ae_path);
    write_cell_json(ctx.out_dir, r);
    return {r};
  }

  prepare_run_dir(ctx, cfg, "ablate",
                  io::json{{"data", args.data_manifest.string()}});
  bool any_pretrained = false;
  for (const auto& c : cells) any_pretrained |= c.pretrained;
  fs::path ae_path;
  if (any_pretrained) ae_path = pretrain_shared_autoencoder(data, g);

  std::vector<AblationCellResult> rows;
  if (args.workers == 1) {
    for (const auto& c : cells) {
      AblationCellResult r = run_ablation_cell(
          data, g, c, folds, c.pretrained ? ae_path : fs::path{});
      write_cell_json(ctx.out_dir, r);
      rows.push_back(std::move(r));
    }
  } else {
    if (args.self_exe.empty())
      throw ValidationError("ablate: parallel workers need the binary path");
    std::vector<int> status(cells.size(), -1);
    std::mutex mu;
    size_t next = 0;
    auto pump = [&]() {
      for (;;) {
        size_t k;
        {
          std::lock_guard<std::mutex> lock(mu);
          if (next >= cells.size()) return;
          k = next++;
        }
        std::string cmd =
            sh_quote(args.self_exe.string()) + " ablate --config " +
            sh_quote((ctx.out_dir / "config.json").string()) + " --data " +
            sh_quote(args.data_manifest.string()) + " --out " +
            sh_quote(ctx.out_dir.string()) + " --cell " +
            sh_quote(cells[k].name) + " --workers 1 --force";
        status[k] = std::system(cmd.c_str());
      }
    };
    size_t n_threads =
        std::min(static_cast<size_t>(args.workers), cells.size());
    std::vector<std::thread> pool;
    for (size_t t = 0; t < n_threads; ++t) pool.emplace_back(pump);
    for (auto& t : pool) t.join();

    for (size_t k = 0; k < cells.size(); ++k) {
      fs::path cj = cell_json_path(ctx.out_dir, cells[k].name);
      if (fs::exists(cj)) {
        std::ifstream f(cj, std::ios::binary);
        rows.push_back(cell_from_json(io::json::parse(f), cells[k]));
      } else {
        AblationCellResult r;
        r.spec = cells[k];
        r.failed = true;
        r.error = "worker exited with status " + std::to_string(status[k]);
        rows.push_back(std::move(r));
      }
    }
  }
  write_ablation_csv(rows, ctx.out_dir / "ablation.csv");
  write_fold_csv(rows, ctx.out_dir / "ablation_folds.csv");
  return rows;
}

void cmd_report(const RunConfig& cfg, const ReportArgs& args,
                const RunContext& ctx) {
  cfg.validate();
  require_file(args.data_manifest, "data manifest");
  if (args.generated_dir.empty() || !fs::exists(args.generated_dir))
    throw MissingArtifactError("generated directory not found: " +
                               args.generated_dir.string());
  bool want_saliency =
      !args.saliency_fnc_dir.empty() || !args.saliency_random_dir.empty();
  if (want_saliency &&
      (args.saliency_fnc_dir.empty() || args.saliency_random_dir.empty()))
    throw ValidationError(
        "report: saliency needs both --saliency-fnc and --saliency-random");
  DatasetManifest m = DatasetManifest::load(args.data_manifest);
  prepare_run_dir(
      ctx, cfg, "report",
      io::json{{"data", args.data_manifest.string()},
               {"generated", args.generated_dir.string()},
               {"saliency_fnc", args.saliency_fnc_dir.string()},
               {"saliency_random", args.saliency_random_dir.string()}});

  std::vector<int64_t> idx =
      select_subjects(cfg, static_cast<int64_t>(m.entries.size()));
  if (static_cast<int64_t>(idx.size()) > cfg.report_subjects)
    idx.resize(static_cast<size_t>(cfg.report_subjects));

  std::vector<Volume3D> real, gen;
  std::vector<std::string> ids;
  for (int64_t i : idx) {
    const ManifestEntry& e = m.entries[static_cast<size_t>(i)];
    fs::path gp = args.generated_dir / ("gen_" + e.subject_id + ".vol");
    require_file(gp, "generated volume for " + e.subject_id);
    real.push_back(load_volume(m.volume_file(static_cast<size_t>(i))));
    gen.push_back(load_volume(gp));
    ids.push_back(e.subject_id);
    write_slice_montage(ctx.out_dir / ("report_" + e.subject_id + ".pgm"),
                        {&real.back(), &gen.back()}, 0.0f, 1.0f);
  }
  MetricReport r = evaluate_pairs(real, gen, ids);
  write_metric_report(ctx.out_dir / "metrics.csv", r);

  if (want_saliency) {
    std::vector<Volume3D> fncs =
        load_vol_dir(args.saliency_fnc_dir, "saliency fnc");
    std::vector<Volume3D> rnds =
        load_vol_dir(args.saliency_random_dir, "saliency random");
    Volume3D atlas = generate_atlas(m.spec);
    SaliencyMap sal =
        difference_saliency(fncs, rnds, atlas, m.spec.n_regions);
    write_region_ranking(ctx.out_dir / "region_ranking.csv", sal);
    float peak = 0.0f;
    for (float v : sal.map.voxels) peak = std::max(peak, v);
    write_slice_montage(ctx.out_dir / "saliency.pgm", {&sal.map}, 0.0f,
                        peak > 0.0f ? peak : 1.0f);
  }
}

int workers_from_env() {
  const char* s = std::getenv("GMLDM_WORKERS");
  if (s == nullptr || *s == '\0') return 1;
  char* end = nullptr;
  long v = std::strtol(s, &end, 10);
  if (end == s || *end != '\0' || v < 1)
    throw ValidationError("GMLDM_WORKERS must be a positive integer, got '" +
                          std::string(s) + "'");
  return static_cast<int>(v);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ValidationError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const MissingArtifactError*>(&e) != nullptr) return 3;
  if (dynamic_cast<const NumericsError*>(&e) != nullptr) return 4;
  if (dynamic_cast<const IoError*>(&e) != nullptr) return 5;
  return 1;
}

}  // namespace gmldm::pipeline
