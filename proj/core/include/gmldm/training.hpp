// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
//
// Optimization loops: AdamW with multi-step LR decay and gradient clipping,
// k-fold splits, autoencoder pretraining, latent/pixel diffusion training,
// ancestral sampling into volumes, and the five-cell ablation grid runner.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "gmldm/autoencoder.hpp"
#include "gmldm/denoiser.hpp"
#include "gmldm/diffusion.hpp"
#include "gmldm/io.hpp"
#include "gmldm/volumes.hpp"

namespace gmldm {

struct TrainConfig {
  double learning_rate = 2e-4;  // autoencoder default; LDM runs use 3e-5
  int64_t batch_size = 16;      // desk-scale override: 4
  std::string optimizer = "adamw";
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  std::vector<int64_t> lr_milestones;  // strictly increasing step indices
  double lr_decay = 0.1;
  int64_t max_steps = 1000;
  uint64_t seed = 0;
  double grad_clip_norm = 1.0;  // 0 disables clipping

  void validate() const;
};

// Piecewise-constant rate: base * decay^(number of milestones <= step).
// The decayed rate takes effect exactly at the milestone step.
double multistep_lr(double base, const std::vector<int64_t>& milestones,
                    double decay, int64_t step);

struct FoldSplit {
  int k = 5;
  std::vector<std::vector<int64_t>> train;  // per-fold training indices
  std::vector<std::vector<int64_t>> val;    // per-fold held-out indices

  // disjoint folds, union = [0,n), sizes differ by <= 1
  void validate(int64_t n) const;
};
FoldSplit kfold_split(int64_t n, int k, uint64_t seed);

// Scales every gradient in place so the global L2 norm is at most max_norm
// (no-op when max_norm <= 0 or the norm is already within the bound).
// Returns the pre-clip global norm. Parameters without a gradient count 0.
double clip_gradients(ag::ParamStore& params, double max_norm);

// Decoupled-weight-decay Adam over a ParamStore. Moments are kept per
// parameter and serialize into training-state checkpoints for exact resume.
class AdamW {
 public:
  AdamW(ag::ParamStore& params, const TrainConfig& cfg);

  // One update with the given rate; parameters with undefined gradients
  // (paths unused by the loss) are left untouched.
  void step(double lr);
  int64_t steps_taken() const { return t_; }

  void save_state(io::Checkpoint& ck, const std::string& prefix) const;
  void load_state(const io::Checkpoint& ck, const std::string& prefix);

 private:
  ag::ParamStore* params_;
  double beta1_, beta2_, weight_decay_;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;  // aligned with params_->items()
};

struct StepRecord {
  int64_t step = 0;  // 0-based
  double total = 0, kl = 0, recon = 0, lr = 0;
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  bool converged = true;  // last-10% mean loss < first-10% mean loss

  std::vector<double> totals() const;
  // header: step,total,kl,recon,lr
  void save_csv(const std::filesystem::path& p) const;
};

// Moving average with the given window (leading partial windows use the
// prefix mean), then a monotone-decrease check over the fully-windowed part
// of the curve: every rise must be <= slack * (overall drop).
std::vector<double> smooth(const std::vector<double>& xs, int window);
bool smoothed_monotone_decrease(const std::vector<double>& xs, int window,
                                double slack = 0.0);

// Fully materialized paired dataset; all volumes share one shape.
struct Dataset {
  PhantomSpec spec;
  std::vector<Volume3D> volumes;
  std::vector<FNCMatrix> fncs;
  std::vector<std::string> subject_ids;
  std::vector<GroupLabel> groups;

  int64_t size() const { return static_cast<int64_t>(volumes.size()); }
  void validate() const;

  static Dataset generate(const PhantomSpec& spec, int64_t n);
  static Dataset load(const DatasetManifest& m);
};

struct PretrainOptions {
  std::filesystem::path out_dir;      // empty: no files written
  std::filesystem::path resume_from;  // training-state checkpoint
  std::vector<int64_t> subset;        // indices to train on; empty: all
};

// VAE training: per step, total = alpha*KL + (1-alpha)*recon over a batch
// sampled with replacement. On a non-finite loss the last parameters that
// produced a finite loss are checkpointed and NumericsError is thrown.
// Writes <out_dir>/autoencoder.gmlc, ae_state.gmlc and ae_history.csv.
TrainHistory pretrain_autoencoder(const Dataset& data, Autoencoder& ae,
                                  const TrainConfig& cfg,
                                  const PretrainOptions& opt = {});

enum class ConditionMode { fnc, random_vector };
std::string to_string(ConditionMode m);
ConditionMode condition_mode_from_string(const std::string& s);

// Sanity seam: replaces the denoiser output with a synthetic prediction
// built from the step's true noise (no parameter updates happen).
using EpsOracle = std::function<Tensor(const Tensor& z_t, int t,
                                       const Tensor& true_eps)>;

struct LdmOptions {
  ConditionMode condition = ConditionMode::fnc;
  // Train the (randomly initialized) autoencoder alongside the denoiser for
  // the same step budget; requires ae != nullptr.
  bool joint_autoencoder = false;
  TrainConfig ae_train;  // optimizer settings for the joint autoencoder
  // Diffuse the sampled posterior instead of the posterior mean.
  bool fresh_posterior_sample = false;
  std::filesystem::path out_dir;      // empty: no files written
  std::filesystem::path resume_from;  // training-state checkpoint
  std::vector<int64_t> subset;        // indices to train on; empty: all
  EpsOracle eps_oracle;               // empty: train the real denoiser
};

// Epsilon-prediction training. ae == nullptr runs in pixel space: volumes
// map to [-1,1] via 2v-1 and the denoiser's latent shape must be
// {1,L,W,H}. Latent mode diffuses the frozen encoder's posterior mean and
// caches per-subject latents unless joint_autoencoder is set. History rows
// carry total = eps MSE; kl/recon mirror the joint autoencoder when active.
// Writes <out_dir>/denoiser.gmlc, ldm_state.gmlc and ldm_history.csv, plus
// denoiser checkpoints at LR milestones.
TrainHistory train_ldm(const Dataset& data, Autoencoder* ae, Denoiser& dn,
                       const diff::NoiseSchedule<float>& sch,
                       const TrainConfig& cfg, const LdmOptions& opt = {});

// Ancestral sampling into a volume at the dataset's native shape.
// cond_image: (1,1,K,K) condition or nullptr for the learned null path.
// ae == nullptr decodes pixel-space samples via (z+1)/2.
Volume3D generate_volume(const Autoencoder* ae, const Denoiser& dn,
                         const diff::NoiseSchedule<float>& sch,
                         const Tensor* cond_image, uint64_t seed, int64_t l,
                         int64_t w, int64_t h);

struct AblationCellSpec {
  std::string name;   // Table-1 row label
  std::string model;  // "diffusion_pixel" | "ldm"
  bool pretrained = false;
  ConditionMode condition = ConditionMode::random_vector;
};

// Baseline-1, Baseline-2, Comparison-1, Comparison-2, GM-LDM.
std::vector<AblationCellSpec> table1_cells();

struct AblationCellResult {
  AblationCellSpec spec;
  std::vector<double> fold_pearson, fold_ssim;
  double pearson_mean = 0, pearson_se = 0;
  double ssim_mean = 0, ssim_se = 0;
  bool failed = false;
  std::string error;
};

struct AblationGridConfig {
  AEConfig ae;
  DenoiserConfig denoiser;
  diff::DiffusionConfig diffusion;
  TrainConfig ae_train;   // shared-pool pretraining + joint-AE cells
  TrainConfig ldm_train;  // per-cell-fold denoiser budget
  int k_folds = 5;
  int pixel_patch = 8;        // patch size for the pixel-space cell
  int64_t pretrain_pool = 0;  // 0: pretrain on the grid dataset itself
  int64_t eval_subjects = 0;  // cap on val subjects scored per fold; 0: all
  uint64_t seed = 0;
  std::filesystem::path out_dir;
};

// Pretrains the shared autoencoder used by the pretrained cells and returns
// its checkpoint path (under <out_dir>/pretrain when out_dir is set).
std::filesystem::path pretrain_shared_autoencoder(const Dataset& data,
                                                  const AblationGridConfig&
                                                      cfg);

// Runs one cell across all folds. pretrained_ae_path may be empty for cells
// that do not use pretraining. Exceptions are caught into .failed/.error.
AblationCellResult run_ablation_cell(
    const Dataset& data, const AblationGridConfig& cfg,
    const AblationCellSpec& cell, const FoldSplit& folds,
    const std::filesystem::path& pretrained_ae_path);

// Pretrains the shared autoencoder once, then runs all five cells.
// Writes <out_dir>/ablation.csv and <out_dir>/ablation_folds.csv.
std::vector<AblationCellResult> run_ablation_grid(
    const Dataset& data, const AblationGridConfig& cfg);

// Columns: Name,Model,Pretrained,Condition,PearsonCorr,SSIM,Status.
void write_ablation_csv(const std::vector<AblationCellResult>& rows,
                        const std::filesystem::path& p);
void write_fold_csv(const std::vector<AblationCellResult>& rows,
                    const std::filesystem::path& p);

}  // namespace gmldm
