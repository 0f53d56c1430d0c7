// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run orchestration behind the CLI: strict JSON run configs, resolved-config
// snapshots, and the gen-data / pretrain-ae / train-ldm / sample / eval /
// ablate / report commands. Every command is a plain function over a config
// and an output directory so tests can drive the pipeline in-process.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gmldm/autoencoder.hpp"
#include "gmldm/denoiser.hpp"
#include "gmldm/diffusion.hpp"
#include "gmldm/io.hpp"
#include "gmldm/metrics.hpp"
#include "gmldm/training.hpp"
#include "gmldm/volumes.hpp"

namespace gmldm::pipeline {

// Full run configuration. Parsing is strict: an unknown key anywhere raises
// ValidationError so a typo never silently falls back to a default. Training
// seeds are not config surface; every stream derives from the root seed.
struct RunConfig {
  uint64_t seed = 0;

  // data
  PhantomSpec phantom;  // phantom.seed always mirrors the run seed
  int64_t n_subjects = 100;

  AEConfig ae;
  DenoiserConfig denoiser;
  diff::DiffusionConfig diffusion;  // desk defaults: T=50, beta_end=0.2
  TrainConfig ae_train;
  TrainConfig ldm_train;  // desk default learning_rate 3e-5

  // ldm
  ConditionMode condition = ConditionMode::fnc;
  bool joint_autoencoder = false;
  bool fresh_posterior_sample = false;

  // ablation
  int k_folds = 5;
  int pixel_patch = 8;
  int64_t pretrain_pool = 0;
  int64_t eval_subjects = 0;

  // sample
  std::vector<int64_t> sample_subjects;   // empty: every manifest subject
  std::string sample_condition = "fnc";   // fnc | random | null | file
  std::filesystem::path condition_file;   // .fnc read when condition=="file"

  // report
  int64_t report_subjects = 4;  // montage count cap

  RunConfig();
  void validate() const;

  // j must be the object form written by to_json (snapshot keys "command"
  // and "inputs" are tolerated so snapshots re-parse).
  static RunConfig from_json(const io::json& j);
  static RunConfig from_file(const std::filesystem::path& p);
  io::json to_json() const;  // fully resolved: every default materialized
};

// Output-directory policy shared by every command.
struct RunContext {
  std::filesystem::path out_dir;
  bool force = false;  // permit writing into an existing run directory
};

// Creates out_dir and writes the resolved-config snapshot config.json with
// the command name and its input paths. An existing snapshot is refused
// unless force is set.
void prepare_run_dir(const RunContext& ctx, const RunConfig& cfg,
                     const std::string& command, const io::json& inputs);

// Writes <out>/vols/<id>.vol, <out>/fncs/<id>.fnc and <out>/manifest.json;
// returns the manifest path. Pure function of (spec, n, seed).
std::filesystem::path cmd_gen_data(const RunConfig& cfg,
                                   const RunContext& ctx);

// KL-regularized autoencoder pretraining on the manifest dataset. Artifacts
// per training module; resume_from may name an ae_state checkpoint.
void cmd_pretrain_ae(const RunConfig& cfg,
                     const std::filesystem::path& data_manifest,
                     const std::filesystem::path& resume_from,
                     const RunContext& ctx);

// ae_checkpoint nonempty: frozen pretrained autoencoder. Empty with
// joint_autoencoder set: a fresh autoencoder trains alongside. Empty
// otherwise: pixel-space diffusion (denoiser latent {1,L,W,H}).
void cmd_train_ldm(const RunConfig& cfg,
                   const std::filesystem::path& data_manifest,
                   const std::filesystem::path& ae_checkpoint,
                   const std::filesystem::path& resume_from,
                   const RunContext& ctx);

// Ancestral sampling per selected subject into <out>/gen_<subject>.vol.
// Condition source per cfg.sample_condition; the per-subject sample seed
// derives from the run seed, so reruns are bitwise identical.
void cmd_sample(const RunConfig& cfg,
                const std::filesystem::path& data_manifest,
                const std::filesystem::path& denoiser_checkpoint,
                const std::filesystem::path& ae_checkpoint,
                const RunContext& ctx);

// Pairs <generated_dir>/gen_<subject>.vol files with the manifest's real
// volumes and writes <out>/metrics.csv.
MetricReport cmd_eval(const RunConfig& cfg,
                      const std::filesystem::path& data_manifest,
                      const std::filesystem::path& generated_dir,
                      const RunContext& ctx);

struct AblateArgs {
  std::filesystem::path data_manifest;
  std::string only_cell;           // worker mode: run exactly this row
  int workers = 1;                 // > 1 fans cells out to child processes
  std::filesystem::path self_exe;  // binary re-executed for workers
};

// Five-cell Table-1 grid. The parent pretrains the shared autoencoder, runs
// cells (in-process, or via workers writing cells/<name>/cell.json), then
// writes ablation.csv and ablation_folds.csv. Worker mode (only_cell set)
// writes just its cell.json.
std::vector<AblationCellResult> cmd_ablate(const RunConfig& cfg,
                                           const AblateArgs& args,
                                           const RunContext& ctx);

struct ReportArgs {
  std::filesystem::path data_manifest;
  std::filesystem::path generated_dir;
  // Optional saliency inputs: two directories of .vol samples drawn under
  // fnc and random conditioning respectively.
  std::filesystem::path saliency_fnc_dir;
  std::filesystem::path saliency_random_dir;
};

// Renders per-subject real-vs-generated mid-slice montages (axial, coronal,
// sagittal) as PGM plus metrics.csv; with saliency inputs also writes
// saliency.pgm and region_ranking.csv.
void cmd_report(const RunConfig& cfg, const ReportArgs& args,
                const RunContext& ctx);

// GMLDM_WORKERS environment override; unset or empty means 1.
int workers_from_env();

// CLI exit codes: ValidationError 2, MissingArtifactError 3, NumericsError
// 4, other IoError 5, anything else 1.
int exit_code_for(const std::exception& e);

}  // namespace gmldm::pipeline
