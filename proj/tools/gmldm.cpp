// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
//
// gmldm: single entry point for data generation, training, sampling,
// evaluation, ablation, and report emission. Exit codes: 0 success,
// 2 validation, 3 missing artifact, 4 numerics abort, 5 other I/O, 1 other.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gmldm/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

fs::path self_executable(const char* argv0) {
  std::error_code ec;
  fs::path p = fs::read_symlink("/proc/self/exe", ec);
  if (!ec) return p;
  return fs::absolute(argv0);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "gmldm: latent diffusion over paired GM volumes and FNC matrices"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::string data, ae, denoiser, resume, gen_dir, cell, sal_fnc, sal_rand;
  bool force = false;
  uint64_t seed = 0;
  int workers = 0;  // 0: GMLDM_WORKERS or 1

  std::vector<CLI::Option*> seed_opts;
  auto add_common = [&](CLI::App* c) {
    c->add_option("--config", config_path, "run config JSON")->required();
    c->add_option("--out", out_dir, "output directory for this run")
        ->required();
    c->add_flag("--force", force, "write into a non-empty output directory");
    seed_opts.push_back(
        c->add_option("--seed", seed, "override the config seed"));
    return c;
  };

  CLI::App* c_gen = add_common(
      app.add_subcommand("gen-data", "generate a paired phantom dataset"));
  CLI::App* c_pre = add_common(app.add_subcommand(
      "pretrain-ae", "pretrain the KL-regularized autoencoder"));
  c_pre->add_option("--data", data, "dataset manifest")->required();
  c_pre->add_option("--resume", resume, "training state to resume from");
  CLI::App* c_ldm = add_common(app.add_subcommand(
      "train-ldm", "train the latent (or pixel-space) denoiser"));
  c_ldm->add_option("--data", data, "dataset manifest")->required();
  c_ldm->add_option("--ae", ae, "frozen pretrained autoencoder checkpoint");
  c_ldm->add_option("--resume", resume, "training state to resume from");
  CLI::App* c_smp = add_common(
      app.add_subcommand("sample", "generate volumes by ancestral sampling"));
  c_smp->add_option("--data", data, "dataset manifest")->required();
  c_smp->add_option("--denoiser", denoiser, "denoiser checkpoint")
      ->required();
  c_smp->add_option("--ae", ae, "autoencoder checkpoint (omit: pixel mode)");
  CLI::App* c_evl = add_common(app.add_subcommand(
      "eval", "score generated volumes against the real ones"));
  c_evl->add_option("--data", data, "dataset manifest")->required();
  c_evl->add_option("--gen", gen_dir, "directory of gen_<subject>.vol files")
      ->required();
  CLI::App* c_abl = add_common(
      app.add_subcommand("ablate", "run the five-cell ablation grid"));
  c_abl->add_option("--data", data, "dataset manifest")->required();
  c_abl->add_option("--workers", workers,
                    "parallel worker processes (default GMLDM_WORKERS or 1)");
  c_abl->add_option("--cell", cell, "run a single grid cell")->group("");
  CLI::App* c_rep = add_common(app.add_subcommand(
      "report", "render montages, metrics, and the saliency map"));
  c_rep->add_option("--data", data, "dataset manifest")->required();
  c_rep->add_option("--gen", gen_dir, "directory of gen_<subject>.vol files")
      ->required();
  c_rep->add_option("--saliency-fnc", sal_fnc,
                    "directory of fnc-conditioned samples");
  c_rep->add_option("--saliency-random", sal_rand,
                    "directory of random-conditioned samples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // usage problems are validation errors
  }

  using namespace gmldm;
  try {
    pipeline::RunConfig cfg = pipeline::RunConfig::from_file(config_path);
    bool seed_given = false;
    for (const CLI::Option* o : seed_opts) seed_given |= o->count() > 0;
    if (seed_given) {
      cfg.seed = seed;
      cfg.phantom.seed = seed;
    }
    pipeline::RunContext ctx{fs::path(out_dir), force};

    if (c_gen->parsed()) {
      fs::path mp = pipeline::cmd_gen_data(cfg, ctx);
      std::printf("%s\n", mp.string().c_str());
    } else if (c_pre->parsed()) {
      pipeline::cmd_pretrain_ae(cfg, data, resume, ctx);
    } else if (c_ldm->parsed()) {
      pipeline::cmd_train_ldm(cfg, data, ae, resume, ctx);
    } else if (c_smp->parsed()) {
      pipeline::cmd_sample(cfg, data, denoiser, ae, ctx);
    } else if (c_evl->parsed()) {
      MetricReport r = pipeline::cmd_eval(cfg, data, gen_dir, ctx);
      std::printf("pearson %.6f ssim %.6f over %zu subjects\n", r.pearson,
                  r.ssim, r.subjects.size());
    } else if (c_abl->parsed()) {
      pipeline::AblateArgs a;
      a.data_manifest = data;
      a.only_cell = cell;
      a.workers = workers > 0 ? workers : pipeline::workers_from_env();
      a.self_exe = self_executable(argv[0]);
      auto rows = pipeline::cmd_ablate(cfg, a, ctx);
      for (const auto& r : rows)
        std::printf("%-13s pearson %.4f ssim %.4f%s\n", r.spec.name.c_str(),
                    r.pearson_mean, r.ssim_mean, r.failed ? "  FAILED" : "");
    } else if (c_rep->parsed()) {
      pipeline::ReportArgs a;
      a.data_manifest = data;
      a.generated_dir = gen_dir;
      a.saliency_fnc_dir = sal_fnc;
      a.saliency_random_dir = sal_rand;
      pipeline::cmd_report(cfg, a, ctx);
    }
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "gmldm: error: %s\n", e.what());
    return pipeline::exit_code_for(e);
  }
}
