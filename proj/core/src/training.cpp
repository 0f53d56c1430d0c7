// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
#include "gmldm/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <optional>

#include "gmldm/errors.hpp"
#include "gmldm/metrics.hpp"

namespace gmldm {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (!(learning_rate > 0))
    throw ValidationError("TrainConfig: learning_rate must be positive");
  if (batch_size < 1)
    throw ValidationError("TrainConfig: batch_size must be >= 1");
  if (optimizer != "adamw")
    throw ValidationError("TrainConfig: unknown optimizer '" + optimizer +
                          "'");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
    throw ValidationError("TrainConfig: betas must lie in [0,1)");
  if (!(weight_decay >= 0))
    throw ValidationError("TrainConfig: weight_decay must be >= 0");
  if (!(lr_decay > 0 && lr_decay <= 1))
    throw ValidationError("TrainConfig: lr_decay must lie in (0,1]");
  if (max_steps < 1)
    throw ValidationError("TrainConfig: max_steps must be >= 1");
  if (!(grad_clip_norm >= 0))
    throw ValidationError("TrainConfig: grad_clip_norm must be >= 0");
  for (size_t i = 0; i < lr_milestones.size(); ++i) {
    if (lr_milestones[i] < 0)
      throw ValidationError("TrainConfig: milestones must be >= 0");
    if (i > 0 && lr_milestones[i] <= lr_milestones[i - 1])
      throw ValidationError(
          "TrainConfig: lr_milestones must be strictly increasing");
  }
}

double multistep_lr(double base, const std::vector<int64_t>& milestones,
                    double decay, int64_t step) {
  double lr = base;
  for (int64_t m : milestones)
    if (m <= step) lr *= decay;
  return lr;
}

void FoldSplit::validate(int64_t n) const {
  if (k < 1 || static_cast<int>(val.size()) != k ||
      static_cast<int>(train.size()) != k)
    throw ValidationError("FoldSplit: k folds required");
  std::vector<int> seen(static_cast<size_t>(n), 0);
  size_t lo = SIZE_MAX, hi = 0;
  for (const auto& f : val) {
    lo = std::min(lo, f.size());
    hi = std::max(hi, f.size());
    for (int64_t i : f) {
      if (i < 0 || i >= n) throw ValidationError("FoldSplit: index range");
      if (seen[static_cast<size_t>(i)]++)
        throw ValidationError("FoldSplit: folds must be disjoint");
    }
  }
  for (int v : seen)
    if (!v) throw ValidationError("FoldSplit: union must cover all indices");
  if (hi - lo > 1)
    throw ValidationError("FoldSplit: fold sizes must differ by <= 1");
  for (int f = 0; f < k; ++f) {
    if (train[static_cast<size_t>(f)].size() +
            val[static_cast<size_t>(f)].size() !=
        static_cast<size_t>(n))
      throw ValidationError("FoldSplit: train must complement val");
  }
}

FoldSplit kfold_split(int64_t n, int k, uint64_t seed) {
  if (k < 1) throw ValidationError("kfold_split: k must be >= 1");
  if (n < k) throw ValidationError("kfold_split: n >= k required");
  std::vector<int64_t> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  RngStream rng(seed, "folds");
  rng.shuffle(perm);

  FoldSplit s;
  s.k = k;
  s.val.resize(static_cast<size_t>(k));
  s.train.resize(static_cast<size_t>(k));
  int64_t base = n / k, rem = n % k, off = 0;
  for (int f = 0; f < k; ++f) {
    int64_t sz = base + (f < rem ? 1 : 0);
    auto& v = s.val[static_cast<size_t>(f)];
    v.assign(perm.begin() + off, perm.begin() + off + sz);
    std::sort(v.begin(), v.end());
    auto& t = s.train[static_cast<size_t>(f)];
    t.reserve(static_cast<size_t>(n - sz));
    for (int64_t i = 0; i < n; ++i)
      if (!std::binary_search(v.begin(), v.end(), i)) t.push_back(i);
    off += sz;
  }
  s.validate(n);
  return s;
}

double clip_gradients(ag::ParamStore& params, double max_norm) {
  double sq = 0;
  for (const auto& [name, p] : params.items()) {
    if (!p->grad.defined()) continue;
    const float* g = p->grad.data();
    for (int64_t i = 0; i < p->grad.numel(); ++i)
      sq += static_cast<double>(g[i]) * g[i];
  }
  double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    float s = static_cast<float>(max_norm / norm);
    for (const auto& [name, p] : params.items()) {
      if (!p->grad.defined()) continue;
      float* g = p->grad.data();
      for (int64_t i = 0; i < p->grad.numel(); ++i) g[i] *= s;
    }
  }
  return norm;
}

AdamW::AdamW(ag::ParamStore& params, const TrainConfig& cfg)
    : params_(&params),
      beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      weight_decay_(cfg.weight_decay) {
  cfg.validate();
  m_.reserve(params.items().size());
  v_.reserve(params.items().size());
  for (const auto& [name, p] : params.items()) {
    m_.push_back(Tensor::zeros(p->value.shape()));
    v_.push_back(Tensor::zeros(p->value.shape()));
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto& items = params_->items();
  for (size_t i = 0; i < items.size(); ++i) {
    const auto& p = items[i].second;
    if (!p->grad.defined()) continue;  // path unused by this loss
    float* w = p->value.data();
    const float* g = p->grad.data();
    float* m = m_[i].data();
    float* v = v_[i].data();
    for (int64_t j = 0; j < p->value.numel(); ++j) {
      double gj = g[j];
      double mj = beta1_ * m[j] + (1.0 - beta1_) * gj;
      double vj = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      double update = (mj / bc1) / (std::sqrt(vj / bc2) + 1e-8) +
                      weight_decay_ * static_cast<double>(w[j]);
      w[j] = static_cast<float>(w[j] - lr * update);
    }
  }
}

void AdamW::save_state(io::Checkpoint& ck, const std::string& prefix) const {
  ck.meta[prefix + "opt_step"] = t_;
  const auto& items = params_->items();
  for (size_t i = 0; i < items.size(); ++i) {
    ck.add(prefix + "opt.m." + items[i].first, m_[i]);
    ck.add(prefix + "opt.v." + items[i].first, v_[i]);
  }
}

void AdamW::load_state(const io::Checkpoint& ck, const std::string& prefix) {
  if (!ck.meta.contains(prefix + "opt_step"))
    throw IoError("AdamW state missing from checkpoint");
  t_ = ck.meta.at(prefix + "opt_step").get<int64_t>();
  const auto& items = params_->items();
  for (size_t i = 0; i < items.size(); ++i) {
    for (auto [buf, tag] : {std::pair{&m_[i], "opt.m."},
                            std::pair{&v_[i], "opt.v."}}) {
      const Tensor& src = ck.get(prefix + tag + items[i].first);
      if (src.shape() != buf->shape())
        throw IoError("AdamW state shape mismatch for " + items[i].first);
      std::memcpy(buf->data(), src.data(),
                  static_cast<size_t>(src.numel()) * sizeof(float));
    }
  }
}

std::vector<double> TrainHistory::totals() const {
  std::vector<double> out;
  out.reserve(steps.size());
  for (const auto& r : steps) out.push_back(r.total);
  return out;
}

void TrainHistory::save_csv(const fs::path& p) const {
  io::CsvWriter w(p, {"step", "total", "kl", "recon", "lr"});
  for (const auto& r : steps)
    w.row({std::to_string(r.step), io::fmt_g9(r.total), io::fmt_g9(r.kl),
           io::fmt_g9(r.recon), io::fmt_g9(r.lr)});
}

std::vector<double> smooth(const std::vector<double>& xs, int window) {
  if (window < 1) throw ValidationError("smooth: window must be >= 1");
  std::vector<double> out(xs.size());
  double run = 0;
  for (size_t i = 0; i < xs.size(); ++i) {
    run += xs[i];
    if (i >= static_cast<size_t>(window)) run -= xs[i - window];
    out[i] = run / std::min<size_t>(i + 1, static_cast<size_t>(window));
  }
  return out;
}

bool smoothed_monotone_decrease(const std::vector<double>& xs, int window,
                                double slack) {
  if (xs.size() < 2) return false;
  std::vector<double> s = smooth(xs, window);
  // Partial leading windows are noisy by construction; judge the curve only
  // once the window is full.
  size_t start = std::min<size_t>(static_cast<size_t>(window) - 1,
                                  s.size() - 2);
  double drop = s[start] - s.back();
  if (!(drop > 0)) return false;
  double max_rise = 0;
  for (size_t i = start + 1; i < s.size(); ++i)
    max_rise = std::max(max_rise, s[i] - s[i - 1]);
  return max_rise <= slack * drop;
}

void Dataset::validate() const {
  if (volumes.empty()) throw ValidationError("Dataset: empty");
  if (fncs.size() != volumes.size() || subject_ids.size() != volumes.size() ||
      groups.size() != volumes.size())
    throw ValidationError("Dataset: parallel arrays must align");
  for (size_t i = 0; i < volumes.size(); ++i) {
    if (volumes[i].L != volumes[0].L || volumes[i].W != volumes[0].W ||
        volumes[i].H != volumes[0].H)
      throw ValidationError("Dataset: all volumes must share one shape");
    if (fncs[i].K != fncs[0].K)
      throw ValidationError("Dataset: all FNC matrices must share one K");
  }
}

Dataset Dataset::generate(const PhantomSpec& spec, int64_t n) {
  spec.validate();
  if (n < 1) throw ValidationError("Dataset::generate: n must be >= 1");
  Dataset d;
  d.spec = spec;
  d.volumes.reserve(static_cast<size_t>(n));
  d.fncs.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    auto [vol, fnc] = generate_phantom(spec, i);
    d.volumes.push_back(std::move(vol));
    d.fncs.push_back(std::move(fnc));
    char id[24];
    std::snprintf(id, sizeof id, "s%04lld", static_cast<long long>(i));
    d.subject_ids.emplace_back(id);
    d.groups.push_back(is_patient(spec, i) ? GroupLabel::patient
                                           : GroupLabel::control);
  }
  d.validate();
  return d;
}

Dataset Dataset::load(const DatasetManifest& m) {
  Dataset d;
  d.spec = m.spec;
  for (size_t i = 0; i < m.entries.size(); ++i) {
    d.volumes.push_back(load_volume(m.volume_file(i)));
    d.fncs.push_back(load_fnc(m.fnc_file(i)));
    d.subject_ids.push_back(m.entries[i].subject_id);
    d.groups.push_back(m.entries[i].group);
  }
  d.validate();
  return d;
}

namespace {

std::vector<int64_t> resolve_subset(const Dataset& data,
                                    const std::vector<int64_t>& subset,
                                    const char* who) {
  std::vector<int64_t> pool = subset;
  if (pool.empty()) {
    pool.resize(static_cast<size_t>(data.size()));
    std::iota(pool.begin(), pool.end(), 0);
  }
  for (int64_t i : pool)
    if (i < 0 || i >= data.size())
      throw ValidationError(std::string(who) + ": subset index out of range");
  return pool;
}

// (B,1,L,W,H) batch in volume_to_tensor's axis order.
Tensor stack_volumes(const Dataset& data, const std::vector<int64_t>& idx) {
  const Volume3D& v0 = data.volumes[0];
  Tensor out({static_cast<int64_t>(idx.size()), 1, v0.L, v0.W, v0.H});
  int64_t n = v0.numel();
  for (size_t b = 0; b < idx.size(); ++b) {
    Tensor one = volume_to_tensor(data.volumes[static_cast<size_t>(idx[b])]);
    std::memcpy(out.data() + static_cast<int64_t>(b) * n, one.data(),
                static_cast<size_t>(n) * sizeof(float));
  }
  return out;
}

struct AeLossNodes {
  ag::Var total, kl, recon;
};

// total = alpha*KL + (1-alpha)*recon over a (B,1,L,W,H) batch; KL sums over
// latent elements and averages over the batch.
AeLossNodes ae_loss_graph(const Autoencoder& ae, const Tensor& xb,
                          const Tensor& eps) {
  auto x = ag::constant(xb);
  auto lat = ae.encode_graph(ae.standardize(x));
  auto sigma = ag::exp(ag::mul_scalar(lat.log_var, 0.5f));
  auto z = ag::add(lat.mu, ag::mul(sigma, ag::constant(eps)));
  auto y_std = ae.decode_graph(z);
  auto y = ae.restore(y_std, xb.dim(2), xb.dim(3), xb.dim(4));
  AeLossNodes out;
  out.recon = ag::mse(y, x);
  auto inner = ag::add_scalar(
      ag::sub(ag::sub(lat.log_var, ag::square(lat.mu)), ag::exp(lat.log_var)),
      1.0f);
  out.kl = ag::mul_scalar(ag::sum_all(inner),
                          -0.5f / static_cast<float>(xb.dim(0)));
  float a = static_cast<float>(ae.config().alpha);
  out.total =
      ag::add(ag::mul_scalar(out.kl, a), ag::mul_scalar(out.recon, 1.0f - a));
  return out;
}

std::vector<Tensor> snapshot_params(const ag::ParamStore& params) {
  std::vector<Tensor> snap;
  snap.reserve(params.items().size());
  for (const auto& [name, p] : params.items()) snap.push_back(p->value.clone());
  return snap;
}

struct StatePart {
  std::string prefix;  // "" or "ae."
  ag::ParamStore* params;
  AdamW* opt;
};

void save_train_state(const fs::path& path, int64_t next_step,
                      const std::vector<StatePart>& parts) {
  io::Checkpoint ck;
  ck.meta["kind"] = "train-state";
  ck.meta["step"] = next_step;
  for (const auto& part : parts) {
    for (const auto& [name, p] : part.params->items())
      ck.add(part.prefix + "p." + name, p->value);
    part.opt->save_state(ck, part.prefix);
  }
  ck.save(path);
}

int64_t load_train_state(const fs::path& path,
                         const std::vector<StatePart>& parts) {
  io::Checkpoint ck = io::Checkpoint::load(path);
  if (!ck.meta.contains("kind") || ck.meta["kind"] != "train-state")
    throw IoError("not a train-state checkpoint: " + path.string());
  for (const auto& part : parts) {
    for (const auto& [name, p] : part.params->items()) {
      const Tensor& src = ck.get(part.prefix + "p." + name);
      if (src.shape() != p->value.shape())
        throw IoError("train-state shape mismatch for " + name);
      std::memcpy(p->value.data(), src.data(),
                  static_cast<size_t>(src.numel()) * sizeof(float));
    }
    part.opt->load_state(ck, part.prefix);
  }
  return ck.meta.at("step").get<int64_t>();
}

// Diagnostic checkpoint of the last parameters that produced a finite loss.
void save_last_good(const fs::path& dir, const char* stem,
                    const ag::ParamStore& params,
                    const std::vector<Tensor>& snap, int64_t step) {
  if (dir.empty()) return;
  fs::create_directories(dir);
  io::Checkpoint ck;
  ck.meta["kind"] = "last-good";
  ck.meta["step"] = step;
  const auto& items = params.items();
  for (size_t i = 0; i < items.size(); ++i)
    ck.add("p." + items[i].first, snap[i]);
  ck.save(dir / (std::string(stem) + "_lastgood.gmlc"));
}

void restore_snapshot(ag::ParamStore& params,
                      const std::vector<Tensor>& snap) {
  const auto& items = params.items();
  for (size_t i = 0; i < items.size(); ++i)
    std::memcpy(items[i].second->value.data(), snap[i].data(),
                static_cast<size_t>(snap[i].numel()) * sizeof(float));
}

bool loss_finite(double v) { return std::isfinite(v); }

void mark_convergence(TrainHistory& h) {
  size_t n = h.steps.size();
  if (n < 20) {
    h.converged = true;
    return;
  }
  size_t tenth = std::max<size_t>(1, n / 10);
  double first = 0, last = 0;
  for (size_t i = 0; i < tenth; ++i) first += h.steps[i].total;
  for (size_t i = n - tenth; i < n; ++i) last += h.steps[i].total;
  h.converged = last < first;
}

}  // namespace

TrainHistory pretrain_autoencoder(const Dataset& data, Autoencoder& ae,
                                  const TrainConfig& cfg,
                                  const PretrainOptions& opt) {
  cfg.validate();
  data.validate();
  auto pool = resolve_subset(data, opt.subset, "pretrain_autoencoder");
  const auto& c = ae.config();
  Shape lat = c.latent_shape();

  AdamW optimizer(ae.params(), cfg);
  int64_t start = 0;
  if (!opt.resume_from.empty())
    start = load_train_state(opt.resume_from, {{"", &ae.params(), &optimizer}});

  TrainHistory hist;
  std::vector<Tensor> last_good = snapshot_params(ae.params());
  int64_t last_good_step = start;

  for (int64_t step = start; step < cfg.max_steps; ++step) {
    RngStream bs(cfg.seed, "batch", static_cast<uint64_t>(step));
    std::vector<int64_t> idx(static_cast<size_t>(cfg.batch_size));
    for (auto& i : idx)
      i = pool[static_cast<size_t>(
          bs.uniform_int(0, static_cast<int64_t>(pool.size())))];
    Tensor xb = stack_volumes(data, idx);

    Tensor eps({cfg.batch_size, lat[0], lat[1], lat[2], lat[3]});
    RngStream ns(cfg.seed, "noise", static_cast<uint64_t>(step));
    ns.fill_normal(std::span<float>(eps.data(),
                                    static_cast<size_t>(eps.numel())));

    auto losses = ae_loss_graph(ae, xb, eps);
    double total = losses.total->value[0];
    double kl = losses.kl->value[0];
    double recon = losses.recon->value[0];
    if (!loss_finite(total) || !loss_finite(kl) || !loss_finite(recon)) {
      save_last_good(opt.out_dir, "ae", ae.params(), last_good,
                     last_good_step);
      restore_snapshot(ae.params(), last_good);
      throw NumericsError(
          "pretrain_autoencoder: non-finite loss at step " +
          std::to_string(step) +
          (opt.out_dir.empty()
               ? ""
               : "; last-good checkpoint written to " +
                     (opt.out_dir / "ae_lastgood.gmlc").string()));
    }
    last_good = snapshot_params(ae.params());
    last_good_step = step;

    ae.params().zero_grads();
    ag::backward(losses.total);
    clip_gradients(ae.params(), cfg.grad_clip_norm);
    double lr = multistep_lr(cfg.learning_rate, cfg.lr_milestones,
                             cfg.lr_decay, step);
    optimizer.step(lr);
    hist.steps.push_back({step, total, kl, recon, lr});
  }
  mark_convergence(hist);

  if (!opt.out_dir.empty()) {
    fs::create_directories(opt.out_dir);
    ae.save(opt.out_dir / "autoencoder.gmlc");
    save_train_state(opt.out_dir / "ae_state.gmlc", cfg.max_steps,
                     {{"", &ae.params(), &optimizer}});
    hist.save_csv(opt.out_dir / "ae_history.csv");
  }
  return hist;
}

std::string to_string(ConditionMode m) {
  return m == ConditionMode::fnc ? "fnc" : "random_vector";
}

ConditionMode condition_mode_from_string(const std::string& s) {
  if (s == "fnc") return ConditionMode::fnc;
  if (s == "random_vector") return ConditionMode::random_vector;
  throw ValidationError("unknown condition mode '" + s + "'");
}

namespace {

// (1,1,K,K) condition image for one subject; random mode draws a per-subject
// matrix that stays fixed across steps.
Tensor condition_image(const Dataset& data, int64_t i, ConditionMode mode,
                       uint64_t seed) {
  if (mode == ConditionMode::fnc)
    return fnc_to_image(data.fncs[static_cast<size_t>(i)]);
  Tensor r = random_condition(data.fncs[static_cast<size_t>(i)],
                              derive_seed(seed, "rand-cond",
                                          static_cast<uint64_t>(i)));
  int64_t k = r.dim(0);
  return r.reshaped({1, 1, k, k});
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  Shape s = rows[0].shape();
  s[0] = static_cast<int64_t>(rows.size());
  Tensor out(s);
  int64_t n = rows[0].numel();
  for (size_t b = 0; b < rows.size(); ++b)
    std::memcpy(out.data() + static_cast<int64_t>(b) * n, rows[b].data(),
                static_cast<size_t>(n) * sizeof(float));
  return out;
}

// Pixel-space signal: volumes map to [-1,1] via 2v-1, shape {1,L,W,H}.
Tensor pixel_z0(const Volume3D& v) {
  Tensor t = volume_to_tensor(v).reshaped({1, v.L, v.W, v.H});
  float* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = 2.0f * p[i] - 1.0f;
  return t;
}

}  // namespace

TrainHistory train_ldm(const Dataset& data, Autoencoder* ae, Denoiser& dn,
                       const diff::NoiseSchedule<float>& sch,
                       const TrainConfig& cfg, const LdmOptions& opt) {
  cfg.validate();
  data.validate();
  sch.validate();
  const bool pixel = ae == nullptr;
  const Volume3D& v0 = data.volumes[0];
  Shape lat = dn.latent_shape();
  if (pixel) {
    Shape expect = {1, v0.L, v0.W, v0.H};
    if (lat != expect)
      throw ValidationError("train_ldm: pixel mode needs latent shape " +
                            shape_str(expect) + ", denoiser has " +
                            shape_str(lat));
    if (opt.joint_autoencoder)
      throw ValidationError(
          "train_ldm: joint_autoencoder requires an autoencoder");
    if (opt.fresh_posterior_sample)
      throw ValidationError(
          "train_ldm: fresh_posterior_sample requires an autoencoder");
  } else if (lat != ae->config().latent_shape()) {
    throw ValidationError(
        "train_ldm: denoiser latent shape does not match the autoencoder");
  }
  if (dn.n_components() != data.fncs[0].K)
    throw ValidationError("train_ldm: denoiser n_components " +
                          std::to_string(dn.n_components()) +
                          " != dataset K " + std::to_string(data.fncs[0].K));
  if (opt.joint_autoencoder) opt.ae_train.validate();

  auto pool = resolve_subset(data, opt.subset, "train_ldm");
  const int T = sch.T();
  const int64_t lat_n = numel_of(lat);

  AdamW optimizer(dn.params(), cfg);
  std::optional<AdamW> ae_opt;
  if (opt.joint_autoencoder) ae_opt.emplace(ae->params(), opt.ae_train);

  std::vector<StatePart> parts{{"", &dn.params(), &optimizer}};
  if (opt.joint_autoencoder)
    parts.push_back({"ae.", &ae->params(), &*ae_opt});
  int64_t start = 0;
  if (!opt.resume_from.empty())
    start = load_train_state(opt.resume_from, parts);

  // Frozen-encoder latents and per-subject conditions are step-invariant.
  std::vector<GaussianLatent> lat_cache(static_cast<size_t>(data.size()));
  std::vector<char> lat_ok(static_cast<size_t>(data.size()), 0);
  std::vector<Tensor> cond_cache(static_cast<size_t>(data.size()));
  auto subject_posterior = [&](int64_t i) -> const GaussianLatent& {
    auto ui = static_cast<size_t>(i);
    if (!lat_ok[ui]) {
      lat_cache[ui] = ae->encode(data.volumes[ui]);
      lat_ok[ui] = 1;
    }
    return lat_cache[ui];
  };
  auto subject_condition = [&](int64_t i) -> const Tensor& {
    auto ui = static_cast<size_t>(i);
    if (!cond_cache[ui].defined())
      cond_cache[ui] = condition_image(data, i, opt.condition, cfg.seed);
    return cond_cache[ui];
  };

  TrainHistory hist;
  std::vector<Tensor> last_good = snapshot_params(dn.params());
  int64_t last_good_step = start;

  for (int64_t step = start; step < cfg.max_steps; ++step) {
    RngStream bs(cfg.seed, "ldm-batch", static_cast<uint64_t>(step));
    std::vector<int64_t> idx(static_cast<size_t>(cfg.batch_size));
    for (auto& i : idx)
      i = pool[static_cast<size_t>(
          bs.uniform_int(0, static_cast<int64_t>(pool.size())))];

    double kl = 0, recon = 0;
    if (opt.joint_autoencoder && !opt.eps_oracle) {
      Tensor xb = stack_volumes(data, idx);
      Tensor eps_ae({cfg.batch_size, lat[0], lat[1], lat[2], lat[3]});
      RngStream ns(cfg.seed, "ae-noise", static_cast<uint64_t>(step));
      ns.fill_normal(std::span<float>(
          eps_ae.data(), static_cast<size_t>(eps_ae.numel())));
      auto losses = ae_loss_graph(*ae, xb, eps_ae);
      kl = losses.kl->value[0];
      recon = losses.recon->value[0];
      if (!loss_finite(losses.total->value[0])) {
        save_last_good(opt.out_dir, "ldm", dn.params(), last_good,
                       last_good_step);
        restore_snapshot(dn.params(), last_good);
        throw NumericsError(
            "train_ldm: non-finite autoencoder loss at step " +
            std::to_string(step));
      }
      ae->params().zero_grads();
      ag::backward(losses.total);
      clip_gradients(ae->params(), opt.ae_train.grad_clip_norm);
      ae_opt->step(multistep_lr(opt.ae_train.learning_rate,
                                opt.ae_train.lr_milestones,
                                opt.ae_train.lr_decay, step));
    }

    // Per-sample clean latents, timesteps, injected noise.
    RngStream trng(cfg.seed, "t", static_cast<uint64_t>(step));
    std::vector<int> ts(idx.size());
    for (auto& t : ts)
      t = static_cast<int>(trng.uniform_int(1, static_cast<int64_t>(T) + 1));

    Tensor z0b({cfg.batch_size, lat[0], lat[1], lat[2], lat[3]});
    RngStream prng(cfg.seed, "posterior", static_cast<uint64_t>(step));
    for (size_t b = 0; b < idx.size(); ++b) {
      float* dst = z0b.data() + static_cast<int64_t>(b) * lat_n;
      if (pixel) {
        Tensor px = pixel_z0(data.volumes[static_cast<size_t>(idx[b])]);
        std::memcpy(dst, px.data(), static_cast<size_t>(lat_n) * sizeof(float));
      } else {
        const GaussianLatent& g = subject_posterior(idx[b]);
        const float* mu = g.mu.data();
        if (opt.fresh_posterior_sample) {
          const float* lv = g.log_var.data();
          for (int64_t j = 0; j < lat_n; ++j)
            dst[j] = mu[j] + std::exp(0.5f * lv[j]) *
                                 static_cast<float>(prng.normal());
        } else {
          std::memcpy(dst, mu, static_cast<size_t>(lat_n) * sizeof(float));
        }
      }
    }

    Tensor eps(z0b.shape());
    RngStream es(cfg.seed, "ldm-noise", static_cast<uint64_t>(step));
    es.fill_normal(
        std::span<float>(eps.data(), static_cast<size_t>(eps.numel())));
    Tensor ztb(z0b.shape());
    for (size_t b = 0; b < idx.size(); ++b) {
      int64_t off = static_cast<int64_t>(b) * lat_n;
      diff::forward_sample<float>(z0b.data() + off, eps.data() + off, lat_n,
                                  ts[b], sch, ztb.data() + off);
    }

    double total;
    if (opt.eps_oracle) {
      // Sanity seam: score the oracle's prediction, no updates.
      double sq = 0;
      for (size_t b = 0; b < idx.size(); ++b) {
        Tensor zrow(lat), erow(lat);
        int64_t off = static_cast<int64_t>(b) * lat_n;
        std::memcpy(zrow.data(), ztb.data() + off,
                    static_cast<size_t>(lat_n) * sizeof(float));
        std::memcpy(erow.data(), eps.data() + off,
                    static_cast<size_t>(lat_n) * sizeof(float));
        Tensor pred = opt.eps_oracle(zrow, ts[b], erow);
        if (pred.shape() != lat)
          throw ValidationError("train_ldm: oracle prediction shape");
        for (int64_t j = 0; j < lat_n; ++j) {
          double d = static_cast<double>(pred[j]) - erow[j];
          sq += d * d;
        }
      }
      total = sq / static_cast<double>(eps.numel());
      double lr = multistep_lr(cfg.learning_rate, cfg.lr_milestones,
                               cfg.lr_decay, step);
      hist.steps.push_back({step, total, kl, recon, lr});
      continue;
    }

    std::vector<Tensor> imgs(idx.size());
    for (size_t b = 0; b < idx.size(); ++b)
      imgs[b] = subject_condition(idx[b]);
    auto cond = dn.encode_condition(ag::constant(stack_rows(imgs)));
    auto pred = dn.denoise_graph(ag::constant(ztb), ts, cond);
    auto loss = ag::mse(pred, ag::constant(eps));
    total = loss->value[0];
    if (!loss_finite(total)) {
      save_last_good(opt.out_dir, "ldm", dn.params(), last_good,
                     last_good_step);
      restore_snapshot(dn.params(), last_good);
      throw NumericsError(
          "train_ldm: non-finite loss at step " + std::to_string(step) +
          (opt.out_dir.empty()
               ? ""
               : "; last-good checkpoint written to " +
                     (opt.out_dir / "ldm_lastgood.gmlc").string()));
    }
    last_good = snapshot_params(dn.params());
    last_good_step = step;

    dn.params().zero_grads();
    ag::backward(loss);
    clip_gradients(dn.params(), cfg.grad_clip_norm);
    double lr = multistep_lr(cfg.learning_rate, cfg.lr_milestones,
                             cfg.lr_decay, step);
    optimizer.step(lr);
    hist.steps.push_back({step, total, kl, recon, lr});

    if (!opt.out_dir.empty() &&
        std::find(cfg.lr_milestones.begin(), cfg.lr_milestones.end(), step) !=
            cfg.lr_milestones.end()) {
      fs::create_directories(opt.out_dir);
      dn.save(opt.out_dir /
              ("denoiser_step" + std::to_string(step) + ".gmlc"));
    }
  }
  mark_convergence(hist);

  if (!opt.out_dir.empty()) {
    fs::create_directories(opt.out_dir);
    dn.save(opt.out_dir / "denoiser.gmlc");
    save_train_state(opt.out_dir / "ldm_state.gmlc", cfg.max_steps, parts);
    hist.save_csv(opt.out_dir / "ldm_history.csv");
    if (opt.joint_autoencoder) ae->save(opt.out_dir / "autoencoder.gmlc");
  }
  return hist;
}

Volume3D generate_volume(const Autoencoder* ae, const Denoiser& dn,
                         const diff::NoiseSchedule<float>& sch,
                         const Tensor* cond_image, uint64_t seed, int64_t l,
                         int64_t w, int64_t h) {
  ag::NoGradGuard ng;
  Shape lat = dn.latent_shape();
  Tensor cond_tokens =
      (cond_image ? dn.encode_condition(ag::constant(*cond_image))
                  : dn.null_condition(1))
          ->value;

  Shape batched = lat;
  batched.insert(batched.begin(), 1);
  diff::DenoiseFn fn = [&](const Tensor& z_t, int t) {
    ag::NoGradGuard inner;
    auto out = dn.denoise_graph(ag::constant(z_t.reshaped(batched)), {t},
                                ag::constant(cond_tokens));
    return out->value.reshaped(lat);
  };
  Tensor z0 = diff::sample_loop(fn, lat, sch, seed);

  if (ae) return ae->decode(z0, l, w, h);
  Tensor img = z0.clone();
  float* p = img.data();
  for (int64_t i = 0; i < img.numel(); ++i) p[i] = 0.5f * (p[i] + 1.0f);
  return tensor_to_volume(img.reshaped({1, 1, lat[1], lat[2], lat[3]}));
}

std::vector<AblationCellSpec> table1_cells() {
  return {
      {"Baseline-1", "diffusion_pixel", false, ConditionMode::random_vector},
      {"Baseline-2", "ldm", false, ConditionMode::random_vector},
      {"Comparison-1", "ldm", true, ConditionMode::random_vector},
      {"Comparison-2", "ldm", false, ConditionMode::fnc},
      {"GM-LDM", "ldm", true, ConditionMode::fnc},
  };
}

namespace {

void aggregate(AblationCellResult& r) {
  auto mean_se = [](const std::vector<double>& xs, double& mean, double& se) {
    mean = 0;
    se = 0;
    if (xs.empty()) return;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    if (xs.size() < 2) return;
    double sq = 0;
    for (double x : xs) sq += (x - mean) * (x - mean);
    double sd = std::sqrt(sq / static_cast<double>(xs.size() - 1));
    se = sd / std::sqrt(static_cast<double>(xs.size()));
  };
  mean_se(r.fold_pearson, r.pearson_mean, r.pearson_se);
  mean_se(r.fold_ssim, r.ssim_mean, r.ssim_se);
}

std::string sanitize_cell(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  return s;
}

}  // namespace

AblationCellResult run_ablation_cell(
    const Dataset& data, const AblationGridConfig& cfg,
    const AblationCellSpec& cell, const FoldSplit& folds,
    const fs::path& pretrained_ae_path) {
  AblationCellResult r;
  r.spec = cell;
  const Volume3D& v0 = data.volumes[0];
  try {
    auto sch = diff::make_schedule<float>(cfg.diffusion);
    for (int f = 0; f < folds.k; ++f) {
      auto uf = static_cast<size_t>(f);
      std::optional<Autoencoder> ae;
      DenoiserConfig dcfg = cfg.denoiser;
      Shape lat;
      bool joint = false;
      if (cell.model == "diffusion_pixel") {
        dcfg.patch_size = cfg.pixel_patch;
        lat = {1, v0.L, v0.W, v0.H};
      } else if (cell.model == "ldm") {
        lat = cfg.ae.latent_shape();
        if (cell.pretrained) {
          if (pretrained_ae_path.empty())
            throw MissingArtifactError(
                "pretrained autoencoder checkpoint required for " + cell.name);
          ae.emplace(Autoencoder::load(pretrained_ae_path));
        } else {
          ae.emplace(cfg.ae, derive_seed(cfg.seed, "ae-init",
                                         static_cast<uint64_t>(f)));
          joint = true;
        }
      } else {
        throw ValidationError("unknown ablation model '" + cell.model + "'");
      }

      Denoiser dn(dcfg, lat, data.fncs[0].K,
                  derive_seed(cfg.seed, "dn-init", static_cast<uint64_t>(f)));
      TrainConfig tc = cfg.ldm_train;
      tc.seed = derive_seed(cfg.seed, "train", static_cast<uint64_t>(f));
      LdmOptions lo;
      lo.condition = cell.condition;
      lo.joint_autoencoder = joint;
      if (joint) {
        lo.ae_train = cfg.ae_train;
        lo.ae_train.seed = tc.seed;
      }
      lo.subset = folds.train[uf];
      if (!cfg.out_dir.empty())
        lo.out_dir = cfg.out_dir / cell.name / ("fold" + std::to_string(f));
      train_ldm(data, ae ? &*ae : nullptr, dn, sch, tc, lo);

      int64_t cap = cfg.eval_subjects > 0
                        ? std::min<int64_t>(cfg.eval_subjects,
                                            static_cast<int64_t>(
                                                folds.val[uf].size()))
                        : static_cast<int64_t>(folds.val[uf].size());
      double psum = 0, ssum = 0;
      for (int64_t e = 0; e < cap; ++e) {
        int64_t i = folds.val[uf][static_cast<size_t>(e)];
        Tensor cond = condition_image(data, i, cell.condition, tc.seed);
        Volume3D gen = generate_volume(
            ae ? &*ae : nullptr, dn, sch, &cond,
            derive_seed(cfg.seed, "sample", static_cast<uint64_t>(i)), v0.L,
            v0.W, v0.H);
        psum += pearson(data.volumes[static_cast<size_t>(i)], gen);
        ssum += ssim3d(data.volumes[static_cast<size_t>(i)], gen);
      }
      r.fold_pearson.push_back(psum / static_cast<double>(cap));
      r.fold_ssim.push_back(ssum / static_cast<double>(cap));
    }
    aggregate(r);
  } catch (const std::exception& e) {
    r.failed = true;
    r.error = e.what();
  }
  return r;
}

fs::path pretrain_shared_autoencoder(const Dataset& data,
                                     const AblationGridConfig& cfg) {
  cfg.ae_train.validate();
  // Pretraining pool is generated apart from the grid data, mirroring
  // pretraining on an external corpus.
  Dataset pool = data;
  if (cfg.pretrain_pool > 0) {
    PhantomSpec pspec = data.spec;
    pspec.seed = derive_seed(cfg.seed, "pretrain-pool");
    pool = Dataset::generate(pspec, cfg.pretrain_pool);
  }
  Autoencoder ae(cfg.ae, derive_seed(cfg.seed, "pretrain-init"));
  TrainConfig pc = cfg.ae_train;
  pc.seed = derive_seed(cfg.seed, "pretrain");
  PretrainOptions po;
  if (!cfg.out_dir.empty()) po.out_dir = cfg.out_dir / "pretrain";
  pretrain_autoencoder(pool, ae, pc, po);
  if (!cfg.out_dir.empty())
    return cfg.out_dir / "pretrain" / "autoencoder.gmlc";
  fs::path path = fs::temp_directory_path() /
                  ("gmldm_pretrained_ae_" + std::to_string(cfg.seed) +
                   ".gmlc");
  ae.save(path);
  return path;
}

std::vector<AblationCellResult> run_ablation_grid(
    const Dataset& data, const AblationGridConfig& cfg) {
  data.validate();
  cfg.ae.validate();
  cfg.denoiser.validate();
  cfg.diffusion.validate();
  cfg.ldm_train.validate();
  if (cfg.k_folds < 2)
    throw ValidationError("run_ablation_grid: k_folds must be >= 2");
  if (!cfg.out_dir.empty()) fs::create_directories(cfg.out_dir);

  FoldSplit folds =
      kfold_split(data.size(), cfg.k_folds, derive_seed(cfg.seed, "folds"));

  auto cells = table1_cells();
  bool any_pretrained = std::any_of(cells.begin(), cells.end(),
                                    [](const auto& c) { return c.pretrained; });
  fs::path ae_path;
  if (any_pretrained) ae_path = pretrain_shared_autoencoder(data, cfg);

  std::vector<AblationCellResult> rows;
  rows.reserve(cells.size());
  for (const auto& cell : cells)
    rows.push_back(run_ablation_cell(data, cfg, cell, folds, ae_path));

  if (!cfg.out_dir.empty()) {
    write_ablation_csv(rows, cfg.out_dir / "ablation.csv");
    write_fold_csv(rows, cfg.out_dir / "ablation_folds.csv");
  }
  return rows;
}

void write_ablation_csv(const std::vector<AblationCellResult>& rows,
                        const fs::path& p) {
  io::CsvWriter w(p, {"Name", "Model", "Pretrained", "Condition",
                      "PearsonCorr", "SSIM", "Status"});
  for (const auto& r : rows)
    w.row({r.spec.name, r.spec.model, r.spec.pretrained ? "yes" : "no",
           to_string(r.spec.condition),
           r.failed ? "nan" : io::fmt_g9(r.pearson_mean),
           r.failed ? "nan" : io::fmt_g9(r.ssim_mean),
           r.failed ? sanitize_cell("failed: " + r.error) : "ok"});
}

void write_fold_csv(const std::vector<AblationCellResult>& rows,
                    const fs::path& p) {
  io::CsvWriter w(p, {"Name", "Fold", "PearsonCorr", "SSIM"});
  for (const auto& r : rows)
    for (size_t f = 0; f < r.fold_pearson.size(); ++f)
      w.row({r.spec.name, std::to_string(f), io::fmt_g9(r.fold_pearson[f]),
             io::fmt_g9(r.fold_ssim[f])});
}

}  // namespace gmldm
