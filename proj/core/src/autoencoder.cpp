// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
#include "gmldm/autoencoder.hpp"

#include <cmath>

#include "gmldm/errors.hpp"
#include "gmldm/io.hpp"
#include "gmldm/rng.hpp"

namespace gmldm {

using ag::Var;

void AEConfig::validate() const {
  if (L % 8 || W % 8 || H % 8 || L < 8 || W < 8 || H < 8)
    throw ValidationError("AEConfig: standardized dims must be divisible by 8");
  if (alpha < 0.0 || alpha > 1.0)
    throw ValidationError("AEConfig: alpha in [0,1]");
  if (channel_mult.size() != 3)
    throw ValidationError("AEConfig: exactly 3 resolution levels expected");
  if (base_channels < 1 || latent_channels < 1)
    throw ValidationError("AEConfig: channel counts must be positive");
  if (conv_layers_per_module < 1)
    throw ValidationError("AEConfig: conv_layers_per_module >= 1");
  for (int l : attention_levels)
    if (l < 0 || l > 2)
      throw ValidationError("AEConfig: attention level out of [0,2]");
  for (int m : channel_mult) {
    if (m < 1) throw ValidationError("AEConfig: channel multiplier >= 1");
    if ((base_channels * m) % groupnorm_groups)
      throw ValidationError(
          "AEConfig: every channel count must divide by groupnorm_groups");
  }
}

void GaussianLatent::validate(int expect_channels) const {
  if (mu.shape() != log_var.shape())
    throw ValidationError("GaussianLatent: mu/log_var shape mismatch");
  if (mu.shape().size() != 4 || mu.shape()[0] != expect_channels)
    throw ValidationError("GaussianLatent: expected channel count " +
                          std::to_string(expect_channels) + ", got " +
                          shape_str(mu.shape()));
  if (!mu.all_finite() || !log_var.all_finite())
    throw ValidationError("GaussianLatent: non-finite entries");
}

Tensor sample_latent(const GaussianLatent& g, const Tensor& eps) {
  if (eps.shape() != g.mu.shape())
    throw ValidationError("sample_latent: eps shape mismatch");
  Tensor z(g.mu.shape());
  for (int64_t i = 0; i < z.numel(); ++i)
    z[i] = g.mu[i] + std::exp(0.5f * g.log_var[i]) * eps[i];
  return z;
}

double kl_loss(const GaussianLatent& g) {
  if (!g.mu.all_finite() || !g.log_var.all_finite())
    throw ValidationError("kl_loss: non-finite latent");
  double acc = 0.0;
  for (int64_t i = 0; i < g.mu.numel(); ++i) {
    double mu = g.mu[i], lv = g.log_var[i];
    acc += 1.0 + lv - mu * mu - std::exp(lv);
  }
  return -0.5 * acc;
}

double recon_loss(const Volume3D& x, const Volume3D& x_hat) {
  if (x.L != x_hat.L || x.W != x_hat.W || x.H != x_hat.H)
    throw ValidationError("recon_loss: shape mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < x.voxels.size(); ++i) {
    double d = static_cast<double>(x.voxels[i]) - x_hat.voxels[i];
    acc += d * d;
  }
  return acc / static_cast<double>(x.numel());
}

double total_loss(double kl, double recon, double alpha) {
  if (alpha < 0.0 || alpha > 1.0)
    throw ValidationError("total_loss: alpha in [0,1]");
  return alpha * kl + (1.0 - alpha) * recon;
}

Var interp_resample(const Var& x, int64_t l, int64_t w, int64_t h,
                    const std::array<Var, 6>& lam) {
  Var base = ag::resize3d(x, l, w, h);
  Var out = base;
  for (int k = 0; k < 6; ++k) {
    int axis = k / 2;
    int dir = (k % 2) ? 1 : -1;
    Var diff = ag::sub(ag::shift3d(base, axis, dir), base);
    out = ag::add(out, ag::scale(diff, lam[static_cast<size_t>(k)]));
  }
  return out;
}

// ------------------------------------------------------------ construction

namespace {
std::string pname(const std::string& a, int i, const std::string& b,
                  int j = -1, const std::string& c = "") {
  std::string s = a + std::to_string(i) + "." + b;
  if (j >= 0) s += std::to_string(j) + "." + c;
  return s;
}
}  // namespace

Autoencoder::Autoencoder(AEConfig cfg, uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  RngStream rng(derive_seed(init_seed, "ae-init", 0));
  auto ch = [&](int level) {
    return static_cast<int64_t>(cfg_.base_channels) *
           cfg_.channel_mult[static_cast<size_t>(level)];
  };
  const int k = cfg_.conv_layers_per_module;

  for (const char* layer : {"i1", "i2"})
    for (int i = 0; i < 6; ++i)
      params_.add(std::string(layer) + ".lam" + std::to_string(i),
                  ag::zeros_init({1}));

  // encoder levels: (k-1) stride-1 convs then one stride-2 downsample
  for (int l = 0; l < 3; ++l) {
    int64_t cin = l == 0 ? 1 : ch(l - 1);
    for (int j = 0; j < k; ++j) {
      int64_t ci = j == 0 ? cin : ch(l);
      params_.add(pname("enc.l", l, "c", j, "w"),
                  ag::he_init({ch(l), ci, 3, 3, 3}, ci * 27, rng));
      params_.add(pname("enc.l", l, "c", j, "b"), ag::zeros_init({ch(l)}));
      params_.add(pname("enc.l", l, "n", j, "g"), ag::ones_init({ch(l)}));
      params_.add(pname("enc.l", l, "n", j, "b"), ag::zeros_init({ch(l)}));
    }
    bool attend = false;
    for (int a : cfg_.attention_levels) attend |= (a == l);
    if (attend) {
      int64_t c = ch(l);
      params_.add(pname("enc.l", l, "attn.ln_g"), ag::ones_init({c}));
      params_.add(pname("enc.l", l, "attn.ln_b"), ag::zeros_init({c}));
      for (const char* n : {"wq", "wk", "wv", "wo"})
        params_.add(pname("enc.l", l, std::string("attn.") + n),
                    ag::normal_init({c, c},
                                    1.0f / std::sqrt(static_cast<float>(c)),
                                    rng));
    }
  }
  params_.add("enc.mu.w",
              ag::he_init({cfg_.latent_channels, ch(2), 1, 1, 1}, ch(2), rng));
  params_.add("enc.mu.b", ag::zeros_init({cfg_.latent_channels}));
  // zero-initialized log-variance head: posterior starts at sigma = 1
  params_.add("enc.lv.w",
              ag::zeros_init({cfg_.latent_channels, ch(2), 1, 1, 1}));
  params_.add("enc.lv.b", ag::zeros_init({cfg_.latent_channels}));

  params_.add("dec.in.w",
              ag::he_init({ch(2), cfg_.latent_channels, 1, 1, 1},
                          cfg_.latent_channels, rng));
  params_.add("dec.in.b", ag::zeros_init({ch(2)}));
  params_.add("dec.in.ng", ag::ones_init({ch(2)}));
  params_.add("dec.in.nb", ag::zeros_init({ch(2)}));
  // decoder levels i=0,1,2 upsample /8 -> /4 -> /2 -> /1
  for (int i = 0; i < 3; ++i) {
    int src_level = 2 - i;
    int64_t cin = ch(src_level);
    int64_t cout = src_level == 0 ? ch(0) : ch(src_level - 1);
    for (int j = 0; j < k; ++j) {
      int64_t ci = j == 0 ? cin : cout;
      params_.add(pname("dec.l", i, "c", j, "w"),
                  ag::he_init({cout, ci, 3, 3, 3}, ci * 27, rng));
      params_.add(pname("dec.l", i, "c", j, "b"), ag::zeros_init({cout}));
      params_.add(pname("dec.l", i, "n", j, "g"), ag::ones_init({cout}));
      params_.add(pname("dec.l", i, "n", j, "b"), ag::zeros_init({cout}));
    }
  }
  params_.add("dec.out.w", ag::he_init({1, ch(0), 3, 3, 3}, ch(0) * 27, rng));
  params_.add("dec.out.b", ag::zeros_init({1}));
}

std::array<Var, 6> Autoencoder::lam(const char* layer) const {
  std::array<Var, 6> out;
  for (int i = 0; i < 6; ++i)
    out[static_cast<size_t>(i)] =
        params_.get(std::string(layer) + ".lam" + std::to_string(i));
  return out;
}

// ----------------------------------------------------------------- forward

namespace {
Var attn_block(const Var& x, const ag::ParamStore& p,
               const std::string& prefix) {
  const Shape& s = x->shape();
  int64_t n = s[0], c = s[1], spatial = s[2] * s[3] * s[4];
  Var t = ag::permute(ag::reshape(x, {n, c, spatial}), {0, 2, 1});
  Var ln = ag::layer_norm(t, p.get(prefix + "ln_g"), p.get(prefix + "ln_b"));
  Var q = ag::linear(ln, p.get(prefix + "wq"));
  Var kk = ag::linear(ln, p.get(prefix + "wk"));
  Var v = ag::linear(ln, p.get(prefix + "wv"));
  Var logits = ag::mul_scalar(ag::bmm(q, kk, true),
                              1.0f / std::sqrt(static_cast<float>(c)));
  Var out = ag::bmm(ag::softmax_lastdim(logits), v);
  out = ag::linear(out, p.get(prefix + "wo"));
  Var res = ag::add(t, out);
  Var back = ag::permute(res, {0, 2, 1});
  return ag::reshape(back, {n, c, s[2], s[3], s[4]});
}

Var conv_gn_silu(const Var& x, const ag::ParamStore& p, const std::string& w,
                 const std::string& b, const std::string& ng,
                 const std::string& nb, int stride, int groups) {
  Var h = ag::conv3d(x, p.get(w), p.get(b), stride, 1);
  h = ag::group_norm(h, groups, p.get(ng), p.get(nb));
  return ag::silu(h);
}
}  // namespace

Var Autoencoder::standardize(const Var& x_raw) const {
  return interp_resample(x_raw, cfg_.L, cfg_.W, cfg_.H, lam("i1"));
}

Var Autoencoder::restore(const Var& y_std, int64_t l, int64_t w,
                         int64_t h) const {
  return interp_resample(y_std, l, w, h, lam("i2"));
}

Autoencoder::LatentNodes Autoencoder::encode_graph(const Var& x_std) const {
  const int k = cfg_.conv_layers_per_module;
  Var h = x_std;
  for (int l = 0; l < 3; ++l) {
    for (int j = 0; j < k; ++j) {
      int stride = j == k - 1 ? 2 : 1;
      h = conv_gn_silu(h, params_, pname("enc.l", l, "c", j, "w"),
                       pname("enc.l", l, "c", j, "b"),
                       pname("enc.l", l, "n", j, "g"),
                       pname("enc.l", l, "n", j, "b"), stride,
                       cfg_.groupnorm_groups);
    }
    bool attend = false;
    for (int a : cfg_.attention_levels) attend |= (a == l);
    if (attend)
      h = attn_block(h, params_, pname("enc.l", l, "attn."));
  }
  Var mu = ag::conv3d(h, params_.get("enc.mu.w"), params_.get("enc.mu.b"), 1,
                      0);
  Var lv = ag::conv3d(h, params_.get("enc.lv.w"), params_.get("enc.lv.b"), 1,
                      0);
  return {mu, lv};
}

Var Autoencoder::decode_graph(const Var& z) const {
  const int k = cfg_.conv_layers_per_module;
  Var h = ag::conv3d(z, params_.get("dec.in.w"), params_.get("dec.in.b"), 1,
                     0);
  h = ag::group_norm(h, cfg_.groupnorm_groups, params_.get("dec.in.ng"),
                     params_.get("dec.in.nb"));
  h = ag::silu(h);
  for (int i = 0; i < 3; ++i) {
    int shift = 2 - i;  // target fraction: /4, /2, /1
    h = ag::resize3d(h, cfg_.L >> shift, cfg_.W >> shift, cfg_.H >> shift);
    for (int j = 0; j < k; ++j)
      h = conv_gn_silu(h, params_, pname("dec.l", i, "c", j, "w"),
                       pname("dec.l", i, "c", j, "b"),
                       pname("dec.l", i, "n", j, "g"),
                       pname("dec.l", i, "n", j, "b"), 1,
                       cfg_.groupnorm_groups);
  }
  return ag::conv3d(h, params_.get("dec.out.w"), params_.get("dec.out.b"), 1,
                    1);
}

// -------------------------------------------------------------------- eval

Tensor volume_to_tensor(const Volume3D& v) {
  Tensor t({1, 1, v.L, v.W, v.H});
  float* p = t.data();
  for (int64_t x = 0; x < v.L; ++x)
    for (int64_t y = 0; y < v.W; ++y)
      for (int64_t z = 0; z < v.H; ++z) p[(x * v.W + y) * v.H + z] =
          v.at(x, y, z);
  return t;
}

Volume3D tensor_to_volume(const Tensor& t) {
  Shape s = t.shape();
  if (s.size() == 5) {
    if (s[0] != 1 || s[1] != 1)
      throw ValidationError("tensor_to_volume: expected a single channel");
    s = {s[2], s[3], s[4]};
  }
  if (s.size() != 3)
    throw ValidationError("tensor_to_volume: expected (L,W,H) layout");
  Volume3D v(s[0], s[1], s[2]);
  const float* p = t.data();
  for (int64_t x = 0; x < v.L; ++x)
    for (int64_t y = 0; y < v.W; ++y)
      for (int64_t z = 0; z < v.H; ++z)
        v.at(x, y, z) = p[(x * v.W + y) * v.H + z];
  return v;
}

GaussianLatent Autoencoder::encode(const Volume3D& x) const {
  x.validate();
  ag::NoGradGuard ng;
  Var xt = ag::constant(volume_to_tensor(x));
  LatentNodes nodes = encode_graph(standardize(xt));
  Shape ls = cfg_.latent_shape();
  GaussianLatent g{nodes.mu->value.reshaped(ls).clone(),
                   nodes.log_var->value.reshaped(ls).clone()};
  g.validate(cfg_.latent_channels);
  return g;
}

Volume3D Autoencoder::decode(const Tensor& z0, int64_t l, int64_t w,
                             int64_t h) const {
  if (z0.shape() != cfg_.latent_shape())
    throw ValidationError("decode: latent shape " + shape_str(z0.shape()) +
                          " does not match config " +
                          shape_str(cfg_.latent_shape()));
  ag::NoGradGuard ng;
  Shape batched = cfg_.latent_shape();
  batched.insert(batched.begin(), 1);
  Var z = ag::constant(z0.reshaped(batched));
  Var y = restore(decode_graph(z), l, w, h);
  if (!y->value.all_finite())
    throw NumericsError("decode: non-finite output");
  return tensor_to_volume(y->value);
}

Volume3D Autoencoder::reconstruct(const Volume3D& x) const {
  GaussianLatent g = encode(x);
  return decode(g.mu, x.L, x.W, x.H);
}

// ------------------------------------------------------------- checkpoints

void Autoencoder::save(const std::filesystem::path& path) const {
  io::Checkpoint ck;
  ck.meta = {{"kind", "autoencoder"},
             {"config",
              {{"L", cfg_.L},
               {"W", cfg_.W},
               {"H", cfg_.H},
               {"base_channels", cfg_.base_channels},
               {"channel_mult", cfg_.channel_mult},
               {"attention_levels", cfg_.attention_levels},
               {"conv_layers_per_module", cfg_.conv_layers_per_module},
               {"alpha", cfg_.alpha},
               {"latent_channels", cfg_.latent_channels},
               {"groupnorm_groups", cfg_.groupnorm_groups}}}};
  for (auto& [name, var] : params_.items()) ck.add(name, var->value.clone());
  ck.save(path);
}

namespace {
AEConfig ae_config_from_json(const io::json& j) {
  AEConfig c;
  c.L = j.at("L").get<int64_t>();
  c.W = j.at("W").get<int64_t>();
  c.H = j.at("H").get<int64_t>();
  c.base_channels = j.at("base_channels").get<int>();
  c.channel_mult = j.at("channel_mult").get<std::vector<int>>();
  c.attention_levels = j.at("attention_levels").get<std::vector<int>>();
  c.conv_layers_per_module = j.at("conv_layers_per_module").get<int>();
  c.alpha = j.at("alpha").get<double>();
  c.latent_channels = j.at("latent_channels").get<int>();
  c.groupnorm_groups = j.at("groupnorm_groups").get<int>();
  return c;
}
}  // namespace

Autoencoder Autoencoder::load(const std::filesystem::path& path) {
  io::Checkpoint ck = io::Checkpoint::load(path);
  if (ck.meta.value("kind", "") != "autoencoder")
    throw IoError("checkpoint at " + path.string() +
                  " is not an autoencoder checkpoint");
  Autoencoder ae(ae_config_from_json(ck.meta.at("config")), 0);
  for (auto& [name, var] : ae.params_.items()) {
    const Tensor& src = ck.get(name);
    if (src.shape() != var->value.shape())
      throw IoError("checkpoint array '" + name + "' has shape " +
                    shape_str(src.shape()) + ", expected " +
                    shape_str(var->value.shape()));
    std::copy(src.data(), src.data() + src.numel(), var->value.data());
  }
  return ae;
}

}  // namespace gmldm
