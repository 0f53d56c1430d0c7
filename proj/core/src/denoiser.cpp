// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
#include "gmldm/denoiser.hpp"

#include <cmath>
#include <string>

#include "gmldm/errors.hpp"
#include "gmldm/io.hpp"
#include "gmldm/rng.hpp"

namespace gmldm {

using ag::Var;

void DenoiserConfig::validate() const {
  if (n_encoder_layers != 12)
    throw ValidationError("DenoiserConfig: encoder depth is fixed at 12");
  if (patch_size < 1) throw ValidationError("DenoiserConfig: patch_size >= 1");
  if (token_dim < 2 || token_dim % 2)
    throw ValidationError("DenoiserConfig: token_dim must be even and >= 2");
  if (token_dim % n_heads)
    throw ValidationError("DenoiserConfig: token_dim divisible by n_heads");
  if (n_decoder_layers < 1 || n_heads < 1 || ffn_dim < 1)
    throw ValidationError("DenoiserConfig: layer sizes must be positive");
  if (cond_feature_dims.empty())
    throw ValidationError("DenoiserConfig: at least one condition scale");
  for (int c : cond_feature_dims)
    if (c < 1)
      throw ValidationError("DenoiserConfig: condition channels positive");
  if (null_tokens < 1)
    throw ValidationError("DenoiserConfig: null_tokens >= 1");
  if (dropout < 0.0 || dropout >= 1.0)
    throw ValidationError("DenoiserConfig: dropout in [0,1)");
}

Tensor timestep_embed(int t, int dim) {
  if (t < 1) throw ValidationError("timestep_embed: t must be >= 1");
  if (dim < 2 || dim % 2)
    throw ValidationError("timestep_embed: dim must be even and >= 2");
  Tensor e({dim});
  int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * i / half);
    double a = t * freq;
    e[2 * i] = static_cast<float>(std::sin(a));
    e[2 * i + 1] = static_cast<float>(std::cos(a));
  }
  return e;
}

Var attention_weights(const Var& q, const Var& k) {
  const Shape& qs = q->shape();
  const Shape& ks = k->shape();
  if (qs.size() != 2 || ks.size() != 2 || qs[1] != ks[1])
    throw ValidationError("attention_weights: need (n,d) x (m,d), got " +
                          shape_str(qs) + " x " + shape_str(ks));
  Var logits = ag::mul_scalar(
      ag::matmul(q, ag::permute(k, {1, 0})),
      1.0f / std::sqrt(static_cast<float>(qs[1])));
  return ag::softmax_lastdim(logits);
}

Var cross_attention(const Var& q, const Var& k, const Var& v) {
  if (v->shape().size() != 2 || v->shape()[0] != k->shape()[0])
    throw ValidationError("cross_attention: V rows must match K rows");
  return ag::matmul(attention_weights(q, k), v);
}

// ------------------------------------------------------------ construction

Denoiser::Denoiser(DenoiserConfig cfg, Shape latent_shape,
                   int64_t n_components, uint64_t init_seed)
    : cfg_(cfg), latent_shape_(std::move(latent_shape)),
      n_components_(n_components) {
  cfg_.validate();
  if (latent_shape_.size() != 4)
    throw ValidationError("Denoiser: latent shape must be {C,l,w,h}");
  const int p = cfg_.patch_size;
  for (int i = 1; i < 4; ++i)
    if (latent_shape_[static_cast<size_t>(i)] % p)
      throw ValidationError("Denoiser: latent spatial dims divisible by " +
                            std::to_string(p));
  if (n_components_ < 4)
    throw ValidationError("Denoiser: condition matrix size K must be >= 4");

  RngStream rng(derive_seed(init_seed, "denoiser-init", 0));
  const int64_t d = cfg_.token_dim;
  const int64_t pdim = latent_shape_[0] * p * p * p;
  const float w_std = 0.02f;
  auto dense = [&](const std::string& name, int64_t din, int64_t dout) {
    params_.add(name + ".w", ag::normal_init({din, dout}, w_std, rng));
    params_.add(name + ".b", ag::zeros_init({dout}));
  };
  auto lnorm = [&](const std::string& name) {
    params_.add(name + ".g", ag::ones_init({d}));
    params_.add(name + ".b", ag::zeros_init({d}));
  };
  auto attn = [&](const std::string& pre) {
    dense(pre + ".wq", d, d);
    dense(pre + ".wk", d, d);
    dense(pre + ".wv", d, d);
    dense(pre + ".wo", d, d);
  };
  auto ffn = [&](const std::string& pre) {
    dense(pre + ".1", d, cfg_.ffn_dim);
    dense(pre + ".2", cfg_.ffn_dim, d);
  };

  dense("embed", pdim, d);
  params_.add("pos.e", ag::normal_init({n_tokens(), d}, w_std, rng));
  dense("temb", d, d);

  for (int i = 0; i < cfg_.n_encoder_layers; ++i) {
    std::string pre = "enc." + std::to_string(i) + ".";
    lnorm(pre + "ln1");
    attn(pre + "attn");
    lnorm(pre + "ln2");
    ffn(pre + "ffn");
  }
  for (int j = 0; j < cfg_.n_decoder_layers; ++j) {
    std::string pre = "dec." + std::to_string(j) + ".";
    lnorm(pre + "ln1");
    attn(pre + "sa");
    lnorm(pre + "ln2");
    attn(pre + "ca");
    lnorm(pre + "ln3");
    ffn(pre + "ffn");
  }

  int64_t cin = 1;
  for (size_t s = 0; s < cfg_.cond_feature_dims.size(); ++s) {
    int64_t ch = cfg_.cond_feature_dims[s];
    params_.add("cond.c" + std::to_string(s) + ".w",
                ag::he_init({ch, cin, 3, 3}, cin * 9, rng));
    params_.add("cond.c" + std::to_string(s) + ".b", ag::zeros_init({ch}));
    dense("cond.p" + std::to_string(s), ch, d);
    cin = ch;
  }
  params_.add("cond.null.e",
              ag::normal_init({cfg_.null_tokens, d}, w_std, rng));

  lnorm("out.ln");
  for (int h = 0; h < 2; ++h) {
    std::string pre = "head." + std::to_string(h) + ".";
    dense(pre + "1", d, cfg_.ffn_dim);
    dense(pre + "2", cfg_.ffn_dim, pdim);
  }
}

int64_t Denoiser::n_tokens() const {
  const int p = cfg_.patch_size;
  return (latent_shape_[1] / p) * (latent_shape_[2] / p) *
         (latent_shape_[3] / p);
}

std::vector<int64_t> Denoiser::scale_token_counts() const {
  std::vector<int64_t> counts;
  int64_t side = n_components_;
  for (size_t s = 0; s < cfg_.cond_feature_dims.size(); ++s) {
    side = (side + 2 - 3) / 2 + 1;  // kernel 3, stride 2, pad 1
    counts.push_back(side * side);
  }
  return counts;
}

// ----------------------------------------------------------------- forward

namespace {

// (N,T,D) -> (N*H, T, dh) head split and its inverse.
Var split_heads(const Var& x, int64_t heads) {
  const Shape& s = x->shape();
  int64_t n = s[0], t = s[1], dh = s[2] / heads;
  return ag::reshape(
      ag::permute(ag::reshape(x, {n, t, heads, dh}), {0, 2, 1, 3}),
      {n * heads, t, dh});
}

Var merge_heads(const Var& x, int64_t heads) {
  const Shape& s = x->shape();
  int64_t n = s[0] / heads, t = s[1], dh = s[2];
  return ag::reshape(
      ag::permute(ag::reshape(x, {n, heads, t, dh}), {0, 2, 1, 3}),
      {n, t, heads * dh});
}

Var mha(const Var& x_q, const Var& x_kv, int64_t heads,
        const ag::ParamStore& p, const std::string& pre) {
  int64_t dh = x_q->shape()[2] / heads;
  Var q = split_heads(ag::linear(x_q, p.get(pre + ".wq.w"),
                                 p.get(pre + ".wq.b")),
                      heads);
  Var k = split_heads(ag::linear(x_kv, p.get(pre + ".wk.w"),
                                 p.get(pre + ".wk.b")),
                      heads);
  Var v = split_heads(ag::linear(x_kv, p.get(pre + ".wv.w"),
                                 p.get(pre + ".wv.b")),
                      heads);
  Var att = ag::softmax_lastdim(ag::mul_scalar(
      ag::bmm(q, k, true), 1.0f / std::sqrt(static_cast<float>(dh))));
  Var o = merge_heads(ag::bmm(att, v), heads);
  return ag::linear(o, p.get(pre + ".wo.w"), p.get(pre + ".wo.b"));
}

Var ln(const Var& x, const ag::ParamStore& p, const std::string& pre) {
  return ag::layer_norm(x, p.get(pre + ".g"), p.get(pre + ".b"));
}

Var ffn_fwd(const Var& x, const ag::ParamStore& p, const std::string& pre) {
  Var h = ag::gelu(ag::linear(x, p.get(pre + ".1.w"), p.get(pre + ".1.b")));
  return ag::linear(h, p.get(pre + ".2.w"), p.get(pre + ".2.b"));
}

}  // namespace

Var Denoiser::encode_condition(const Var& c_images) const {
  const Shape& s = c_images->shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != n_components_ ||
      s[3] != n_components_)
    throw ValidationError("encode_condition: expected (N,1," +
                          std::to_string(n_components_) + "," +
                          std::to_string(n_components_) + "), got " +
                          shape_str(s));
  if (!c_images->value.all_finite())
    throw ValidationError("encode_condition: non-finite condition");
  Var h = c_images;
  Var fused;
  for (size_t sc = 0; sc < cfg_.cond_feature_dims.size(); ++sc) {
    std::string cn = "cond.c" + std::to_string(sc);
    h = ag::silu(ag::conv2d(h, params_.get(cn + ".w"), params_.get(cn + ".b"),
                            2, 1));
    const Shape& hs = h->shape();
    Var tok = ag::permute(
        ag::reshape(h, {hs[0], hs[1], hs[2] * hs[3]}), {0, 2, 1});
    std::string pn = "cond.p" + std::to_string(sc);
    tok = ag::linear(tok, params_.get(pn + ".w"), params_.get(pn + ".b"));
    fused = fused ? ag::concat(fused, tok, 1) : tok;
  }
  return fused;
}

Var Denoiser::null_condition(int64_t batch) const {
  Tensor base({batch, cfg_.null_tokens, cfg_.token_dim});
  return ag::add_token_bias(ag::constant(std::move(base)),
                            params_.get("cond.null.e"));
}

Var Denoiser::denoise_graph(const Var& z_batch, const std::vector<int>& ts,
                            const Var& cond_tokens,
                            RngStream* dropout_rng) const {
  const Shape& zs = z_batch->shape();
  if (zs.size() != 5 || Shape(zs.begin() + 1, zs.end()) != latent_shape_)
    throw ValidationError("denoise: latent batch shape " + shape_str(zs) +
                          " does not match latent " +
                          shape_str(latent_shape_));
  const int64_t n = zs[0];
  if (static_cast<int64_t>(ts.size()) != n)
    throw ValidationError("denoise: one timestep per batch sample");
  const Shape& cs = cond_tokens->shape();
  if (cs.size() != 3 || cs[0] != n || cs[2] != cfg_.token_dim)
    throw ValidationError("denoise: condition tokens must be (N,m,token_dim)");

  const int64_t d = cfg_.token_dim;
  Tensor temb_rows({n, d});
  for (int64_t i = 0; i < n; ++i) {
    Tensor e = timestep_embed(ts[static_cast<size_t>(i)], cfg_.token_dim);
    std::copy(e.data(), e.data() + d, temb_rows.data() + i * d);
  }

  const float rate = static_cast<float>(cfg_.dropout);
  auto drop = [&](const Var& x) {
    if (dropout_rng == nullptr || rate <= 0.0f) return x;
    return ag::dropout(x, rate, *dropout_rng);
  };

  Var x = ag::linear(ag::patchify3d(z_batch, cfg_.patch_size),
                     params_.get("embed.w"), params_.get("embed.b"));
  x = ag::add_token_bias(x, params_.get("pos.e"));
  Var temb = ag::linear(ag::constant(std::move(temb_rows)),
                        params_.get("temb.w"), params_.get("temb.b"));
  x = ag::add_rows(x, temb);

  for (int i = 0; i < cfg_.n_encoder_layers; ++i) {
    std::string pre = "enc." + std::to_string(i) + ".";
    x = ag::add(x, drop(mha(ln(x, params_, pre + "ln1"), x, cfg_.n_heads,
                            params_, pre + "attn")));
    x = ag::add(x, drop(ffn_fwd(ln(x, params_, pre + "ln2"), params_,
                                pre + "ffn")));
  }
  for (int j = 0; j < cfg_.n_decoder_layers; ++j) {
    std::string pre = "dec." + std::to_string(j) + ".";
    Var q = ln(x, params_, pre + "ln1");
    x = ag::add(x, drop(mha(q, q, cfg_.n_heads, params_, pre + "sa")));
    x = ag::add(x, drop(mha(ln(x, params_, pre + "ln2"), cond_tokens,
                            cfg_.n_heads, params_, pre + "ca")));
    x = ag::add(x, drop(ffn_fwd(ln(x, params_, pre + "ln3"), params_,
                                pre + "ffn")));
  }

  x = ln(x, params_, "out.ln");
  Var eps = ag::add(ffn_fwd(x, params_, "head.0"),
                    ffn_fwd(x, params_, "head.1"));
  const int p = cfg_.patch_size;
  return ag::unpatchify3d(eps, latent_shape_[0], latent_shape_[1],
                          latent_shape_[2], latent_shape_[3], p);
}

Tensor fnc_to_image(const FNCMatrix& c) {
  c.validate();
  Tensor t({1, 1, c.K, c.K});
  std::copy(c.data.begin(), c.data.end(), t.data());
  return t;
}

Tensor Denoiser::denoise(const Tensor& z_t, int t, const FNCMatrix* c) const {
  if (z_t.shape() != latent_shape_)
    throw ValidationError("denoise: latent shape " + shape_str(z_t.shape()) +
                          " does not match " + shape_str(latent_shape_));
  if (!z_t.all_finite()) throw ValidationError("denoise: non-finite latent");
  ag::NoGradGuard ng;
  Shape batched = latent_shape_;
  batched.insert(batched.begin(), 1);
  Var z = ag::constant(z_t.reshaped(batched));
  Var cond = c ? encode_condition(ag::constant(fnc_to_image(*c)))
               : null_condition(1);
  Var out = denoise_graph(z, {t}, cond);
  if (!out->value.all_finite())
    throw NumericsError("denoise: non-finite prediction");
  return out->value.reshaped(latent_shape_).clone();
}

// ------------------------------------------------------------- checkpoints

void Denoiser::save(const std::filesystem::path& path) const {
  io::Checkpoint ck;
  ck.meta = {{"kind", "denoiser"},
             {"latent_shape", latent_shape_},
             {"n_components", n_components_},
             {"config",
              {{"patch_size", cfg_.patch_size},
               {"token_dim", cfg_.token_dim},
               {"n_encoder_layers", cfg_.n_encoder_layers},
               {"n_decoder_layers", cfg_.n_decoder_layers},
               {"n_heads", cfg_.n_heads},
               {"ffn_dim", cfg_.ffn_dim},
               {"cond_feature_dims", cfg_.cond_feature_dims},
               {"null_tokens", cfg_.null_tokens},
               {"dropout", cfg_.dropout}}}};
  for (auto& [name, var] : params_.items()) ck.add(name, var->value.clone());
  ck.save(path);
}

Denoiser Denoiser::load(const std::filesystem::path& path) {
  io::Checkpoint ck = io::Checkpoint::load(path);
  if (ck.meta.value("kind", "") != "denoiser")
    throw IoError("checkpoint at " + path.string() +
                  " is not a denoiser checkpoint");
  const io::json& j = ck.meta.at("config");
  DenoiserConfig cfg;
  cfg.patch_size = j.at("patch_size").get<int>();
  cfg.token_dim = j.at("token_dim").get<int>();
  cfg.n_encoder_layers = j.at("n_encoder_layers").get<int>();
  cfg.n_decoder_layers = j.at("n_decoder_layers").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.ffn_dim = j.at("ffn_dim").get<int>();
  cfg.cond_feature_dims = j.at("cond_feature_dims").get<std::vector<int>>();
  cfg.null_tokens = j.at("null_tokens").get<int>();
  cfg.dropout = j.at("dropout").get<double>();
  Denoiser dn(cfg, ck.meta.at("latent_shape").get<Shape>(),
              ck.meta.at("n_components").get<int64_t>(), 0);
  for (auto& [name, var] : dn.params_.items()) {
    const Tensor& src = ck.get(name);
    if (src.shape() != var->value.shape())
      throw IoError("checkpoint array '" + name + "' has shape " +
                    shape_str(src.shape()) + ", expected " +
                    shape_str(var->value.shape()));
    std::copy(src.data(), src.data() + src.numel(), var->value.data());
  }
  return dn;
}

}  // namespace gmldm
