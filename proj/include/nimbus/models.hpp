#pragma once

// Miniature networks: the residual VAE with spectral-regularization hooks, the
// causal 3D masked autoencoder, and a frame-wise 2D autoencoder used as the
// conditioning baseline.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nimbus/autodiff.hpp"
#include "nimbus/causal3d.hpp"
#include "nimbus/error.hpp"
#include "nimbus/grid.hpp"
#include "nimbus/nn.hpp"
#include "nimbus/regularize.hpp"
#include "nimbus/spectral.hpp"
#include "nimbus/tensor.hpp"

namespace nimbus::models {

using ad::Var;

/// (1, V, H, 1) loss weights: per-variable loss weight times latitude area weight.
template <class T>
Tensor<T> loss_weights(std::span<const grid::VariableSpec> specs, std::span<const double> lat) {
  const auto lw = grid::lat_weights(lat).w;
  Tensor<T> w({1, specs.size(), lat.size(), 1});
  for (std::size_t v = 0; v < specs.size(); ++v)
    for (std::size_t h = 0; h < lat.size(); ++h) w[v * lat.size() + h] = static_cast<T>(specs[v].loss_weight * lw[h]);
  return w;
}

/// Row-pair averaging of (1, V, H, 1) weights for a grid coarsened by `factor`.
template <class T>
Tensor<T> coarsen_weights(const Tensor<T>& w, std::size_t factor) {
  const std::size_t V = w.dim(1), H = w.dim(2);
  Tensor<T> out({1, V, H / factor, 1});
  for (std::size_t v = 0; v < V; ++v)
    for (std::size_t h = 0; h < H; ++h) out[v * (H / factor) + h / factor] += w[v * H + h] / static_cast<T>(factor);
  return out;
}

// ---------------------------------------------------------------- VAE

struct VaeConfig {
  std::size_t variables = 8;
  std::size_t hidden = 16;
  std::size_t wide = 32;
  std::size_t latent = 16;
  double beta = 1e-5;
  double logvar_init = -4.0;
  std::size_t se_factor = 2;

  void validate() const {
    if (!(beta >= 0.0)) throw ConfigError("vae.beta must be >= 0");
    if (variables == 0 || hidden == 0 || wide == 0 || latent == 0) throw ConfigError("vae channel counts must be positive");
    if (se_factor != 2 && se_factor != 4) throw ConfigError("vae.se_factor must be 2 or 4");
  }
};

template <class T>
struct Posterior {
  Var<T> mu;
  Var<T> logvar;
};

/// Two stride-2 stages: (N, V, H, W) ↔ (N, C_z, H/4, W/4).
template <class T>
class Vae {
 public:
  static constexpr std::size_t kFactor = 4;

  Vae(VaeConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const auto V = cfg_.variables, C1 = cfg_.hidden, C2 = cfg_.wide, Z = cfg_.latent;
    stem_ = nn::make_conv2d(store_, "enc.stem", V, C1, 3, 1, rng);
    down1_ = nn::make_conv2d(store_, "enc.down1", C1, C2, 3, 2, rng);
    down2_ = nn::make_conv2d(store_, "enc.down2", C2, C2, 3, 2, rng);
    head_ = nn::make_conv2d(store_, "enc.head", C2, 2 * Z, 3, 1, rng);
    auto& b = head_.bias.mutable_value();
    for (std::size_t c = Z; c < 2 * Z; ++c) b[c] = static_cast<T>(cfg_.logvar_init);
    in_ = nn::make_conv2d(store_, "dec.in", Z, C2, 3, 1, rng);
    up1_ = nn::make_conv2d(store_, "dec.up1", C2, C1, 3, 1, rng);
    up2_ = nn::make_conv2d(store_, "dec.up2", C1, C1, 3, 1, rng);
    out_ = nn::make_conv2d(store_, "dec.out", C1, V, 3, 1, rng);
  }

  const VaeConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }

  Posterior<T> encode(const Var<T>& x) const {
    if (x.shape().size() != 4 || x.dim(1) != cfg_.variables) throw DomainError("vae input must be (N, V, H, W)");
    if (x.dim(2) % kFactor || x.dim(3) % kFactor) throw DomainError("vae input dims must be divisible by 4");
    auto h = ad::silu(stem_(x));
    h = ad::silu(ad::add(down1_(h), ad::channel_resize(ad::avg_pool(h, 2), cfg_.wide)));
    h = ad::silu(ad::add(down2_(h), ad::avg_pool(h, 2)));
    auto stats = head_(h);
    return {ad::slice(stats, 1, 0, cfg_.latent), ad::slice(stats, 1, cfg_.latent, 2 * cfg_.latent)};
  }

  Var<T> decode(const Var<T>& z) const {
    if (z.shape().size() != 4 || z.dim(1) != cfg_.latent) throw DomainError("vae latent must be (N, C_z, h, w)");
    auto h = ad::silu(in_(z));
    auto u = ad::upsample(h, 2);
    h = ad::silu(ad::add(up1_(u), ad::channel_resize(u, cfg_.hidden)));
    u = ad::upsample(h, 2);
    h = ad::silu(ad::add(up2_(u), u));
    return out_(h);
  }

 private:
  VaeConfig cfg_;
  nn::ParamStore<T> store_;
  nn::Conv2d<T> stem_, down1_, down2_, head_, in_, up1_, up2_, out_;
};

/// z = mu + exp(logvar / 2) · ε, ε ~ N(0, I).
template <class T>
Var<T> reparameterize(const Posterior<T>& q, std::mt19937_64& rng) {
  Tensor<T> eps(q.mu.shape());
  std::normal_distribution<double> g;
  for (auto& v : eps.values()) v = static_cast<T>(g(rng));
  return ad::add(q.mu, ad::mul(ad::exp(ad::scale(q.logvar, T(0.5))), Var<T>::constant(std::move(eps))));
}

template <class T>
struct VaeLoss {
  Var<T> total;
  double reconstruction = 0.0;
  double kl = 0.0;
  regularize::MaskPlan plan;
};

/// Optional dataset-level spectra (one per variable) replace per-sample cutoffs.
template <class T>
VaeLoss<T> vae_loss(const Vae<T>& vae, const Tensor<T>& x, regularize::Strategy strategy, double gamma,
                    std::mt19937_64& rng, const Tensor<T>& weights,
                    std::span<const spectral::SpectralProfile> dataset_profiles = {}) {
  namespace rg = regularize;
  const std::size_t N = x.dim(0), V = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto q = vae.encode(Var<T>::constant(x));
  Var<T> z = reparameterize(q, rng);

  rg::MaskPlan plan{gamma, std::vector<double>(V, spectral::max_radius(H, W)), gamma, strategy};
  Tensor<T> target = x;
  Tensor<T> w = weights;
  if (plan.active()) {
    rg::gamma_index(gamma);
    if (strategy == rg::Strategy::Se) {
      target = rg::area_downsample(x, vae.config().se_factor);
      w = coarsen_weights(weights, vae.config().se_factor);
      z = ad::avg_pool(z, vae.config().se_factor);
    } else {
      const std::size_t frame = V * H * W;
      for (std::size_t n = 0; n < N; ++n) {
        const Tensor<T> xn(Shape{V, H, W}, std::vector<T>(x.data() + n * frame, x.data() + (n + 1) * frame));
        if (strategy == rg::Strategy::Vamfm)
          plan = dataset_profiles.empty() ? rg::plan_vamfm(xn, gamma) : rg::plan_vamfm(dataset_profiles, gamma);
        else
          plan = rg::plan_ffm(V, gamma);
        const auto masked = rg::mask_input(xn, plan);
        std::copy(masked.data(), masked.data() + frame, target.data() + n * frame);
      }
      z = ad::spectral_lowpass(z, plan.latent_cutoff);
    }
  }
  const auto recon = ad::weighted_mse(vae.decode(z), Var<T>::constant(std::move(target)), w);
  const auto kl = ad::gaussian_kl(q.mu, q.logvar);
  const double beta = vae.config().beta;
  VaeLoss<T> out{beta > 0.0 ? ad::add(recon, ad::scale(kl, static_cast<T>(beta))) : recon, recon.value()[0],
                 kl.value()[0], std::move(plan)};
  return out;
}

// ---------------------------------------------------------------- 3D-MAE

struct MaeConfig {
  std::size_t variables = 8;
  std::size_t hidden = 16;
  std::size_t latent = 16;
  std::size_t decoder = 32;
  std::size_t k = 4;

  void validate() const {
    if (k < 2 || k % 2) throw ConfigError("mae.k must be even and >= 2");
    if (variables == 0 || hidden == 0 || latent == 0 || decoder == 0) throw ConfigError("mae channel counts must be positive");
  }
  std::size_t latent_frames() const { return 1 + k / 2; }
};

/// (N, V, T, H, W) → (N, T, V, H, W) for a constant tensor.
template <class T>
Tensor<T> swap_vt(const Tensor<T>& x) {
  const std::size_t N = x.dim(0), A = x.dim(1), B = x.dim(2), P = x.dim(3) * x.dim(4);
  Tensor<T> out({N, B, A, x.dim(3), x.dim(4)});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t a = 0; a < A; ++a)
      for (std::size_t b = 0; b < B; ++b)
        std::copy_n(x.data() + ((n * A + a) * B + b) * P, P, out.data() + ((n * B + b) * A + a) * P);
  return out;
}

/// Causal encoder over k+1 frames; non-causal decoder reconstructing all frames.
template <class T>
class Mae {
 public:
  Mae(MaeConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    encoder_ = causal::make_stack(store_, "mae.enc", causal::default_layers(cfg_.variables, cfg_.hidden, cfg_.latent), rng);
    const std::size_t D = cfg_.decoder, F = cfg_.latent_frames();
    in_ = nn::make_conv2d(store_, "mae.dec.in", cfg_.latent * F, D, 3, 1, rng);
    up1_ = nn::make_conv2d(store_, "mae.dec.up1", D, cfg_.hidden, 3, 1, rng);
    up2_ = nn::make_conv2d(store_, "mae.dec.up2", cfg_.hidden, cfg_.hidden, 3, 1, rng);
    out_ = nn::make_conv2d(store_, "mae.dec.out", cfg_.hidden, (cfg_.k + 1) * cfg_.variables, 1, 1, rng, true);
  }

  const MaeConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }
  const causal::CausalStack<T>& encoder() const { return encoder_; }

  /// window (N, V, k+1, H, W) → z̄ (N, C_m, 1 + k/2, H/4, W/4).
  Var<T> encode(const Var<T>& window, bool mask_last) const {
    if (window.shape().size() != 5 || window.dim(1) != cfg_.variables || window.dim(2) != cfg_.k + 1)
      throw DomainError("mae window must be (N, V, k+1, H, W), got " + shape_string(window.shape()));
    return causal::encode_full(encoder_, window, mask_last);
  }

  /// z̄ → reconstruction (N, k+1, V, H, W).
  Var<T> decode(const Var<T>& zbar) const {
    const std::size_t N = zbar.dim(0), h = zbar.dim(3), w = zbar.dim(4);
    auto x = ad::reshape(zbar, {N, zbar.dim(1) * zbar.dim(2), h, w});
    x = ad::silu(in_(x));
    x = ad::silu(up1_(ad::upsample(x, 2)));
    x = ad::silu(up2_(ad::upsample(x, 2)));
    auto y = out_(x);
    return ad::reshape(y, {N, cfg_.k + 1, cfg_.variables, 4 * h, 4 * w});
  }

 private:
  MaeConfig cfg_;
  nn::ParamStore<T> store_;
  causal::CausalStack<T> encoder_;
  nn::Conv2d<T> in_, up1_, up2_, out_;
};

/// Lat-weighted MSE over all k+1 frames; `weights` is (1, V, H, 1).
template <class T>
Var<T> mae_loss(const Mae<T>& mae, const Tensor<T>& window, const Tensor<T>& weights, bool mask_last = true) {
  const auto recon = mae.decode(mae.encode(Var<T>::constant(window), mask_last));
  const auto w = weights.reshaped({1, 1, weights.dim(1), weights.dim(2), 1});
  return ad::weighted_mse(recon, Var<T>::constant(swap_vt(window)), w);
}

/// Per-frame MSE of a reconstruction (N, k+1, V, H, W) against the window (N, V, k+1, H, W).
template <class T>
std::vector<double> frame_errors(const Tensor<T>& recon, const Tensor<T>& window) {
  const auto target = swap_vt(window);
  const std::size_t N = recon.dim(0), F = recon.dim(1), S = recon.size() / (N * F);
  std::vector<double> err(F, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t i = 0; i < S; ++i) {
        const double d = static_cast<double>(recon[(n * F + f) * S + i]) - target[(n * F + f) * S + i];
        err[f] += d * d / static_cast<double>(N * S);
      }
  return err;
}

// ---------------------------------------------------------------- 2D frame autoencoder

struct FrameAeConfig {
  std::size_t variables = 8;
  std::size_t hidden = 16;
  std::size_t latent = 16;
};

/// Frame-wise encoder with the same latent grid and channel budget as the 3D-MAE.
template <class T>
class FrameAe {
 public:
  FrameAe(FrameAeConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    std::mt19937_64 rng(seed);
    down1_ = nn::make_conv2d(store_, "fae.enc.down1", cfg_.variables, cfg_.hidden, 3, 2, rng);
    down2_ = nn::make_conv2d(store_, "fae.enc.down2", cfg_.hidden, cfg_.hidden, 3, 2, rng);
    head_ = nn::make_conv2d(store_, "fae.enc.head", cfg_.hidden, cfg_.latent, 1, 1, rng);
    in_ = nn::make_conv2d(store_, "fae.dec.in", cfg_.latent, cfg_.hidden, 3, 1, rng);
    up1_ = nn::make_conv2d(store_, "fae.dec.up1", cfg_.hidden, cfg_.hidden, 3, 1, rng);
    out_ = nn::make_conv2d(store_, "fae.dec.out", cfg_.hidden, cfg_.variables, 3, 1, rng, true);
  }

  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }
  const FrameAeConfig& config() const { return cfg_; }

  Var<T> encode(const Var<T>& x) const {
    auto h = ad::silu(down1_(x));
    h = ad::silu(down2_(h));
    return head_(h);
  }

  Var<T> decode(const Var<T>& z) const {
    auto h = ad::silu(in_(z));
    h = ad::silu(up1_(ad::upsample(h, 2)));
    return out_(ad::upsample(h, 2));
  }

  /// Encodes each of the frames (N, V, F, H, W) separately into (N, C, F, h, w).
  Var<T> encode_frames(const Var<T>& frames) const {
    const std::size_t N = frames.dim(0), V = frames.dim(1), F = frames.dim(2), H = frames.dim(3), W = frames.dim(4);
    std::vector<Var<T>> out;
    for (std::size_t f = 0; f < F; ++f) {
      auto x = ad::reshape(ad::slice(frames, 2, f, f + 1), {N, V, H, W});
      auto z = encode(x);
      out.push_back(ad::reshape(z, {N, z.dim(1), 1, z.dim(2), z.dim(3)}));
    }
    return ad::concat(out, 2);
  }

 private:
  FrameAeConfig cfg_;
  nn::ParamStore<T> store_;
  nn::Conv2d<T> down1_, down2_, head_, in_, up1_, out_;
};

template <class T>
Var<T> frame_ae_loss(const FrameAe<T>& ae, const Tensor<T>& x, const Tensor<T>& weights) {
  return ad::weighted_mse(ae.decode(ae.encode(Var<T>::constant(x))), Var<T>::constant(x), weights);
}

}  // namespace nimbus::models
