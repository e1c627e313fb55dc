#pragma once

// EDM-style conditional diffusion on residual latents: preconditioning, log-normal
// noise levels, the ρ-schedule Heun sampler with optional churn, a Gaussian
// posterior-mean denoiser, and a small FiLM-modulated conv denoiser.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "nimbus/autodiff.hpp"
#include "nimbus/error.hpp"
#include "nimbus/nn.hpp"
#include "nimbus/tensor.hpp"

namespace nimbus::edm {

using ad::Var;

struct Churn {
  double s_churn = 2.5;
  double s_min = 0.75;
  double s_max = 68.0;
  double s_noise = 1.1;
};

struct EdmConfig {
  double sigma_data = 0.5;
  bool sigma_data_auto = false;
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double rho = 7.0;
  double p_mean = -1.2;
  double p_std = 1.2;
  std::size_t steps = 25;
  Churn churn;

  void validate() const {
    if (!(sigma_min > 0.0) || !(sigma_min < sigma_max)) throw ConfigError("sampler: need 0 < sigma_min < sigma_max");
    if (steps == 0) throw ConfigError("sampler: steps must be >= 1");
    if (!(sigma_data > 0.0)) throw ConfigError("diffusion: sigma_data must be positive");
    if (!(rho > 0.0) || !(p_std > 0.0)) throw ConfigError("diffusion: rho and p_std must be positive");
    if (churn.s_churn < 0.0 || churn.s_noise < 0.0) throw ConfigError("sampler: churn parameters must be >= 0");
  }
};

struct Precond {
  double c_skip, c_out, c_in, c_noise;
};

inline Precond precondition(double sigma, double sigma_data) {
  if (!(sigma > 0.0)) throw DomainError("precondition: sigma must be positive");
  const long double s = sigma, d = sigma_data, q = s * s + d * d;
  return {static_cast<double>(d * d / q), static_cast<double>(s * d / std::sqrt(q)),
          static_cast<double>(1.0L / std::sqrt(q)), static_cast<double>(std::log(s) / 4.0L)};
}

/// λ(σ) = (σ² + σ_d²) / (σ·σ_d)².
inline double loss_weight(double sigma, double sigma_data) {
  return (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma * sigma_data * sigma_data);
}

template <class Rng>
double sample_sigma(Rng& rng, const EdmConfig& cfg) {
  return std::exp(std::normal_distribution<double>(cfg.p_mean, cfg.p_std)(rng));
}

/// σ_0 = σ_max … σ_{N−1} = σ_min, followed by a terminal 0.
inline std::vector<double> sigma_schedule(const EdmConfig& cfg) {
  const std::size_t N = cfg.steps;
  std::vector<double> s(N + 1, 0.0);
  const double a = std::pow(cfg.sigma_max, 1.0 / cfg.rho), b = std::pow(cfg.sigma_min, 1.0 / cfg.rho);
  for (std::size_t i = 0; i < N; ++i) {
    const double f = N == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(N - 1);
    s[i] = std::pow(a + f * (b - a), cfg.rho);
  }
  return s;
}

/// γ_i for the churn step at noise level σ_i.
inline double churn_gamma(double sigma, const EdmConfig& cfg) {
  const auto& c = cfg.churn;
  if (c.s_churn <= 0.0 || sigma < c.s_min || sigma > c.s_max) return 0.0;
  return std::min(c.s_churn / static_cast<double>(cfg.steps), std::numbers::sqrt2 - 1.0);
}

/// D(x; σ): posterior-mean estimate of the clean sample.
using DenoiseFn = std::function<Tensor<double>(const Tensor<double>& x, double sigma)>;

/// Heun integration from σ_max noise to 0; churn is applied only when `stochastic`.
inline Tensor<double> sample(const DenoiseFn& denoise, const Shape& shape, std::mt19937_64& rng, const EdmConfig& cfg,
                             bool stochastic) {
  cfg.validate();
  const auto sigmas = sigma_schedule(cfg);
  std::normal_distribution<double> g;
  Tensor<double> x(shape);
  for (auto& v : x.values()) v = sigmas[0] * g(rng);
  for (std::size_t i = 0; i < cfg.steps; ++i) {
    const double sigma = sigmas[i], next = sigmas[i + 1];
    const double gamma = stochastic ? churn_gamma(sigma, cfg) : 0.0;
    double hat = sigma;
    if (gamma > 0.0) {
      hat = sigma * (1.0 + gamma);
      const double amp = cfg.churn.s_noise * std::sqrt(hat * hat - sigma * sigma);
      for (auto& v : x.values()) v += amp * g(rng);
    }
    const auto d0 = denoise(x, hat);
    Tensor<double> slope(shape), y(shape);
    for (std::size_t k = 0; k < x.size(); ++k) {
      slope[k] = (x[k] - d0[k]) / hat;
      y[k] = x[k] + (next - hat) * slope[k];
    }
    if (next > 0.0) {
      const auto d1 = denoise(y, next);
      for (std::size_t k = 0; k < x.size(); ++k) y[k] = x[k] + (next - hat) * 0.5 * (slope[k] + (y[k] - d1[k]) / next);
    }
    x = std::move(y);
    for (double v : x.values())
      if (!std::isfinite(v)) throw NumericError("sampler produced a non-finite value at step " + std::to_string(i));
  }
  return x;
}

inline Tensor<double> sample_deterministic(const DenoiseFn& d, const Shape& shape, std::mt19937_64& rng,
                                           const EdmConfig& cfg) {
  return sample(d, shape, rng, cfg, false);
}

inline Tensor<double> sample_stochastic(const DenoiseFn& d, const Shape& shape, std::mt19937_64& rng,
                                        const EdmConfig& cfg) {
  return sample(d, shape, rng, cfg, true);
}

/// Exact denoiser for N(μ, diag C) data: μ + C/(C + σ²)·(x − μ), applied along the last axis.
inline DenoiseFn analytic_gaussian_denoiser(std::vector<double> mu, std::vector<double> cov) {
  if (mu.size() != cov.size() || mu.empty()) throw DomainError("gaussian denoiser: mu and cov sizes differ");
  for (double c : cov)
    if (!(c > 0.0)) throw DomainError("gaussian denoiser: covariance must be positive");
  return [mu = std::move(mu), cov = std::move(cov)](const Tensor<double>& x, double sigma) {
    Tensor<double> out(x.shape());
    const std::size_t D = mu.size();
    for (std::size_t k = 0; k < x.size(); ++k) {
      const std::size_t d = k % D;
      out[k] = mu[d] + cov[d] / (cov[d] + sigma * sigma) * (x[k] - mu[d]);
    }
    return out;
  };
}

/// Temporal stacking (noisy, z̄ frames…, z_prev) into (N, C, 2 + F, h, w).
template <class T>
Var<T> build_condition(const Var<T>& z_noisy, const Var<T>& z_bar, const Var<T>& z_prev) {
  if (z_bar.shape().size() != 5) throw DomainError("condition: z_bar must be (N, C, F, h, w)");
  const std::size_t N = z_bar.dim(0), C = z_bar.dim(1), h = z_bar.dim(3), w = z_bar.dim(4);
  const Shape frame{N, C, h, w};
  if (z_noisy.shape() != frame || z_prev.shape() != frame)
    throw DomainError("condition: latent shapes disagree: " + shape_string(z_noisy.shape()) + ", " +
                      shape_string(z_bar.shape()) + ", " + shape_string(z_prev.shape()));
  return ad::concat<T>({ad::reshape(z_noisy, {N, C, 1, h, w}), z_bar, ad::reshape(z_prev, {N, C, 1, h, w})}, 2);
}

struct DenoiserConfig {
  std::size_t channels = 16;
  std::size_t frames = 5;
  std::size_t width = 32;
  std::size_t blocks = 4;
  std::size_t fourier = 8;
};

/// Fourier features of c_noise: (N, 2F) with log-spaced frequencies.
template <class T>
Tensor<T> noise_features(const std::vector<double>& c_noise, std::size_t F) {
  Tensor<T> out({c_noise.size(), 2 * F});
  for (std::size_t n = 0; n < c_noise.size(); ++n)
    for (std::size_t j = 0; j < F; ++j) {
      const double f = std::pow(32.0, static_cast<double>(j) / static_cast<double>(std::max<std::size_t>(F - 1, 1)));
      out[n * 2 * F + j] = static_cast<T>(std::sin(f * c_noise[n]));
      out[n * 2 * F + F + j] = static_cast<T>(std::cos(f * c_noise[n]));
    }
  return out;
}

template <class T>
class Denoiser {
 public:
  Denoiser(DenoiserConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg_.frames < 3) throw ConfigError("denoiser: at least 3 condition frames required");
    std::mt19937_64 rng(seed);
    const std::size_t C = cfg_.channels, D = cfg_.width;
    proj_w_ = store_.add("den.proj.w", nn::scaled_uniform<T>({C, C, 1, 1, 1}, C, rng));
    proj_b_ = store_.add("den.proj.b", Tensor<T>({C}));
    stem_ = nn::make_conv2d(store_, "den.stem", C * cfg_.frames, D, 3, 1, rng);
    emb_ = nn::make_linear(store_, "den.emb", 2 * cfg_.fourier, D, rng);
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      const auto p = "den.block" + std::to_string(b);
      gains_.push_back(store_.add(p + ".norm", Tensor<T>({D}, T{1})));
      mods_.push_back(nn::make_linear(store_, p + ".mod", D, 2 * D, rng, true));
      convs_.push_back(nn::make_conv2d(store_, p + ".conv", D, D, 3, 1, rng));
    }
    head_gain_ = store_.add("den.head.norm", Tensor<T>({D}, T{1}));
    head_ = nn::make_conv2d(store_, "den.head", D, C, 1, 1, rng, true);
  }

  const DenoiserConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }

  /// F_θ on a condition tensor (N, C, T, h, w) → (N, C, h, w).
  Var<T> raw(const Var<T>& cond, const std::vector<double>& c_noise) const {
    if (cond.shape().size() != 5 || cond.dim(1) != cfg_.channels || cond.dim(2) != cfg_.frames)
      throw DomainError("denoiser: condition must be (N, " + std::to_string(cfg_.channels) + ", " +
                        std::to_string(cfg_.frames) + ", h, w), got " + shape_string(cond.shape()));
    const std::size_t N = cond.dim(0), h = cond.dim(3), w = cond.dim(4), D = cfg_.width;
    auto x = ad::conv3d(cond, proj_w_, &proj_b_, ad::ConvOptions{1, 1, 0, 0, true});
    x = ad::silu(stem_(ad::reshape(x, {N, cfg_.channels * cfg_.frames, h, w})));
    const auto e = ad::silu(emb_(Var<T>::constant(noise_features<T>(c_noise, cfg_.fourier))));
    const auto ones = Var<T>::constant(Tensor<T>({N, D}, T{1}));
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      const auto mod = mods_[b](e);
      const auto scale = ad::add(ad::slice(mod, 1, 0, D), ones);
      const auto y = ad::film(ad::rmsnorm(x, gains_[b]), scale, ad::slice(mod, 1, D, 2 * D));
      x = ad::add(x, convs_[b](ad::silu(y)));
    }
    return head_(ad::rmsnorm(x, head_gain_));
  }

  /// D(z'; σ) = c_skip·z' + c_out·F(c_in·z', z̄, z_prev/σ_d; c_noise), one σ per sample.
  Var<T> denoise(const Var<T>& z_noisy, const Var<T>& z_bar, const Var<T>& z_prev, const std::vector<double>& sigmas,
                 double sigma_data) const {
    const std::size_t N = z_noisy.dim(0);
    if (sigmas.size() != N) throw DomainError("denoiser: one sigma per sample required");
    std::vector<T> skip(N), out(N), in(N);
    std::vector<double> c_noise(N);
    for (std::size_t n = 0; n < N; ++n) {
      const auto p = precondition(sigmas[n], sigma_data);
      skip[n] = static_cast<T>(p.c_skip), out[n] = static_cast<T>(p.c_out), in[n] = static_cast<T>(p.c_in);
      c_noise[n] = p.c_noise;
    }
    const auto cond = build_condition(ad::scale_rows(z_noisy, in), z_bar, ad::scale(z_prev, static_cast<T>(1.0 / sigma_data)));
    return ad::add(ad::scale_rows(z_noisy, skip), ad::scale_rows(raw(cond, c_noise), out));
  }

  /// Frozen sampler callback for a single conditioning context (batch of one).
  DenoiseFn callback(Tensor<T> z_bar, Tensor<T> z_prev, double sigma_data) const {
    return [this, zb = Var<T>::constant(std::move(z_bar)), zp = Var<T>::constant(std::move(z_prev)),
            sigma_data](const Tensor<double>& x, double sigma) {
      ad::NoGradGuard guard;
      const auto d = denoise(Var<T>::constant(x.cast<T>()), zb, zp, std::vector<double>(x.dim(0), sigma), sigma_data);
      return d.value().template cast<double>();
    };
  }

 private:
  DenoiserConfig cfg_;
  nn::ParamStore<T> store_;
  Var<T> proj_w_, proj_b_, head_gain_;
  nn::Conv2d<T> stem_, head_;
  nn::Linear<T> emb_;
  std::vector<Var<T>> gains_;
  std::vector<nn::Linear<T>> mods_;
  std::vector<nn::Conv2d<T>> convs_;
};

/// Mean over samples of λ(σ_n)·mean((D − z)²) at given noise levels and unit noise draws.
template <class T>
Var<T> diffusion_loss_at(const Denoiser<T>& net, const Tensor<T>& z_clean, const Tensor<T>& z_bar,
                         const Tensor<T>& z_prev, const std::vector<double>& sigmas, const Tensor<T>& noise,
                         double sigma_data) {
  const std::size_t N = z_clean.dim(0), S = z_clean.size() / N;
  Tensor<T> noisy = z_clean;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < S; ++k) noisy[n * S + k] += static_cast<T>(sigmas[n]) * noise[n * S + k];
  const auto d = net.denoise(Var<T>::constant(std::move(noisy)), Var<T>::constant(z_bar), Var<T>::constant(z_prev), sigmas,
                             sigma_data);
  const auto diff = ad::sub(d, Var<T>::constant(z_clean));
  std::vector<T> w(N);
  for (std::size_t n = 0; n < N; ++n) w[n] = static_cast<T>(loss_weight(sigmas[n], sigma_data) / static_cast<double>(N * S));
  return ad::sum(ad::scale_rows(ad::mul(diff, diff), std::move(w)));
}

template <class T>
Var<T> diffusion_loss(const Denoiser<T>& net, const Tensor<T>& z_clean, const Tensor<T>& z_bar, const Tensor<T>& z_prev,
                      std::mt19937_64& rng, const EdmConfig& cfg) {
  const std::size_t N = z_clean.dim(0);
  std::vector<double> sigmas(N);
  for (auto& s : sigmas) s = sample_sigma(rng, cfg);
  Tensor<T> noise(z_clean.shape());
  std::normal_distribution<double> g;
  for (auto& v : noise.values()) v = static_cast<T>(g(rng));
  return diffusion_loss_at(net, z_clean, z_bar, z_prev, sigmas, noise, cfg.sigma_data);
}

/// Empirical std of a latent collection, the σ_data auto-estimate.
template <class T>
double estimate_sigma_data(const Tensor<T>& latents) {
  double m = 0.0, q = 0.0;
  for (T v : latents.values()) m += v;
  m /= static_cast<double>(latents.size());
  for (T v : latents.values()) q += (v - m) * (v - m);
  const double s = std::sqrt(q / static_cast<double>(latents.size()));
  if (!(s > 0.0)) throw NumericError("sigma_data estimate is zero");
  return s;
}

}  // namespace nimbus::edm
