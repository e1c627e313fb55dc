#pragma once

// Training targets for the spectral regularizers of the residual VAE:
//   VAMFM  per-variable input cutoffs holding the retained energy at γ, latent cut at radius γ
//   FFM    one fixed input cutoff for every variable (paired with γ), latent cut at radius γ
//   SE     area-averaged downsampling of input and latent
//   NONE   plain reconstruction

#include <array>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nimbus/error.hpp"
#include "nimbus/spectral.hpp"
#include "nimbus/tensor.hpp"

namespace nimbus::regularize {

enum class Strategy { None, Vamfm, Ffm, Se };

inline Strategy parse_strategy(std::string_view s) {
  if (s == "none") return Strategy::None;
  if (s == "vamfm") return Strategy::Vamfm;
  if (s == "ffm") return Strategy::Ffm;
  if (s == "se") return Strategy::Se;
  throw ConfigError("unknown regularizer '" + std::string(s) + "' (expected vamfm|ffm|se|none)");
}

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::None: return "none";
    case Strategy::Vamfm: return "vamfm";
    case Strategy::Ffm: return "ffm";
    case Strategy::Se: return "se";
  }
  return "none";
}

inline constexpr std::array<double, 4> kGammaSchedule = {0.25, 0.5, 0.75, 1.0};
inline constexpr std::array<double, 4> kFfmInputCutoffs = {0.05, 0.10, 0.20, 1.0};

/// γ ~ U{0.25, 0.5, 0.75, 1.0}.
template <class Rng>
double sample_gamma(Rng& rng) {
  std::uniform_int_distribution<int> pick(0, 3);
  return kGammaSchedule[static_cast<std::size_t>(pick(rng))];
}

inline std::size_t gamma_index(double gamma) {
  for (std::size_t i = 0; i < kGammaSchedule.size(); ++i)
    if (kGammaSchedule[i] == gamma) return i;
  throw DomainError("gamma " + std::to_string(gamma) + " is not in the masking schedule");
}

inline double ffm_input_cutoff(double gamma) { return kFfmInputCutoffs[gamma_index(gamma)]; }

struct MaskPlan {
  double gamma = 1.0;
  std::vector<double> input_cutoffs;  // one per variable
  double latent_cutoff = 0.0;
  Strategy strategy = Strategy::None;

  /// γ = 1 disables masking whatever the strategy.
  bool active() const { return gamma < 1.0 && strategy != Strategy::None; }
};

/// Per-variable cutoffs from each channel's own cumulative spectrum.
/// `x` is one frame laid out (V, H, W).
template <class T>
MaskPlan plan_vamfm(const Tensor<T>& x, double gamma) {
  gamma_index(gamma);
  MaskPlan plan{gamma, {}, gamma, Strategy::Vamfm};
  const std::size_t V = x.dim(0), H = x.dim(1), W = x.dim(2);
  for (std::size_t v = 0; v < V; ++v) {
    const auto profile = spectral::radial_profile(x.values().subspan(v * H * W, H * W), H, W);
    plan.input_cutoffs.push_back(spectral::cutoff_for_ratio(profile, gamma));
  }
  return plan;
}

/// Cutoffs from dataset-level profiles (one SpectralProfile per variable).
inline MaskPlan plan_vamfm(std::span<const spectral::SpectralProfile> profiles, double gamma) {
  gamma_index(gamma);
  MaskPlan plan{gamma, {}, gamma, Strategy::Vamfm};
  for (const auto& p : profiles) plan.input_cutoffs.push_back(spectral::cutoff_for_ratio(p, gamma));
  return plan;
}

inline MaskPlan plan_ffm(std::size_t variables, double gamma) {
  return {gamma, std::vector<double>(variables, ffm_input_cutoff(gamma)), gamma, Strategy::Ffm};
}

/// Input-side low-pass of one (V, H, W) frame according to the plan.
template <class T>
Tensor<T> mask_input(const Tensor<T>& x, const MaskPlan& plan) {
  if (!plan.active()) return x;
  Tensor<T> out = x;
  const std::size_t V = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (plan.input_cutoffs.size() != V) throw DomainError("mask plan has wrong number of input cutoffs");
  for (std::size_t v = 0; v < V; ++v)
    spectral::lowpass_inplace(out.values().subspan(v * H * W, H * W), H, W, plan.input_cutoffs[v]);
  return out;
}

/// Latent-side low-pass at the plan's latent radius; `z` is (..., h, w).
template <class T>
Tensor<T> mask_latent(const Tensor<T>& z, const MaskPlan& plan) {
  const std::size_t h = z.dim(z.rank() - 2), w = z.dim(z.rank() - 1);
  if (h < 2 || w < 2) throw DomainError("latent spatial dims must be at least 2");
  if (!plan.active()) return z;
  Tensor<T> out = z;
  spectral::lowpass_slices(out.values(), h, w, plan.latent_cutoff);
  return out;
}

template <class T>
struct Targets {
  Tensor<T> target;
  Tensor<T> latent;
  MaskPlan plan;
};

template <class T>
Targets<T> vamfm_targets(const Tensor<T>& x, const Tensor<T>& z, double gamma) {
  auto plan = plan_vamfm(x, gamma);
  return {mask_input(x, plan), mask_latent(z, plan), std::move(plan)};
}

template <class T>
Targets<T> ffm_targets(const Tensor<T>& x, const Tensor<T>& z, double gamma) {
  auto plan = plan_ffm(x.dim(0), gamma);
  return {mask_input(x, plan), mask_latent(z, plan), std::move(plan)};
}

/// Block mean over factor×factor cells of the two trailing axes.
template <class T>
Tensor<T> area_downsample(const Tensor<T>& x, std::size_t factor) {
  if (factor == 1) return x;
  const std::size_t r = x.rank();
  const std::size_t H = x.dim(r - 2), W = x.dim(r - 1);
  if (factor == 0 || H % factor || W % factor) throw DomainError("downsample factor must divide spatial dims");
  Shape s = x.shape();
  s[r - 2] = H / factor;
  s[r - 1] = W / factor;
  Tensor<T> out(s);
  const std::size_t planes = x.size() / (H * W), h = H / factor, w = W / factor;
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        double acc = 0.0;
        for (std::size_t a = 0; a < factor; ++a)
          for (std::size_t b = 0; b < factor; ++b) acc += x[p * H * W + (i * factor + a) * W + j * factor + b];
        out[p * h * w + i * w + j] = static_cast<T>(acc * inv);
      }
  return out;
}

template <class T>
Targets<T> se_targets(const Tensor<T>& x, const Tensor<T>& z, std::size_t factor) {
  if (factor != 1 && factor != 2 && factor != 4) throw DomainError("SE factor must be 1, 2 or 4");
  MaskPlan plan{factor == 1 ? 1.0 : 0.5, {}, 0.0, factor == 1 ? Strategy::None : Strategy::Se};
  return {area_downsample(x, factor), area_downsample(z, factor), std::move(plan)};
}

}  // namespace nimbus::regularize
