#pragma once

// Desk-scale stand-in for reanalysis data: per-variable Gaussian random fields
// with distinct spectral slopes, advected periodically with weak stochastic forcing.

#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "nimbus/error.hpp"
#include "nimbus/grid.hpp"
#include "nimbus/spectral.hpp"

namespace nimbus::grid {

struct Velocity {
  double lon = 0.0;  // grid cells per step along longitude
  double lat = 0.0;  // grid cells per step along latitude
};

struct SyntheticConfig {
  std::uint64_t seed = 0;
  std::size_t height = 64;
  std::size_t width = 128;
  std::size_t variables = 8;
  std::size_t times = 96;
  /// Power-spectrum slope per variable: |F(k)|² ∝ |k|^-slope (amplitude ∝ |k|^-slope/2).
  std::vector<double> slopes;
  std::vector<Velocity> advection;
  /// Innovation scale ε of f_{t+1} = √(1−ε²)·shift(f_t) + ε·g_{t+1}; 0 gives pure advection.
  double forcing = 0.1;
  /// Variable metadata; defaults are filled in when empty.
  std::vector<VariableSpec> specs;
};

/// Eight surrogate channels named after common verification variables.
inline std::vector<VariableSpec> default_variable_specs(std::size_t count) {
  const std::vector<VariableSpec> base = {
      {"z500", 500.0, 54000.0, 3000.0, 1.0}, {"t850", 850.0, 275.0, 15.0, 1.0},
      {"u850", 850.0, 3.0, 10.0, 1.0},       {"q700", 700.0, 0.003, 0.002, 1.0},
      {"t2m", std::nullopt, 280.0, 20.0, 1.0}, {"v10", std::nullopt, 0.0, 5.0, 1.0},
      {"msl", std::nullopt, 101000.0, 1000.0, 1.0}, {"u10", std::nullopt, 0.0, 5.0, 1.0},
  };
  std::vector<VariableSpec> out;
  for (std::size_t i = 0; i < count; ++i) {
    if (i < base.size()) {
      out.push_back(base[i]);
    } else {
      out.push_back({"var" + std::to_string(i), std::nullopt, 0.0, 1.0, 1.0});
    }
  }
  return out;
}

/// Slopes evenly spread over [1.0, 3.5], steepest first (z500 smooth, q700 rough).
inline std::vector<double> default_slopes(std::size_t count) {
  static const std::vector<double> table = {3.5, 2.25, 1.75, 1.0, 2.6, 1.4, 3.1, 1.2};
  std::vector<double> out;
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(i < table.size() ? table[i] : 1.0 + 2.5 * static_cast<double>(i % 6) / 5.0);
  return out;
}

inline std::vector<Velocity> default_advection(std::size_t count) {
  static const std::vector<Velocity> table = {{1, 0}, {2, 0}, {-1, 0}, {1, 1}, {3, 0}, {-2, 0}, {1, 0}, {2, -1}};
  std::vector<Velocity> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(table[i % table.size()]);
  return out;
}

namespace detail {

/// Amplitude filter for one slope with zero DC.
inline std::vector<double> slope_filter(std::size_t h, std::size_t w, double slope) {
  const auto r = spectral::radius_grid(h, w);
  std::vector<double> a(r.size(), 0.0);
  for (std::size_t i = 1; i < r.size(); ++i) a[i] = slope == 0.0 ? 1.0 : std::pow(r[i], -slope / 2.0);
  return a;
}

/// Unit-variance Gaussian random field: white noise shaped by `filter`.
inline std::vector<double> shaped_noise(std::size_t h, std::size_t w, const std::vector<double>& filter,
                                        double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  std::vector<double> n(h * w);
  for (auto& v : n) v = normal(rng);
  auto s = spectral::fft2(n, h, w);
  for (std::size_t i = 0; i < filter.size(); ++i) s.coeffs[i] *= filter[i];
  auto x = spectral::ifft2(s);
  for (auto& v : x) v *= scale;
  return x;
}

inline bool is_integral(double v) { return std::floor(v) == v; }

inline std::vector<double> shift_field(const std::vector<double>& f, std::size_t h, std::size_t w, Velocity vel) {
  if (is_integral(vel.lon) && is_integral(vel.lat)) {
    const auto sh = static_cast<long>(vel.lat), sw = static_cast<long>(vel.lon);
    const auto H = static_cast<long>(h), W = static_cast<long>(w);
    std::vector<double> out(f.size());
    for (long i = 0; i < H; ++i) {
      const long si = ((i - sh) % H + H) % H;
      for (long j = 0; j < W; ++j) {
        const long sj = ((j - sw) % W + W) % W;
        out[static_cast<std::size_t>(i * W + j)] = f[static_cast<std::size_t>(si * W + sj)];
      }
    }
    return out;
  }
  // Fractional displacement: phase ramp in Fourier space.
  auto s = spectral::fft2(f, h, w);
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < w; ++v) {
      const double phase = -2.0 * std::numbers::pi *
                           (spectral::signed_frequency(u, h) * vel.lat / static_cast<double>(h) +
                            spectral::signed_frequency(v, w) * vel.lon / static_cast<double>(w));
      s.at(u, v) *= std::polar(1.0, phase);
    }
  return spectral::ifft2(s);
}

}  // namespace detail

inline FieldBatch gen_synthetic(SyntheticConfig cfg) {
  if (cfg.height < 8 || cfg.width < 8) throw DomainError("gen_synthetic needs H, W >= 8");
  if (cfg.times < 1 || cfg.variables < 1) throw DomainError("gen_synthetic needs T, V >= 1");
  if (cfg.slopes.empty()) cfg.slopes = default_slopes(cfg.variables);
  if (cfg.advection.empty()) cfg.advection = default_advection(cfg.variables);
  if (cfg.specs.empty()) cfg.specs = default_variable_specs(cfg.variables);
  if (cfg.slopes.size() != cfg.variables || cfg.advection.size() != cfg.variables || cfg.specs.size() != cfg.variables)
    throw DomainError("gen_synthetic: per-variable lists must have V entries");
  for (double s : cfg.slopes)
    if (!std::isfinite(s)) throw DomainError("gen_synthetic: non-finite slope");
  if (!(cfg.forcing >= 0.0 && cfg.forcing <= 1.0)) throw DomainError("gen_synthetic: forcing must lie in [0, 1]");
  validate_specs(cfg.specs);

  const std::size_t H = cfg.height, W = cfg.width, V = cfg.variables, T = cfg.times;
  FieldBatch out{Tensor<float>({T, V, H, W}), equiangular_lat(H), equiangular_lon(W), cfg.specs};
  const double keep = std::sqrt(1.0 - cfg.forcing * cfg.forcing);

  for (std::size_t v = 0; v < V; ++v) {
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(v), 0x5eedu};
    std::mt19937_64 rng(seq);
    const auto filter = detail::slope_filter(H, W, cfg.slopes[v]);
    double power = 0.0;
    for (double a : filter) power += a * a;
    const double scale = 1.0 / std::sqrt(power / static_cast<double>(H * W));

    auto f = detail::shaped_noise(H, W, filter, scale, rng);
    for (std::size_t t = 0; t < T; ++t) {
      if (t > 0) {
        auto moved = detail::shift_field(f, H, W, cfg.advection[v]);
        if (cfg.forcing > 0.0) {
          const auto g = detail::shaped_noise(H, W, filter, scale, rng);
          for (std::size_t i = 0; i < moved.size(); ++i) moved[i] = keep * moved[i] + cfg.forcing * g[i];
        }
        f = std::move(moved);
      }
      const double m = cfg.specs[v].mean, s = cfg.specs[v].std;
      float* dst = out.data.data() + (t * V + v) * H * W;
      for (std::size_t i = 0; i < H * W; ++i) dst[i] = static_cast<float>(m + s * f[i]);
    }
  }
  return out;
}

}  // namespace nimbus::grid
