#pragma once

// Probabilistic verification: ensemble-mean RMSE, fair/empirical CRPS, spread-skill
// ratio, rank histograms with a chi-square flatness test, and latent spectral
// diagnostics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "nimbus/error.hpp"
#include "nimbus/spectral.hpp"
#include "nimbus/tensor.hpp"

namespace nimbus::verify {

/// Ensemble members for one case: members[m] is a flat field, weights per point.
struct Case {
  std::vector<std::span<const float>> members;
  std::span<const float> truth;
};

namespace detail {

inline void check_case(const Case& c, std::span<const double> w) {
  if (c.members.empty()) throw DomainError("verification case has no members");
  for (const auto& m : c.members)
    if (m.size() != c.truth.size()) throw DomainError("member and truth sizes differ");
  if (!w.empty() && w.size() != c.truth.size()) throw DomainError("weights must match the field size");
}

inline double weight(std::span<const double> w, std::size_t i) { return w.empty() ? 1.0 : w[i]; }

}  // namespace detail

/// Point weights for a (V, H, W) field from per-row latitude weights.
inline std::vector<double> field_weights(std::span<const double> lat_w, std::size_t variables, std::size_t width) {
  std::vector<double> w;
  w.reserve(variables * lat_w.size() * width);
  for (std::size_t v = 0; v < variables; ++v)
    for (double r : lat_w) w.insert(w.end(), width, r);
  return w;
}

/// Weighted squared error of the ensemble mean and weight total for one case.
inline std::pair<double, double> mean_sq_error(const Case& c, std::span<const double> w) {
  detail::check_case(c, w);
  const double M = static_cast<double>(c.members.size());
  double se = 0.0, tw = 0.0;
  for (std::size_t i = 0; i < c.truth.size(); ++i) {
    double mean = 0.0;
    for (const auto& m : c.members) mean += m[i];
    const double d = mean / M - c.truth[i], wi = detail::weight(w, i);
    se += wi * d * d;
    tw += wi;
  }
  return {se, tw};
}

/// Weighted mean over points of the unbiased ensemble variance.
inline std::pair<double, double> mean_variance(const Case& c, std::span<const double> w) {
  detail::check_case(c, w);
  const std::size_t M = c.members.size();
  if (M < 2) throw DomainError("spread needs at least two members");
  double sv = 0.0, tw = 0.0;
  for (std::size_t i = 0; i < c.truth.size(); ++i) {
    double mean = 0.0, sq = 0.0;
    for (const auto& m : c.members) mean += m[i];
    mean /= static_cast<double>(M);
    for (const auto& m : c.members) sq += (m[i] - mean) * (m[i] - mean);
    const double wi = detail::weight(w, i);
    sv += wi * sq / static_cast<double>(M - 1);
    tw += wi;
  }
  return {sv, tw};
}

/// √(Σ w·(mean_m x_m − y)² / Σ w) pooled over cases.
inline double rmse_ensemble_mean(std::span<const Case> cases, std::span<const double> w = {}) {
  double se = 0.0, tw = 0.0;
  for (const auto& c : cases) {
    const auto [a, b] = mean_sq_error(c, w);
    se += a;
    tw += b;
  }
  if (!(tw > 0.0)) throw DomainError("rmse: zero total weight");
  return std::sqrt(se / tw);
}

inline double rmse_ensemble_mean(const Case& c, std::span<const double> w = {}) {
  return rmse_ensemble_mean(std::span<const Case>(&c, 1), w);
}

inline double crps_empirical(std::span<const double> x, double y) {
  if (x.empty()) throw DomainError("crps needs at least one member");
  const double M = static_cast<double>(x.size());
  double a = 0.0, b = 0.0;
  for (double xi : x) a += std::abs(xi - y);
  for (double xi : x)
    for (double xj : x) b += std::abs(xi - xj);
  return a / M - b / (2.0 * M * M);
}

inline double crps_fair(std::span<const double> x, double y) {
  if (x.size() < 2) throw DomainError("fair crps needs at least two members");
  const double M = static_cast<double>(x.size());
  double a = 0.0, b = 0.0;
  for (double xi : x) a += std::abs(xi - y);
  for (double xi : x)
    for (double xj : x) b += std::abs(xi - xj);
  return a / M - b / (2.0 * M * (M - 1.0));
}

/// Weighted field-mean CRPS for one case.
inline double crps_field(const Case& c, std::span<const double> w, bool fair = true) {
  detail::check_case(c, w);
  std::vector<double> x(c.members.size());
  double s = 0.0, tw = 0.0;
  for (std::size_t i = 0; i < c.truth.size(); ++i) {
    for (std::size_t m = 0; m < x.size(); ++m) x[m] = c.members[m][i];
    const double wi = detail::weight(w, i);
    s += wi * (fair ? crps_fair(x, c.truth[i]) : crps_empirical(x, c.truth[i]));
    tw += wi;
  }
  return s / tw;
}

/// Spread / skill with spread = √(factor · mean unbiased variance); factor (M+1)/M when corrected.
inline double spread_skill_ratio(std::span<const Case> cases, std::span<const double> w = {}, bool correction = true) {
  if (cases.empty()) throw DomainError("ssr: no cases");
  double sv = 0.0, tw = 0.0;
  for (const auto& c : cases) {
    const auto [a, b] = mean_variance(c, w);
    sv += a;
    tw += b;
  }
  const double M = static_cast<double>(cases.front().members.size());
  const double spread = std::sqrt((correction ? (M + 1.0) / M : 1.0) * sv / tw);
  const double skill = rmse_ensemble_mean(cases, w);
  if (!(skill > 0.0)) throw DomainError("ssr: ensemble-mean error is zero");
  return spread / skill;
}

struct RankHistogram {
  std::vector<std::size_t> counts;  // M + 1 bins
  double chi_square = 0.0;
  double p_value = 1.0;

  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
};

/// Rank of `y` among members with ties broken uniformly at random.
inline std::size_t rank_of(std::span<const double> x, double y, std::mt19937_64& rng) {
  std::size_t below = 0, equal = 0;
  for (double xi : x) {
    if (xi < y) ++below;
    else if (xi == y) ++equal;
  }
  if (equal == 0) return below;
  return below + std::uniform_int_distribution<std::size_t>(0, equal)(rng);
}

inline void finish(RankHistogram& h) {
  const double n = static_cast<double>(h.total()), bins = static_cast<double>(h.counts.size());
  if (n == 0.0) return;
  const double expect = n / bins;
  h.chi_square = 0.0;
  for (auto c : h.counts) h.chi_square += (c - expect) * (c - expect) / expect;
  boost::math::chi_squared dist(bins - 1.0);
  h.p_value = boost::math::cdf(boost::math::complement(dist, h.chi_square));
}

/// One scalar case per row: members (cases × M) and truths (cases).
inline RankHistogram rank_histogram(const std::vector<std::vector<double>>& members, std::span<const double> truths,
                                    std::uint64_t seed) {
  if (members.size() != truths.size()) throw DomainError("rank histogram: one truth per case required");
  if (members.empty()) throw DomainError("rank histogram: no cases");
  const std::size_t M = members.front().size();
  RankHistogram h{std::vector<std::size_t>(M + 1, 0)};
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < members.size(); ++i) {
    if (members[i].size() != M) throw DomainError("rank histogram: ragged ensemble");
    ++h.counts[rank_of(members[i], truths[i], rng)];
  }
  finish(h);
  return h;
}

/// Grid-point ranks over field cases, optionally thinned by `stride` to reduce spatial correlation.
inline RankHistogram rank_histogram(std::span<const Case> cases, std::uint64_t seed, std::size_t stride = 1) {
  if (cases.empty()) throw DomainError("rank histogram: no cases");
  const std::size_t M = cases.front().members.size();
  RankHistogram h{std::vector<std::size_t>(M + 1, 0)};
  std::mt19937_64 rng(seed);
  std::vector<double> x(M);
  for (const auto& c : cases) {
    detail::check_case(c, {});
    if (c.members.size() != M) throw DomainError("rank histogram: ragged ensemble");
    for (std::size_t i = 0; i < c.truth.size(); i += std::max<std::size_t>(stride, 1)) {
      for (std::size_t m = 0; m < M; ++m) x[m] = c.members[m][i];
      ++h.counts[rank_of(x, c.truth[i], rng)];
    }
  }
  finish(h);
  return h;
}

// ---------------------------------------------------------------- diffusability

struct DiffusabilityReport {
  std::vector<double> band_edges;           // B + 1 edges
  std::vector<double> encoder_bands;        // normalized energy per band
  std::vector<double> generated_bands;
  std::vector<double> mask_radii;
  std::vector<double> encoder_rmse;         // decoded-field RMSE after latent low-pass
  std::vector<double> generated_rmse;
};

/// Mean normalized band energy over all (h, w) planes of a latent set.
template <class T>
std::vector<double> mean_band_energy(const Tensor<T>& latents, std::span<const double> edges) {
  const std::size_t r = latents.rank(), h = latents.dim(r - 2), w = latents.dim(r - 1), planes = latents.size() / (h * w);
  std::vector<double> acc(edges.size() - 1, 0.0);
  for (std::size_t p = 0; p < planes; ++p) {
    const std::vector<double> plane(latents.data() + p * h * w, latents.data() + (p + 1) * h * w);
    const auto e = spectral::band_energy(spectral::fft2(plane, h, w), edges);
    for (std::size_t b = 0; b < acc.size(); ++b) acc[b] += e[b] / static_cast<double>(planes);
  }
  return acc;
}

/// `decode_rmse(latents)` decodes a latent set and returns its error against the reference fields.
template <class T>
DiffusabilityReport diffusability_report(const Tensor<T>& encoder_latents, const Tensor<T>& generated_latents,
                                         std::vector<double> edges, std::vector<double> mask_radii,
                                         const std::function<double(const Tensor<T>&)>& decode_rmse = {}) {
  if (encoder_latents.shape() != generated_latents.shape()) throw DomainError("diffusability: latent sets differ in shape");
  DiffusabilityReport rep;
  rep.encoder_bands = mean_band_energy(encoder_latents, edges);
  rep.generated_bands = mean_band_energy(generated_latents, edges);
  rep.band_edges = std::move(edges);
  if (decode_rmse) {
    const std::size_t r = encoder_latents.rank(), h = encoder_latents.dim(r - 2), w = encoder_latents.dim(r - 1);
    for (double radius : mask_radii) {
      auto a = encoder_latents, b = generated_latents;
      if (radius < spectral::max_radius(h, w)) {
        spectral::lowpass_slices(a.values(), h, w, radius);
        spectral::lowpass_slices(b.values(), h, w, radius);
      }
      rep.encoder_rmse.push_back(decode_rmse(a));
      rep.generated_rmse.push_back(decode_rmse(b));
    }
  }
  rep.mask_radii = std::move(mask_radii);
  return rep;
}

}  // namespace nimbus::verify
