#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "nimbus/error.hpp"
#include "nimbus/tensor.hpp"

namespace nimbus::grid {

struct VariableSpec {
  std::string name;
  std::optional<double> level;  // hPa
  double mean = 0.0;
  double std = 1.0;
  double loss_weight = 1.0;

  friend bool operator==(const VariableSpec& a, const VariableSpec& b) = default;
};

inline void validate_specs(std::span<const VariableSpec> specs) {
  std::set<std::string> names;
  for (const auto& s : specs) {
    if (!(s.std > 0.0) || !std::isfinite(s.std)) throw ConfigError("variable '" + s.name + "' needs std > 0");
    if (!(s.loss_weight >= 0.0)) throw ConfigError("variable '" + s.name + "' needs loss_weight >= 0");
    if (!names.insert(s.name).second) throw ConfigError("duplicate variable name '" + s.name + "'");
  }
}

/// Gridded multivariate states, data laid out (time, variable, lat, lon).
struct FieldBatch {
  Tensor<float> data;
  std::vector<double> lat;
  std::vector<double> lon;
  std::vector<VariableSpec> specs;

  std::size_t times() const { return data.dim(0); }
  std::size_t variables() const { return data.dim(1); }
  std::size_t height() const { return data.dim(2); }
  std::size_t width() const { return data.dim(3); }
  std::size_t plane() const { return height() * width(); }
  std::size_t frame_size() const { return variables() * plane(); }

  std::span<const float> frame(std::size_t t) const { return data.values().subspan(t * frame_size(), frame_size()); }
  std::span<float> frame(std::size_t t) { return data.values().subspan(t * frame_size(), frame_size()); }
  std::span<const float> channel(std::size_t t, std::size_t v) const {
    return data.values().subspan(t * frame_size() + v * plane(), plane());
  }

  void validate() const {
    if (data.rank() != 4) throw DomainError("field batch must be (T, V, H, W)");
    if (lat.size() != height() || lon.size() != width() || specs.size() != variables())
      throw DomainError("field batch axes inconsistent with data shape " + shape_string(data.shape()));
    const bool ascending = lat.size() > 1 && lat[1] > lat[0];
    for (std::size_t i = 0; i < lat.size(); ++i) {
      if (!(lat[i] >= -90.0 && lat[i] <= 90.0)) throw DomainError("latitude outside [-90, 90]");
      if (i > 0 && !(ascending ? lat[i] > lat[i - 1] : lat[i] < lat[i - 1]))
        throw DomainError("latitudes must be strictly monotone");
    }
    for (float v : data.values())
      if (!std::isfinite(v)) throw DomainError("field batch contains non-finite values");
    validate_specs(specs);
  }

  /// Copy of frames [begin, end).
  FieldBatch slice_time(std::size_t begin, std::size_t end) const {
    if (begin > end || end > times()) throw DomainError("time slice out of range");
    FieldBatch out{Tensor<float>({end - begin, variables(), height(), width()}), lat, lon, specs};
    std::copy(data.data() + begin * frame_size(), data.data() + end * frame_size(), out.data.data());
    return out;
  }
};

/// X_{t+1} − X_t; specs carry residual statistics (not state statistics).
struct ResidualBatch {
  FieldBatch delta;
};

struct LatWeights {
  std::vector<double> w;
};

inline LatWeights lat_weights(std::span<const double> lat) {
  if (lat.empty()) throw DomainError("lat_weights: empty latitude list");
  std::vector<double> c(lat.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < lat.size(); ++i) {
    if (!(std::abs(lat[i]) <= 90.0)) throw DomainError("lat_weights: |lat| > 90");
    c[i] = std::cos(lat[i] * std::numbers::pi / 180.0);
    sum += c[i];
  }
  if (!(sum > 0.0)) throw DomainError("lat_weights: all rows at the poles");
  const double mean = sum / static_cast<double>(lat.size());
  for (auto& v : c) v /= mean;
  return {std::move(c)};
}

/// Cell-centre latitudes from north to south.
inline std::vector<double> equiangular_lat(std::size_t h) {
  std::vector<double> lat(h);
  for (std::size_t i = 0; i < h; ++i) lat[i] = 90.0 - (static_cast<double>(i) + 0.5) * 180.0 / static_cast<double>(h);
  return lat;
}

inline std::vector<double> equiangular_lon(std::size_t w) {
  std::vector<double> lon(w);
  for (std::size_t j = 0; j < w; ++j) lon[j] = static_cast<double>(j) * 360.0 / static_cast<double>(w);
  return lon;
}

namespace detail {

inline std::vector<const VariableSpec*> match_specs(const FieldBatch& x, std::span<const VariableSpec> specs) {
  std::unordered_map<std::string, const VariableSpec*> by_name;
  for (const auto& s : specs) by_name[s.name] = &s;
  std::vector<const VariableSpec*> out;
  for (const auto& v : x.specs) {
    auto it = by_name.find(v.name);
    if (it == by_name.end()) throw ConfigError("no standardization spec for variable '" + v.name + "'");
    out.push_back(it->second);
  }
  return out;
}

}  // namespace detail

/// Per-channel (x − mean) / std with statistics looked up by variable name.
inline FieldBatch standardize(const FieldBatch& x, std::span<const VariableSpec> specs) {
  const auto matched = detail::match_specs(x, specs);
  FieldBatch out = x;
  for (std::size_t t = 0; t < x.times(); ++t)
    for (std::size_t v = 0; v < x.variables(); ++v) {
      const double m = matched[v]->mean, s = matched[v]->std;
      float* p = out.data.data() + t * x.frame_size() + v * x.plane();
      for (std::size_t i = 0; i < x.plane(); ++i) p[i] = static_cast<float>((static_cast<double>(p[i]) - m) / s);
    }
  return out;
}

inline FieldBatch destandardize(const FieldBatch& x, std::span<const VariableSpec> specs) {
  const auto matched = detail::match_specs(x, specs);
  FieldBatch out = x;
  for (std::size_t t = 0; t < x.times(); ++t)
    for (std::size_t v = 0; v < x.variables(); ++v) {
      const double m = matched[v]->mean, s = matched[v]->std;
      float* p = out.data.data() + t * x.frame_size() + v * x.plane();
      for (std::size_t i = 0; i < x.plane(); ++i) p[i] = static_cast<float>(static_cast<double>(p[i]) * s + m);
    }
  return out;
}

/// Raw differences X_{t+1} − X_t; statistics recomputed from the differences.
inline ResidualBatch residuals(const FieldBatch& x) {
  if (x.times() < 2) throw DomainError("residuals need at least two time steps");
  FieldBatch d{Tensor<float>({x.times() - 1, x.variables(), x.height(), x.width()}), x.lat, x.lon, x.specs};
  const std::size_t n = x.frame_size();
  for (std::size_t t = 0; t + 1 < x.times(); ++t) {
    const float* a = x.data.data() + t * n;
    const float* b = a + n;
    float* o = d.data.data() + t * n;
    for (std::size_t i = 0; i < n; ++i) o[i] = b[i] - a[i];
  }
  return {std::move(d)};
}

/// Per-variable mean/std over all times and grid points (64-bit accumulation).
/// A zero std (static channel) is replaced by 1 so standardization stays finite.
inline std::vector<VariableSpec> channel_statistics(const FieldBatch& x) {
  std::vector<VariableSpec> out = x.specs;
  for (std::size_t v = 0; v < x.variables(); ++v) {
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < x.times(); ++t)
      for (float f : x.channel(t, v)) {
        sum += f;
        sq += static_cast<double>(f) * f;
        ++n;
      }
    const double mean = sum / static_cast<double>(n);
    const double var = std::max(0.0, sq / static_cast<double>(n) - mean * mean);
    out[v].mean = mean;
    out[v].std = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  return out;
}

}  // namespace nimbus::grid
