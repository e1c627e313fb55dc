#pragma once

// Autoregressive ensemble rollout. Each member owns its recent states, previous
// residual latent and RNG stream; members run on a small worker pool and are
// merged by index.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <deque>
#include <exception>
#include <functional>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "nimbus/edm.hpp"
#include "nimbus/error.hpp"
#include "nimbus/grid.hpp"
#include "nimbus/tensor.hpp"

namespace nimbus::forecast {

/// Everything a rollout needs from the trained system, as plain callables.
struct ForecastModel {
  std::size_t k = 4;
  Shape latent;  // (C, h, w)
  std::vector<grid::VariableSpec> state_stats;
  std::vector<grid::VariableSpec> residual_stats;
  /// (1, V, k+1, H, W) standardized window, last slot masked → z̄ (1, C, F, h, w).
  std::function<Tensor<float>(const Tensor<float>&)> condition;
  /// Previous latent from the standardized last residual and state, both (1, V, H, W).
  std::function<Tensor<float>(const Tensor<float>& residual, const Tensor<float>& state)> previous;
  /// Latent (1, C, h, w) → standardized residual (1, V, H, W).
  std::function<Tensor<float>(const Tensor<float>&)> decode;
  /// D(x; σ | z̄, z_prev).
  std::function<Tensor<double>(const Tensor<double>&, double, const Tensor<float>& z_bar, const Tensor<float>& z_prev)>
      denoise;
  /// When set, the sampled latent becomes the next z_prev instead of re-encoding.
  bool sample_is_previous = true;
};

struct RolloutConfig {
  std::size_t members = 8;
  std::size_t leads = 20;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  bool stochastic = false;
  edm::EdmConfig sampler;
  /// Explicit per-member seeds; derived from (seed, m) when empty.
  std::vector<std::uint64_t> member_seeds;
};

inline std::uint64_t member_seed(std::uint64_t seed, std::size_t m) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(m), static_cast<std::uint32_t>(m >> 32), 0x3e3bu};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

struct MemberState {
  std::deque<Tensor<float>> states;  // physical (V, H, W), oldest first
  Tensor<float> z_prev;
  std::size_t step = 0;
};

namespace detail {

inline Tensor<float> standardize(const Tensor<float>& x, const std::vector<grid::VariableSpec>& s) {
  const std::size_t V = x.dim(0), P = x.size() / V;
  Tensor<float> out({1, V, x.dim(1), x.dim(2)});
  for (std::size_t v = 0; v < V; ++v)
    for (std::size_t i = 0; i < P; ++i)
      out[v * P + i] = static_cast<float>((static_cast<double>(x[v * P + i]) - s[v].mean) / s[v].std);
  return out;
}

inline Tensor<float> difference(const Tensor<float>& a, const Tensor<float>& b) {
  Tensor<float> d = a;
  for (std::size_t i = 0; i < d.size(); ++i) d[i] -= b[i];
  return d;
}

}  // namespace detail

/// `window` holds k+1 consecutive physical states (T, V, H, W).
inline MemberState init_member(const ForecastModel& model, const grid::FieldBatch& window) {
  if (window.times() != model.k + 1)
    throw DomainError("initial window needs k+1 = " + std::to_string(model.k + 1) + " states, got " +
                      std::to_string(window.times()));
  MemberState s;
  const Shape frame{window.variables(), window.height(), window.width()};
  for (std::size_t t = 0; t < window.times(); ++t)
    s.states.emplace_back(frame, std::vector<float>(window.frame(t).begin(), window.frame(t).end()));
  const auto& last = s.states.back();
  s.z_prev = model.previous(detail::standardize(detail::difference(last, s.states[s.states.size() - 2]), model.residual_stats),
                            detail::standardize(last, model.state_stats));
  return s;
}

/// Advances one member by one lead time and returns the new physical state.
inline Tensor<float> step(const ForecastModel& model, MemberState& s, const RolloutConfig& cfg, std::mt19937_64& rng) {
  const std::size_t k = model.k;
  const auto& cur = s.states.back();
  const std::size_t V = cur.dim(0), H = cur.dim(1), W = cur.dim(2), P = H * W;

  // k most recent known states followed by the masked target slot
  Tensor<float> window({1, V, k + 1, H, W});
  for (std::size_t f = 0; f < k; ++f) {
    const auto x = detail::standardize(s.states[s.states.size() - k + f], model.state_stats);
    for (std::size_t v = 0; v < V; ++v) std::copy_n(x.data() + v * P, P, window.data() + (v * (k + 1) + f) * P);
  }
  const auto z_bar = model.condition(window);
  const auto& z_prev = s.z_prev;
  const edm::DenoiseFn fn = [&](const Tensor<double>& x, double sigma) { return model.denoise(x, sigma, z_bar, z_prev); };
  Shape shape{1};
  shape.insert(shape.end(), model.latent.begin(), model.latent.end());
  Tensor<double> z_hat;
  try {
    z_hat = edm::sample(fn, shape, rng, cfg.sampler, cfg.stochastic);
  } catch (const NumericError& e) {
    throw NumericError("rollout aborted at step " + std::to_string(s.step) + ": " + e.what());
  }
  const auto z = z_hat.cast<float>();
  const auto delta = model.decode(z);

  Tensor<float> next = cur;
  for (std::size_t v = 0; v < V; ++v) {
    const double m = model.residual_stats[v].mean, sd = model.residual_stats[v].std;
    for (std::size_t i = 0; i < P; ++i) {
      next[v * P + i] = static_cast<float>(cur[v * P + i] + (static_cast<double>(delta[v * P + i]) * sd + m));
      if (!std::isfinite(next[v * P + i]))
        throw NumericError("rollout aborted at step " + std::to_string(s.step) + ": non-finite decoded field");
    }
  }
  if (model.sample_is_previous)
    s.z_prev = z.reshaped(s.z_prev.shape());
  else
    s.z_prev = model.previous(detail::standardize(detail::difference(next, cur), model.residual_stats),
                              detail::standardize(next, model.state_stats));
  s.states.push_back(next);
  s.states.pop_front();
  ++s.step;
  return next;
}

struct EnsembleForecast {
  std::size_t members = 0;
  std::size_t leads = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<Tensor<float>> data;  // per member (leads, V, H, W)

  /// Member m at lead l (0-based) as a flat (V, H, W) span.
  std::span<const float> at(std::size_t m, std::size_t l) const {
    const std::size_t frame = data[m].size() / leads;
    return data[m].values().subspan(l * frame, frame);
  }
};

/// Runs `fn(i)` for i in [0, n) on up to `workers` threads; rethrows the first failure.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

inline EnsembleForecast rollout(const ForecastModel& model, const grid::FieldBatch& init, const RolloutConfig& cfg) {
  if (cfg.members == 0 || cfg.leads == 0) throw ConfigError("forecast: members and leads must be >= 1");
  if (!cfg.member_seeds.empty() && cfg.member_seeds.size() != cfg.members)
    throw ConfigError("forecast: member_seeds must list one seed per member");
  EnsembleForecast out;
  out.members = cfg.members;
  out.leads = cfg.leads;
  for (std::size_t m = 0; m < cfg.members; ++m)
    out.seeds.push_back(cfg.member_seeds.empty() ? member_seed(cfg.seed, m) : cfg.member_seeds[m]);
  out.data.resize(cfg.members);
  const auto base = init_member(model, init);
  parallel_for(cfg.members, cfg.workers, [&](std::size_t m) {
    MemberState s = base;
    std::mt19937_64 rng(out.seeds[m]);
    Tensor<float> traj({cfg.leads, init.variables(), init.height(), init.width()});
    const std::size_t frame = init.frame_size();
    for (std::size_t l = 0; l < cfg.leads; ++l) {
      const auto x = step(model, s, cfg, rng);
      std::copy_n(x.data(), frame, traj.data() + l * frame);
    }
    out.data[m] = std::move(traj);
  });
  return out;
}

}  // namespace nimbus::forecast
