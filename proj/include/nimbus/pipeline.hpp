#pragma once

// End-to-end orchestration: dataset generation and splitting, model training,
// latent precomputation, ensemble evaluation, diagnostics and the ablation grid.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "nimbus/autodiff.hpp"
#include "nimbus/config.hpp"
#include "nimbus/edm.hpp"
#include "nimbus/error.hpp"
#include "nimbus/forecast.hpp"
#include "nimbus/grid.hpp"
#include "nimbus/io.hpp"
#include "nimbus/log.hpp"
#include "nimbus/models.hpp"
#include "nimbus/nn.hpp"
#include "nimbus/regularize.hpp"
#include "nimbus/spectral.hpp"
#include "nimbus/synthetic.hpp"
#include "nimbus/verify.hpp"

namespace nimbus::pipeline {

namespace fs = std::filesystem;
using config::RunConfig;
using json = nlohmann::json;
using ad::Var;

/// Stream seed for a named purpose; stable across runs and platforms.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ull ^ seed;
  for (unsigned char c : tag) h = (h ^ c) * 0x100000001b3ull;
  h += 0x9e3779b97f4a7c15ull;
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
  return h ^ (h >> 31);
}

// ---------------------------------------------------------------- data

struct Dataset {
  grid::FieldBatch train;
  grid::FieldBatch test;
  std::vector<grid::VariableSpec> state_stats;
  std::vector<grid::VariableSpec> residual_stats;
};

inline Dataset make_dataset(const config::DataSection& d) {
  grid::SyntheticConfig sc;
  sc.seed = d.seed;
  sc.height = d.height;
  sc.width = d.width;
  sc.variables = d.variables;
  sc.times = d.train_times + d.test_times;
  sc.forcing = d.forcing;
  sc.slopes = d.slopes;
  const auto all = grid::gen_synthetic(sc);
  Dataset ds{all.slice_time(0, d.train_times), all.slice_time(d.train_times, sc.times), {}, {}};
  ds.state_stats = grid::channel_statistics(ds.train);
  ds.residual_stats = grid::channel_statistics(grid::residuals(ds.train).delta);
  return ds;
}

inline json stats_json(const std::vector<grid::VariableSpec>& s) {
  json a = json::array();
  for (const auto& v : s) a.push_back({{"name", v.name}, {"mean", v.mean}, {"std", v.std}, {"loss_weight", v.loss_weight}});
  return a;
}

inline std::vector<grid::VariableSpec> stats_from_json(const json& a, std::vector<grid::VariableSpec> specs) {
  if (!a.is_array() || a.size() != specs.size()) throw FormatError("stats.json does not match the dataset variables", 0);
  for (std::size_t v = 0; v < specs.size(); ++v) {
    if (a[v].at("name").get<std::string>() != specs[v].name) throw FormatError("stats.json variable order differs", 0);
    specs[v].mean = a[v].at("mean").get<double>();
    specs[v].std = a[v].at("std").get<double>();
  }
  return specs;
}

inline void save_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  io::write_fields(ds.train, dir / "train.pyld");
  io::write_fields(ds.test, dir / "test.pyld");
  std::ofstream(dir / "stats.json") << json{{"state", stats_json(ds.state_stats)}, {"residual", stats_json(ds.residual_stats)}}.dump(2)
                                    << '\n';
}

inline Dataset load_dataset(const fs::path& dir) {
  for (const char* f : {"train.pyld", "test.pyld", "stats.json"})
    if (!fs::exists(dir / f)) throw ConfigError("missing dataset file: expected " + (dir / f).string());
  Dataset ds{io::read_fields(dir / "train.pyld"), io::read_fields(dir / "test.pyld"), {}, {}};
  std::ifstream in(dir / "stats.json");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(std::string("stats.json: ") + e.what(), 0);
  }
  ds.state_stats = stats_from_json(j.at("state"), ds.train.specs);
  ds.residual_stats = stats_from_json(j.at("residual"), ds.train.specs);
  return ds;
}

/// Standardized states (T, V, H, W) and standardized residuals (T−1, V, H, W).
struct Prepared {
  Tensor<float> states;
  Tensor<float> residuals;
};

inline Prepared prepare(const grid::FieldBatch& x, const Dataset& ds) {
  return {grid::standardize(x, ds.state_stats).data,
          grid::standardize(grid::residuals(x).delta, ds.residual_stats).data};
}

/// Rows `idx` of a (T, ...) tensor stacked into (B, ...).
inline Tensor<float> gather(const Tensor<float>& x, const std::vector<std::size_t>& idx) {
  Shape s = x.shape();
  const std::size_t row = x.size() / s[0];
  s[0] = idx.size();
  Tensor<float> out(s);
  for (std::size_t b = 0; b < idx.size(); ++b) std::copy_n(x.data() + idx[b] * row, row, out.data() + b * row);
  return out;
}

/// Windows of `len` consecutive frames from (T, V, H, W) as (B, V, len, H, W).
inline Tensor<float> gather_windows(const Tensor<float>& x, const std::vector<std::size_t>& starts, std::size_t len) {
  const std::size_t V = x.dim(1), H = x.dim(2), W = x.dim(3), P = H * W;
  Tensor<float> out({starts.size(), V, len, H, W});
  for (std::size_t b = 0; b < starts.size(); ++b)
    for (std::size_t v = 0; v < V; ++v)
      for (std::size_t f = 0; f < len; ++f)
        std::copy_n(x.data() + ((starts[b] + f) * V + v) * P, P, out.data() + ((b * V + v) * len + f) * P);
  return out;
}

inline std::vector<std::size_t> draw(std::mt19937_64& rng, std::size_t n, std::size_t lo, std::size_t hi) {
  std::uniform_int_distribution<std::size_t> u(lo, hi);
  std::vector<std::size_t> out(n);
  for (auto& i : out) i = u(rng);
  return out;
}

// ---------------------------------------------------------------- training

struct TrainLog {
  std::vector<double> loss;

  void write_csv(const fs::path& path) const {
    std::ofstream out(path);
    out << "iteration,loss\n";
    out.precision(10);
    for (std::size_t i = 0; i < loss.size(); ++i) out << i << ',' << loss[i] << '\n';
  }
};

/// AdamW over `iters` steps of `step(it)`; aborts on a non-finite loss.
template <class T, class Step>
TrainLog optimize(nn::ParamStore<T>& store, std::size_t iters, double lr, const std::string& what, Step&& step) {
  nn::AdamW<T> opt(nn::AdamConfig{lr});
  TrainLog log;
  const auto params = store.vars();
  for (std::size_t it = 0; it < iters; ++it) {
    store.zero_grad();
    const Var<T> loss = step(it);
    const double v = loss.value()[0];
    if (!std::isfinite(v)) throw NumericError(what + ": non-finite loss at iteration " + std::to_string(it));
    ad::backward(loss);
    opt.step(params);
    log.loss.push_back(v);
    if ((it + 1) % 50 == 0) log::info(what + " iteration " + std::to_string(it + 1) + " loss " + std::to_string(v));
  }
  return log;
}

inline models::VaeConfig vae_config(const RunConfig& cfg) {
  models::VaeConfig c;
  c.variables = cfg.data.variables;
  c.hidden = cfg.vae.hidden;
  c.wide = cfg.vae.wide;
  c.latent = cfg.vae.latent;
  c.beta = cfg.vae.beta;
  c.logvar_init = cfg.vae.logvar_init;
  c.se_factor = cfg.vae.se_factor;
  return c;
}

inline models::MaeConfig mae_config(const RunConfig& cfg) {
  return {cfg.data.variables, cfg.mae.hidden, cfg.mae.latent, cfg.mae.decoder, cfg.mae.k};
}

inline models::FrameAeConfig frame_ae_config(const RunConfig& cfg) {
  return {cfg.data.variables, cfg.mae.hidden, cfg.mae.latent};
}

inline edm::DenoiserConfig denoiser_config(const RunConfig& cfg) {
  return {cfg.vae.latent, 3 + cfg.mae.k / 2, cfg.diffusion.width, cfg.diffusion.blocks, cfg.diffusion.fourier};
}

/// Per-variable dataset spectra (mean |F| over training residual frames).
inline std::vector<spectral::SpectralProfile> dataset_profiles(const Tensor<float>& residuals) {
  const std::size_t T = residuals.dim(0), V = residuals.dim(1), H = residuals.dim(2), W = residuals.dim(3), P = H * W;
  std::vector<spectral::SpectralProfile> out;
  for (std::size_t v = 0; v < V; ++v) {
    spectral::Spectrum2D acc;
    for (std::size_t t = 0; t < T; ++t) {
      const auto s = spectral::fft2(std::span<const float>(residuals.data() + (t * V + v) * P, P), H, W);
      if (t == 0) {
        acc = s;
        for (auto& c : acc.coeffs) c = std::abs(c);
      } else {
        for (std::size_t i = 0; i < P; ++i) acc.coeffs[i] += std::abs(s.coeffs[i]);
      }
    }
    out.push_back(spectral::radial_profile(acc));
  }
  return out;
}

template <class M>
struct Trained {
  std::shared_ptr<M> model;
  TrainLog log;
};

inline Trained<models::Vae<float>> train_vae(const Prepared& train, std::span<const double> lat,
                                             std::span<const grid::VariableSpec> specs, const RunConfig& cfg,
                                             std::uint64_t seed) {
  auto vae = std::make_shared<models::Vae<float>>(vae_config(cfg), derive_seed(seed, "vae.init"));
  const auto strategy = regularize::parse_strategy(cfg.vae.strategy);
  const auto weights = models::loss_weights<float>(specs, lat);
  std::vector<spectral::SpectralProfile> profiles;
  if (!cfg.vae.per_sample_cutoffs && strategy == regularize::Strategy::Vamfm) profiles = dataset_profiles(train.residuals);
  std::mt19937_64 rng(derive_seed(seed, "vae.batches"));
  std::mt19937_64 gamma_rng(derive_seed(seed, "vae.gamma"));
  const std::size_t T = train.residuals.dim(0);
  auto log = optimize(vae->params(), cfg.vae.iterations, cfg.vae.lr, "vae", [&](std::size_t) {
    const auto x = gather(train.residuals, draw(rng, cfg.vae.batch, 0, T - 1));
    const double gamma = cfg.vae.gamma_mode == "fixed" ? cfg.vae.gamma : regularize::sample_gamma(gamma_rng);
    return models::vae_loss(*vae, x, strategy, gamma, rng, weights, profiles).total;
  });
  return {vae, std::move(log)};
}

inline Trained<models::Mae<float>> train_mae(const Prepared& train, std::span<const double> lat,
                                             std::span<const grid::VariableSpec> specs, const RunConfig& cfg,
                                             std::uint64_t seed) {
  auto mae = std::make_shared<models::Mae<float>>(mae_config(cfg), derive_seed(seed, "mae.init"));
  const auto weights = models::loss_weights<float>(specs, lat);
  std::mt19937_64 rng(derive_seed(seed, "mae.batches"));
  const std::size_t k = cfg.mae.k, T = train.states.dim(0);
  const auto unmasked = static_cast<std::size_t>(std::llround(cfg.mae.unmasked_fraction * static_cast<double>(cfg.mae.iterations)));
  auto log = optimize(mae->params(), cfg.mae.iterations, cfg.mae.lr, "mae", [&](std::size_t it) {
    const auto w = gather_windows(train.states, draw(rng, cfg.mae.batch, 0, T - k - 1), k + 1);
    return models::mae_loss(*mae, w, weights, it >= unmasked);
  });
  return {mae, std::move(log)};
}

inline Trained<models::FrameAe<float>> train_frame_ae(const Prepared& train, std::span<const double> lat,
                                                      std::span<const grid::VariableSpec> specs, const RunConfig& cfg,
                                                      std::uint64_t seed) {
  auto ae = std::make_shared<models::FrameAe<float>>(frame_ae_config(cfg), derive_seed(seed, "fae.init"));
  const auto weights = models::loss_weights<float>(specs, lat);
  std::mt19937_64 rng(derive_seed(seed, "fae.batches"));
  const std::size_t T = train.states.dim(0);
  auto log = optimize(ae->params(), cfg.mae.iterations, cfg.mae.lr, "frame-ae", [&](std::size_t) {
    return models::frame_ae_loss(*ae, gather(train.states, draw(rng, cfg.mae.batch * 2, 0, T - 1)), weights);
  });
  return {ae, std::move(log)};
}

// ---------------------------------------------------------------- system

/// A trained model set plus the statistics needed to run it.
struct System {
  RunConfig cfg;
  std::vector<grid::VariableSpec> state_stats;
  std::vector<grid::VariableSpec> residual_stats;
  std::vector<double> lat;
  std::shared_ptr<models::Vae<float>> vae;
  std::shared_ptr<models::Mae<float>> mae;
  std::shared_ptr<models::FrameAe<float>> fae;
  std::shared_ptr<edm::Denoiser<float>> den;
  double sigma_data = 0.5;
  double cond_scale = 1.0;

  std::size_t k() const { return cfg.mae.k; }
  std::size_t frames() const { return 1 + cfg.mae.k / 2; }

  Shape latent_shape() const {
    return {cfg.vae.latent, cfg.data.height / models::Vae<float>::kFactor, cfg.data.width / models::Vae<float>::kFactor};
  }

  /// Standardized windows (B, V, k+1, H, W), last frame the (masked) target → z̄ (B, C, F, h, w).
  Tensor<float> condition(const Tensor<float>& windows) const {
    ad::NoGradGuard guard;
    const std::size_t B = windows.dim(0);
    const auto ls = latent_shape();
    Tensor<float> z;
    const auto& kind = cfg.mae.conditioning;
    if (kind == "3d-mae") {
      if (!mae) throw StateError("3d-mae conditioning needs a trained 3D-MAE");
      z = mae->encode(Var<float>::constant(windows), true).value();
    } else if (kind == "2d-cond") {
      if (!fae) throw StateError("2d-cond conditioning needs a trained frame autoencoder");
      const std::size_t first = k() - frames();
      z = fae->encode_frames(ad::slice(Var<float>::constant(windows), 2, first, k())).value();
    } else {
      return Tensor<float>({B, ls[0], frames(), ls[1], ls[2]});
    }
    const float s = static_cast<float>(1.0 / cond_scale);
    for (auto& v : z.values()) v *= s;
    return z;
  }

  /// Posterior means of standardized fields (B, V, H, W), in chunks.
  Tensor<float> encode(const Tensor<float>& x) const {
    ad::NoGradGuard guard;
    const std::size_t N = x.dim(0), chunk = 16;
    const auto ls = latent_shape();
    Tensor<float> out({N, ls[0], ls[1], ls[2]});
    const std::size_t row = out.size() / N;
    for (std::size_t b = 0; b < N; b += chunk) {
      std::vector<std::size_t> idx;
      for (std::size_t i = b; i < std::min(N, b + chunk); ++i) idx.push_back(i);
      const auto mu = vae->encode(Var<float>::constant(gather(x, idx))).mu.value();
      std::copy_n(mu.data(), mu.size(), out.data() + b * row);
    }
    return out;
  }

  Tensor<float> decode(const Tensor<float>& z) const {
    ad::NoGradGuard guard;
    return vae->decode(Var<float>::constant(z)).value();
  }

  forecast::ForecastModel forecast_model() const {
    forecast::ForecastModel m;
    m.k = k();
    m.latent = latent_shape();
    m.state_stats = state_stats;
    m.residual_stats = residual_stats;
    m.condition = [this](const Tensor<float>& w) { return condition(w); };
    const bool state_prev = cfg.diffusion.previous == "state";
    m.previous = [this, state_prev](const Tensor<float>& residual, const Tensor<float>& state) {
      return encode(state_prev ? state : residual);
    };
    m.decode = [this](const Tensor<float>& z) { return decode(z); };
    m.denoise = [this](const Tensor<double>& x, double sigma, const Tensor<float>& z_bar, const Tensor<float>& z_prev) {
      ad::NoGradGuard guard;
      const auto d = den->denoise(Var<float>::constant(x.cast<float>()), Var<float>::constant(z_bar),
                                  Var<float>::constant(z_prev), std::vector<double>(x.dim(0), sigma), sigma_data);
      return d.value().cast<double>();
    };
    m.sample_is_previous = !state_prev;
    return m;
  }

  edm::EdmConfig edm() const {
    auto e = cfg.edm();
    e.sigma_data = sigma_data;
    return e;
  }

  void save(const fs::path& dir) const {
    fs::create_directories(dir);
    if (vae) vae->params().save(dir / "vae.pypt");
    if (mae) mae->params().save(dir / "mae.pypt");
    if (fae) fae->params().save(dir / "frame_ae.pypt");
    if (den) den->params().save(dir / "denoiser.pypt");
    std::ofstream(dir / "meta.json") << json{{"sigma_data", sigma_data},
                                             {"cond_scale", cond_scale},
                                             {"conditioning", cfg.mae.conditioning},
                                             {"strategy", cfg.vae.strategy},
                                             {"config_hash", config::hash_hex(cfg)}}
                                            .dump(2)
                                     << '\n';
  }
};

inline System make_system(const RunConfig& cfg, const Dataset& ds) {
  System s;
  s.cfg = cfg;
  s.state_stats = ds.state_stats;
  s.residual_stats = ds.residual_stats;
  s.lat = ds.train.lat;
  return s;
}

inline json read_meta(const fs::path& dir) {
  const auto p = dir / "meta.json";
  if (!fs::exists(p)) return json::object();
  std::ifstream in(p);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(std::string("meta.json: ") + e.what(), 0);
  }
}

inline void write_meta(const fs::path& dir, const json& patch) {
  auto j = read_meta(dir);
  j.update(patch);
  std::ofstream(dir / "meta.json") << j.dump(2) << '\n';
}

/// Loads the checkpoints a stage needs; missing files are reported with their expected path.
inline System load_system(const RunConfig& cfg, const Dataset& ds, const fs::path& dir, bool need_cond, bool need_den) {
  System s = make_system(cfg, ds);
  s.vae = std::make_shared<models::Vae<float>>(vae_config(cfg), 0);
  s.vae->params().load(dir / "vae.pypt");
  if (need_cond && cfg.mae.conditioning == "3d-mae") {
    s.mae = std::make_shared<models::Mae<float>>(mae_config(cfg), 0);
    s.mae->params().load(dir / "mae.pypt");
  } else if (need_cond && cfg.mae.conditioning == "2d-cond") {
    s.fae = std::make_shared<models::FrameAe<float>>(frame_ae_config(cfg), 0);
    s.fae->params().load(dir / "frame_ae.pypt");
  }
  if (need_den) {
    s.den = std::make_shared<edm::Denoiser<float>>(denoiser_config(cfg), 0);
    s.den->params().load(dir / "denoiser.pypt");
  }
  const auto meta = read_meta(dir);
  s.sigma_data = meta.value("sigma_data", cfg.diffusion.sigma_data);
  s.cond_scale = meta.value("cond_scale", 1.0);
  return s;
}

// ---------------------------------------------------------------- diffusion data

/// Training tuples for current times t: target E(X_{t+1} − X_t), z̄ from the window ending at t+1, z_prev.
struct LatentSet {
  std::vector<std::size_t> times;
  Tensor<float> z;
  Tensor<float> z_bar;
  Tensor<float> z_prev;
};

inline std::vector<std::size_t> valid_times(std::size_t T, std::size_t k) {
  std::vector<std::size_t> t;
  for (std::size_t i = std::max<std::size_t>(k - 1, 1); i + 2 <= T; ++i) t.push_back(i);
  return t;
}

inline LatentSet latent_set(const System& s, const Prepared& p, std::vector<std::size_t> times = {}) {
  const std::size_t k = s.k();
  if (times.empty()) times = valid_times(p.states.dim(0), k);
  LatentSet out;
  out.times = times;
  const auto res_lat = s.encode(p.residuals);
  std::vector<std::size_t> cur(times), prev;
  for (auto t : times) prev.push_back(t - 1);
  out.z = gather(res_lat, cur);
  out.z_prev = s.cfg.diffusion.previous == "state" ? s.encode(gather(p.states, cur)) : gather(res_lat, prev);
  std::vector<std::size_t> starts;
  for (auto t : times) starts.push_back(t + 1 - k);
  const std::size_t chunk = 8;
  std::vector<Tensor<float>> parts;
  for (std::size_t b = 0; b < starts.size(); b += chunk) {
    const std::vector<std::size_t> sub(starts.begin() + b, starts.begin() + std::min(starts.size(), b + chunk));
    parts.push_back(s.condition(gather_windows(p.states, sub, k + 1)));
  }
  Shape zs = parts.front().shape();
  zs[0] = times.size();
  out.z_bar = Tensor<float>(zs);
  std::size_t off = 0;
  for (const auto& part : parts) {
    std::copy_n(part.data(), part.size(), out.z_bar.data() + off);
    off += part.size();
  }
  return out;
}

inline double tensor_std(const Tensor<float>& x) {
  double m = 0.0, q = 0.0;
  for (float v : x.values()) m += v;
  m /= static_cast<double>(x.size());
  for (float v : x.values()) q += (v - m) * (v - m);
  return std::sqrt(q / static_cast<double>(x.size()));
}

/// Fixes z̄ scaling and σ_data from the training latents, then trains the denoiser.
inline TrainLog train_diffusion(System& s, const Prepared& train, std::uint64_t seed) {
  const auto& cfg = s.cfg;
  s.cond_scale = 1.0;
  auto data = latent_set(s, train);
  if (cfg.mae.conditioning != "none") {
    const double sd = tensor_std(data.z_bar);
    s.cond_scale = sd > 1e-8 ? sd : 1.0;
    for (auto& v : data.z_bar.values()) v = static_cast<float>(v / s.cond_scale);
  }
  s.sigma_data = cfg.diffusion.sigma_data_auto ? edm::estimate_sigma_data(data.z) : cfg.diffusion.sigma_data;
  s.den = std::make_shared<edm::Denoiser<float>>(denoiser_config(cfg), derive_seed(seed, "den.init"));
  auto e = s.edm();
  std::mt19937_64 rng(derive_seed(seed, "den.batches"));
  const std::size_t n = data.times.size();
  return optimize(s.den->params(), cfg.diffusion.iterations, cfg.diffusion.lr, "diffusion", [&](std::size_t) {
    const auto idx = draw(rng, cfg.diffusion.batch, 0, n - 1);
    return edm::diffusion_loss(*s.den, gather(data.z, idx), gather(data.z_bar, idx), gather(data.z_prev, idx), rng, e);
  });
}

// ---------------------------------------------------------------- evaluation

struct CaseForecast {
  std::size_t t0 = 0;  // index in the test split of the last initial state
  forecast::EnsembleForecast ensemble;
};

inline std::vector<std::size_t> case_starts(const RunConfig& cfg, std::size_t test_times) {
  std::vector<std::size_t> t0;
  for (std::size_t c = 0; c < cfg.forecast.cases; ++c) {
    const std::size_t t = cfg.mae.k + c * cfg.forecast.case_stride;
    if (t + cfg.forecast.leads >= test_times) throw ConfigError("forecast cases run past the end of the test split");
    t0.push_back(t);
  }
  return t0;
}

inline forecast::RolloutConfig rollout_config(const System& s, std::uint64_t seed, bool stochastic) {
  forecast::RolloutConfig r;
  r.members = s.cfg.forecast.members;
  r.leads = s.cfg.forecast.leads;
  r.seed = seed;
  r.workers = s.cfg.forecast.workers;
  r.stochastic = stochastic;
  r.sampler = s.edm();
  return r;
}

inline std::vector<CaseForecast> run_forecasts(const System& s, const grid::FieldBatch& test, std::uint64_t seed,
                                               bool stochastic) {
  const auto model = s.forecast_model();
  std::vector<CaseForecast> out;
  for (std::size_t t0 : case_starts(s.cfg, test.times())) {
    auto r = rollout_config(s, derive_seed(seed, "forecast.case" + std::to_string(t0)), stochastic);
    out.push_back({t0, forecast::rollout(model, test.slice_time(t0 - s.k(), t0 + 1), r)});
  }
  return out;
}

/// Repeats the last initial state at every lead.
inline std::vector<CaseForecast> persistence_forecasts(const RunConfig& cfg, const grid::FieldBatch& test) {
  std::vector<CaseForecast> out;
  for (std::size_t t0 : case_starts(cfg, test.times())) {
    forecast::EnsembleForecast e;
    e.members = cfg.forecast.members;
    e.leads = cfg.forecast.leads;
    for (std::size_t m = 0; m < e.members; ++m) {
      e.seeds.push_back(0);
      Tensor<float> traj({e.leads, test.variables(), test.height(), test.width()});
      for (std::size_t l = 0; l < e.leads; ++l) std::copy(test.frame(t0).begin(), test.frame(t0).end(), traj.data() + l * test.frame_size());
      e.data.push_back(std::move(traj));
    }
    out.push_back({t0, std::move(e)});
  }
  return out;
}

struct LeadMetrics {
  std::size_t lead = 0;
  std::vector<double> rmse, crps_fair, crps_empirical, ssr;  // per variable, physical units
  double rmse_std = 0.0;                                     // pooled over variables, standardized units
  double crps_std = 0.0;
  double ssr_std = 0.0;
};

struct MetricReport {
  std::vector<std::string> variables;
  std::vector<LeadMetrics> leads;
  verify::RankHistogram rank;  // first lead, standardized, all variables
};

/// Scores case forecasts against the test split.
inline MetricReport score(const std::vector<CaseForecast>& cases, const grid::FieldBatch& test,
                          const std::vector<grid::VariableSpec>& state_stats, const config::VerifySection& vcfg,
                          std::size_t max_leads = 0) {
  if (cases.empty()) throw DomainError("no forecasts to score");
  MetricReport rep;
  for (const auto& s : test.specs) rep.variables.push_back(s.name);
  const std::size_t V = test.variables(), H = test.height(), W = test.width(), P = H * W;
  const auto lw = grid::lat_weights(test.lat).w;
  const auto plane_w = verify::field_weights(lw, 1, W);
  const auto field_w = verify::field_weights(lw, V, W);
  const std::size_t M = cases.front().ensemble.members;
  std::size_t L = cases.front().ensemble.leads;
  if (max_leads) L = std::min(L, max_leads);

  for (std::size_t l = 0; l < L; ++l) {
    LeadMetrics lm;
    lm.lead = l + 1;
    // standardized copies for pooled metrics
    std::vector<std::vector<float>> std_store;
    std::vector<verify::Case> pooled;
    std_store.reserve(cases.size() * (M + 1));
    for (const auto& c : cases) {
      const auto truth = test.frame(c.t0 + l + 1);
      auto standardize = [&](std::span<const float> x) {
        std::vector<float> y(x.size());
        for (std::size_t v = 0; v < V; ++v)
          for (std::size_t i = 0; i < P; ++i)
            y[v * P + i] = static_cast<float>((x[v * P + i] - state_stats[v].mean) / state_stats[v].std);
        std_store.push_back(std::move(y));
        return std::span<const float>(std_store.back());
      };
      verify::Case pc;
      for (std::size_t m = 0; m < M; ++m) pc.members.push_back(standardize(c.ensemble.at(m, l)));
      pc.truth = standardize(truth);
      pooled.push_back(pc);
    }
    lm.rmse_std = verify::rmse_ensemble_mean(pooled, field_w);
    double crps = 0.0;
    for (const auto& pc : pooled) crps += verify::crps_field(pc, field_w, M >= 2) / static_cast<double>(pooled.size());
    lm.crps_std = crps;
    lm.ssr_std = M >= 2 && lm.rmse_std > 0.0 ? verify::spread_skill_ratio(pooled, field_w, vcfg.ssr_correction)
                                             : std::numeric_limits<double>::quiet_NaN();
    if (l == 0) rep.rank = verify::rank_histogram(pooled, vcfg.rank_seed, vcfg.rank_stride);

    for (std::size_t v = 0; v < V; ++v) {
      std::vector<verify::Case> per;
      for (const auto& c : cases) {
        verify::Case pc;
        for (std::size_t m = 0; m < M; ++m) pc.members.push_back(c.ensemble.at(m, l).subspan(v * P, P));
        pc.truth = test.frame(c.t0 + l + 1).subspan(v * P, P);
        per.push_back(pc);
      }
      const double r = verify::rmse_ensemble_mean(per, plane_w);
      lm.rmse.push_back(r);
      double cf = 0.0, ce = 0.0;
      for (const auto& pc : per) {
        if (M >= 2) cf += verify::crps_field(pc, plane_w, true) / static_cast<double>(per.size());
        ce += verify::crps_field(pc, plane_w, false) / static_cast<double>(per.size());
      }
      lm.crps_fair.push_back(M >= 2 ? cf : std::numeric_limits<double>::quiet_NaN());
      lm.crps_empirical.push_back(ce);
      lm.ssr.push_back(M >= 2 && r > 0.0 ? verify::spread_skill_ratio(per, plane_w, vcfg.ssr_correction)
                                         : std::numeric_limits<double>::quiet_NaN());
    }
    rep.leads.push_back(std::move(lm));
  }
  return rep;
}

inline void write_report(const MetricReport& rep, const fs::path& dir, double lead_hours = 6.0) {
  fs::create_directories(dir);
  std::ofstream csv(dir / "metrics.csv");
  csv.precision(10);
  csv << "variable,lead_hours,metric,value\n";
  json j = json::array();
  for (const auto& lm : rep.leads) {
    const double h = lead_hours * static_cast<double>(lm.lead);
    for (std::size_t v = 0; v < rep.variables.size(); ++v) {
      const std::pair<const char*, double> rows[] = {{"rmse_mean", lm.rmse[v]},
                                                     {"crps_fair", lm.crps_fair[v]},
                                                     {"crps_empirical", lm.crps_empirical[v]},
                                                     {"ssr", lm.ssr[v]}};
      for (const auto& [name, val] : rows) {
        csv << rep.variables[v] << ',' << h << ',' << name << ',' << val << '\n';
        j.push_back({{"variable", rep.variables[v]}, {"lead_hours", h}, {"metric", name}, {"value", std::isfinite(val) ? json(val) : json()}});
      }
    }
    for (const auto& [name, val] : {std::pair<const char*, double>{"rmse_mean", lm.rmse_std}, {"crps_fair", lm.crps_std}, {"ssr", lm.ssr_std}}) {
      csv << "all_standardized," << h << ',' << name << ',' << val << '\n';
      j.push_back({{"variable", "all_standardized"}, {"lead_hours", h}, {"metric", name}, {"value", std::isfinite(val) ? json(val) : json()}});
    }
  }
  std::ofstream(dir / "metrics.json") << j.dump(2) << '\n';
  std::ofstream rh(dir / "rank_histogram.csv");
  rh << "rank,count\n";
  for (std::size_t i = 0; i < rep.rank.counts.size(); ++i) rh << i << ',' << rep.rank.counts[i] << '\n';
  rh << "# chi_square," << rep.rank.chi_square << "\n# p_value," << rep.rank.p_value << '\n';
}

// ---------------------------------------------------------------- diagnostics

/// Encoder latents of true residuals next to sampled latents for the same test times.
struct LatentPair {
  Tensor<float> encoder;
  Tensor<float> generated;
  std::vector<std::size_t> times;
};

inline LatentPair sample_latents(const System& s, const Prepared& test, std::size_t count, std::uint64_t seed,
                                 bool stochastic = false) {
  auto times = valid_times(test.states.dim(0), s.k());
  if (times.size() > count) times.resize(count);
  const auto set = latent_set(s, test, times);
  LatentPair out{set.z, Tensor<float>(set.z.shape()), times};
  const std::size_t row = set.z.size() / times.size();
  const auto e = s.edm();
  forecast::parallel_for(times.size(), s.cfg.forecast.workers, [&](std::size_t i) {
    const auto zb = gather(set.z_bar, {i}), zp = gather(set.z_prev, {i});
    const auto fn = s.den->callback(zb, zp, s.sigma_data);
    std::mt19937_64 rng(derive_seed(seed, "diagnose." + std::to_string(i)));
    Shape sh = set.z.shape();
    sh[0] = 1;
    const auto z = edm::sample(fn, sh, rng, e, stochastic).cast<float>();
    std::copy_n(z.data(), row, out.generated.data() + i * row);
  });
  return out;
}

inline verify::DiffusabilityReport diagnose(const System& s, const Prepared& test, std::size_t count, std::uint64_t seed) {
  const auto pair = sample_latents(s, test, count, seed);
  const auto truth = gather(test.residuals, pair.times);
  const auto lw = grid::lat_weights(s.lat).w;
  const auto w = verify::field_weights(lw, s.cfg.data.variables, s.cfg.data.width);
  const std::function<double(const Tensor<float>&)> probe = [&](const Tensor<float>& z) {
    const auto x = s.decode(z);
    const std::size_t F = x.size() / x.dim(0);
    double se = 0.0, tw = 0.0;
    for (std::size_t n = 0; n < x.dim(0); ++n)
      for (std::size_t i = 0; i < F; ++i) {
        const double d = x[n * F + i] - truth[n * F + i];
        se += w[i] * d * d;
        tw += w[i];
      }
    return std::sqrt(se / tw);
  };
  return verify::diffusability_report(pair.encoder, pair.generated, s.cfg.verify.bands, s.cfg.verify.mask_radii, probe);
}

// ---------------------------------------------------------------- ablation

struct CellResult {
  std::string conditioning;
  std::string strategy;
  std::uint64_t seed = 0;
  double rmse = 0.0;  // first lead, standardized, pooled
  double crps = 0.0;
  double ssr = 0.0;
};

struct Cell {
  std::string conditioning;
  std::string strategy;
};

/// Trains and scores the listed cells for each seed. VAEs are shared across conditionings
/// and conditioning encoders across strategies within a seed; denoiser init, batches and
/// forecast noise depend on the seed only. `inspect` sees each trained system before it is dropped.
inline std::vector<CellResult> ablate_cells(const RunConfig& base, const Dataset& ds, const std::vector<Cell>& cells,
                                            const std::vector<std::uint64_t>& seeds,
                                            const std::function<void(const CellResult&)>& on_cell = {},
                                            const std::function<void(const System&, const CellResult&)>& inspect = {}) {
  const auto train = prepare(ds.train, ds);
  std::vector<CellResult> out;
  for (auto seed : seeds) {
    std::map<std::string, std::shared_ptr<models::Vae<float>>> vaes;
    std::shared_ptr<models::Mae<float>> mae;
    std::shared_ptr<models::FrameAe<float>> fae;
    for (const auto& cell : cells) {
      if (vaes.count(cell.strategy)) continue;
      RunConfig c = base;
      c.vae.strategy = cell.strategy;
      vaes[cell.strategy] = train_vae(train, ds.train.lat, ds.train.specs, c, seed).model;
      log::info("ablate seed " + std::to_string(seed) + ": vae " + cell.strategy + " trained");
    }
    for (const auto& cell : cells) {
      if (cell.conditioning == "3d-mae" && !mae) mae = train_mae(train, ds.train.lat, ds.train.specs, base, seed).model;
      if (cell.conditioning == "2d-cond" && !fae) fae = train_frame_ae(train, ds.train.lat, ds.train.specs, base, seed).model;
      RunConfig c = base;
      c.vae.strategy = cell.strategy;
      c.mae.conditioning = cell.conditioning;
      c.forecast.leads = 1;
      System s = make_system(c, ds);
      s.vae = vaes[cell.strategy];
      s.mae = mae;
      s.fae = fae;
      train_diffusion(s, train, seed);
      const auto rep = score(run_forecasts(s, ds.test, seed, false), ds.test, ds.state_stats, c.verify, 1);
      CellResult r{cell.conditioning, cell.strategy, seed, rep.leads[0].rmse_std, rep.leads[0].crps_std, rep.leads[0].ssr_std};
      log::info("ablate seed " + std::to_string(seed) + " " + cell.conditioning + "/" + cell.strategy + " rmse " +
                std::to_string(r.rmse));
      if (on_cell) on_cell(r);
      if (inspect) inspect(s, r);
      out.push_back(r);
    }
  }
  return out;
}

/// Full grid of conditionings × strategies.
inline std::vector<CellResult> ablate(const RunConfig& base, const Dataset& ds, const std::vector<std::string>& conds,
                                      const std::vector<std::string>& strategies, const std::vector<std::uint64_t>& seeds,
                                      const std::function<void(const CellResult&)>& on_cell = {}) {
  std::vector<Cell> cells;
  for (const auto& c : conds)
    for (const auto& s : strategies) cells.push_back({c, s});
  return ablate_cells(base, ds, cells, seeds, on_cell);
}

inline void write_ablation_csv(const std::vector<CellResult>& cells, const fs::path& path) {
  std::ofstream out(path);
  out.precision(10);
  out << "conditioning,strategy,seed,rmse_first_lead,crps_first_lead,ssr_first_lead\n";
  for (const auto& c : cells)
    out << c.conditioning << ',' << c.strategy << ',' << c.seed << ',' << c.rmse << ',' << c.crps << ',' << c.ssr << '\n';
}

}  // namespace nimbus::pipeline
