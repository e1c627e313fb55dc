#pragma once

// Run configuration: one JSON document with fixed sections. Every field has a
// default, unknown keys are rejected, and the hash is taken over the canonical
// (key-sorted) dump so it does not depend on key order in the source file.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nimbus/edm.hpp"
#include "nimbus/error.hpp"
#include "nimbus/regularize.hpp"

namespace nimbus::config {

using json = nlohmann::json;

struct DataSection {
  std::uint64_t seed = 0;
  std::size_t height = 64;
  std::size_t width = 128;
  std::size_t variables = 8;
  std::size_t train_times = 160;
  std::size_t test_times = 64;
  double forcing = 0.1;
  std::vector<double> slopes;  // empty → defaults spanning [1.0, 3.5]

  template <class F>
  void fields(F&& f) {
    f("seed", seed), f("height", height), f("width", width), f("variables", variables);
    f("train_times", train_times), f("test_times", test_times), f("forcing", forcing), f("slopes", slopes);
  }
};

struct VaeSection {
  std::string strategy = "vamfm";
  std::size_t hidden = 16;
  std::size_t wide = 32;
  std::size_t latent = 16;
  double beta = 1e-5;
  double logvar_init = -4.0;
  std::size_t se_factor = 2;
  /// "uniform" draws γ from the schedule each iteration; "fixed" always uses `gamma`.
  std::string gamma_mode = "uniform";
  double gamma = 1.0;
  /// Cutoffs from each sample's own spectrum instead of dataset-level spectra.
  bool per_sample_cutoffs = true;
  std::size_t iterations = 160;
  std::size_t batch = 8;
  double lr = 2e-3;

  template <class F>
  void fields(F&& f) {
    f("strategy", strategy), f("hidden", hidden), f("wide", wide), f("latent", latent), f("beta", beta);
    f("logvar_init", logvar_init), f("se_factor", se_factor), f("gamma_mode", gamma_mode), f("gamma", gamma);
    f("per_sample_cutoffs", per_sample_cutoffs), f("iterations", iterations), f("batch", batch), f("lr", lr);
  }
};

struct MaeSection {
  /// Conditioning encoder: "3d-mae", "2d-cond" or "none".
  std::string conditioning = "3d-mae";
  std::size_t k = 4;
  std::size_t hidden = 16;
  std::size_t latent = 16;
  std::size_t decoder = 32;
  std::size_t iterations = 160;
  std::size_t batch = 4;
  double lr = 2e-3;
  /// Leading share of iterations trained without masking the final frame.
  double unmasked_fraction = 0.25;

  template <class F>
  void fields(F&& f) {
    f("conditioning", conditioning), f("k", k), f("hidden", hidden), f("latent", latent), f("decoder", decoder);
    f("iterations", iterations), f("batch", batch), f("lr", lr), f("unmasked_fraction", unmasked_fraction);
  }
};

struct DiffusionSection {
  std::size_t width = 32;
  std::size_t blocks = 4;
  std::size_t fourier = 8;
  std::size_t iterations = 400;
  std::size_t batch = 8;
  double lr = 2e-3;
  double sigma_data = 0.5;
  bool sigma_data_auto = true;
  double p_mean = -1.2;
  double p_std = 1.2;
  /// z_t in the condition: "residual" (E(X_t − X_{t−1})) or "state" (E applied to the standardized state).
  std::string previous = "residual";

  template <class F>
  void fields(F&& f) {
    f("width", width), f("blocks", blocks), f("fourier", fourier), f("iterations", iterations), f("batch", batch);
    f("lr", lr), f("sigma_data", sigma_data), f("sigma_data_auto", sigma_data_auto), f("p_mean", p_mean);
    f("p_std", p_std), f("previous", previous);
  }
};

struct SamplerSection {
  std::size_t steps = 25;
  double s_churn = 2.5;
  double s_min = 0.75;
  double s_max = 68.0;
  double s_noise = 1.1;
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double rho = 7.0;
  bool stochastic = false;

  template <class F>
  void fields(F&& f) {
    f("steps", steps), f("s_churn", s_churn), f("s_min", s_min), f("s_max", s_max), f("s_noise", s_noise);
    f("sigma_min", sigma_min), f("sigma_max", sigma_max), f("rho", rho), f("stochastic", stochastic);
  }
};

struct ForecastSection {
  std::size_t members = 8;
  std::size_t leads = 20;
  std::size_t cases = 8;
  std::size_t case_stride = 4;
  std::size_t workers = 1;

  template <class F>
  void fields(F&& f) {
    f("members", members), f("leads", leads), f("cases", cases), f("case_stride", case_stride), f("workers", workers);
  }
};

struct VerifySection {
  bool ssr_correction = true;
  std::uint64_t rank_seed = 0;
  std::size_t rank_stride = 7;
  std::vector<double> bands = {0.0, 0.2, 0.4, 0.6, 0.8, 1.4142135623730951};
  std::vector<double> mask_radii = {0.25, 0.5, 0.75, 1.0, 1.4142135623730951};
  std::size_t diagnose_samples = 64;

  template <class F>
  void fields(F&& f) {
    f("ssr_correction", ssr_correction), f("rank_seed", rank_seed), f("rank_stride", rank_stride), f("bands", bands);
    f("mask_radii", mask_radii), f("diagnose_samples", diagnose_samples);
  }
};

struct RunConfig {
  DataSection data;
  VaeSection vae;
  MaeSection mae;
  DiffusionSection diffusion;
  SamplerSection sampler;
  ForecastSection forecast;
  VerifySection verify;

  template <class F>
  void sections(F&& f) {
    f("data", data), f("vae", vae), f("mae", mae), f("diffusion", diffusion), f("sampler", sampler);
    f("forecast", forecast), f("verify", verify);
  }

  void validate() const;

  edm::EdmConfig edm() const {
    edm::EdmConfig c;
    c.sigma_data = diffusion.sigma_data;
    c.sigma_data_auto = diffusion.sigma_data_auto;
    c.p_mean = diffusion.p_mean;
    c.p_std = diffusion.p_std;
    c.sigma_min = sampler.sigma_min;
    c.sigma_max = sampler.sigma_max;
    c.rho = sampler.rho;
    c.steps = sampler.steps;
    c.churn = {sampler.s_churn, sampler.s_min, sampler.s_max, sampler.s_noise};
    return c;
  }
};

namespace detail {

class Reader {
 public:
  Reader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError("section '" + section_ + "' must be an object");
  }
  template <class T>
  void operator()(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(section_ + "." + key + ": " + e.what());
    }
  }
  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ConfigError("unknown key '" + section_ + "." + item.key() + "'");
  }

 private:
  const json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

struct Writer {
  json& j;
  template <class T>
  void operator()(const char* key, const T& v) {
    j[key] = v;
  }
};

}  // namespace detail

inline RunConfig from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config root must be an object");
  RunConfig cfg;
  std::set<std::string> known;
  cfg.sections([&](const char* name, auto& section) {
    known.insert(name);
    if (!j.contains(name)) return;
    detail::Reader r(j.at(name), name);
    section.fields(r);
    r.finish();
  });
  for (const auto& item : j.items())
    if (!known.count(item.key())) throw ConfigError("unknown config section '" + item.key() + "'");
  cfg.validate();
  return cfg;
}

inline json to_json(RunConfig cfg) {
  json j = json::object();
  cfg.sections([&](const char* name, auto& section) {
    json s = json::object();
    detail::Writer w{s};
    section.fields(w);
    j[name] = s;
  });
  return j;
}

inline RunConfig parse(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return from_json(j);
}

inline RunConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

/// FNV-1a 64 over the canonical dump.
inline std::uint64_t hash(const RunConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : to_json(cfg).dump()) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hash_hex(const RunConfig& cfg) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << hash(cfg);
  return os.str();
}

inline void RunConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw ConfigError(std::string(what) + " must be >= 1");
  };
  if (data.height % 4 || data.width % 4 || data.height < 8 || data.width < 8)
    throw ConfigError("data.height and data.width must be multiples of 4 and >= 8");
  positive(data.variables, "data.variables");
  if (!data.slopes.empty() && data.slopes.size() != data.variables)
    throw ConfigError("data.slopes must list one slope per variable");
  if (!(data.forcing >= 0.0 && data.forcing <= 1.0)) throw ConfigError("data.forcing must lie in [0, 1]");

  regularize::parse_strategy(vae.strategy);
  if (!(vae.beta >= 0.0)) throw ConfigError("vae.beta must be >= 0");
  if (vae.gamma_mode != "uniform" && vae.gamma_mode != "fixed") throw ConfigError("vae.gamma_mode must be uniform|fixed");
  try {
    regularize::gamma_index(vae.gamma);
  } catch (const DomainError& e) {
    throw ConfigError(std::string("vae.gamma: ") + e.what());
  }
  if (vae.se_factor != 2 && vae.se_factor != 4) throw ConfigError("vae.se_factor must be 2 or 4");
  positive(vae.batch, "vae.batch");
  positive(vae.latent, "vae.latent");
  positive(vae.hidden, "vae.hidden");
  positive(vae.wide, "vae.wide");
  if (vae.hidden % vae.wide && vae.wide % vae.hidden) throw ConfigError("vae.hidden and vae.wide must divide one another");

  if (mae.conditioning != "3d-mae" && mae.conditioning != "2d-cond" && mae.conditioning != "none")
    throw ConfigError("mae.conditioning must be 3d-mae|2d-cond|none");
  if (mae.k < 2 || mae.k % 2) throw ConfigError("mae.k must be even and >= 2");
  if (mae.latent != vae.latent) throw ConfigError("mae.latent must equal vae.latent");
  positive(mae.batch, "mae.batch");
  if (!(mae.unmasked_fraction >= 0.0 && mae.unmasked_fraction <= 1.0))
    throw ConfigError("mae.unmasked_fraction must lie in [0, 1]");

  positive(diffusion.batch, "diffusion.batch");
  positive(diffusion.blocks, "diffusion.blocks");
  if (diffusion.previous != "residual" && diffusion.previous != "state")
    throw ConfigError("diffusion.previous must be residual|state");
  edm().validate();

  positive(forecast.members, "forecast.members");
  positive(forecast.leads, "forecast.leads");
  positive(forecast.cases, "forecast.cases");
  positive(forecast.case_stride, "forecast.case_stride");
  if (data.test_times < mae.k + 1 + forecast.leads + (forecast.cases - 1) * forecast.case_stride)
    throw ConfigError("data.test_times too short for forecast.cases × leads with a k+1 window");
  if (verify.bands.size() < 2) throw ConfigError("verify.bands needs at least two edges");
}

}  // namespace nimbus::config
