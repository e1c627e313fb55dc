#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "nimbus/config.hpp"
#include "nimbus/error.hpp"
#include "nimbus/io.hpp"
#include "nimbus/log.hpp"
#include "nimbus/pipeline.hpp"
#include "nimbus/regularize.hpp"
#include "nimbus/spectral.hpp"
#include "nimbus/svg.hpp"

namespace fs = std::filesystem;
namespace pl = nimbus::pipeline;
using json = nlohmann::json;
using nimbus::config::RunConfig;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Options {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out = "nimbus_run";
  std::size_t workers = 0;
  bool dry_run = false;
  // subcommand extras
  bool persistence = false;
  std::vector<std::string> conditionings = {"none", "2d-cond", "3d-mae"};
  std::vector<std::string> strategies = {"none", "se", "ffm", "vamfm"};
  std::size_t replicates = 3;
};

RunConfig load_config(const Options& o) {
  RunConfig cfg = o.config.empty() ? nimbus::config::from_json(json::object()) : nimbus::config::load(o.config);
  if (o.workers) cfg.forecast.workers = o.workers;
  return cfg;
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_manifest(const fs::path& dir, const std::string& command, const RunConfig& cfg, std::uint64_t seed,
                    json extra = json::object()) {
  fs::create_directories(dir);
  json m = {{"command", command},         {"config_hash", nimbus::config::hash_hex(cfg)},
            {"seed", seed},               {"version", std::string("nimbus ") + kVersion},
            {"created_utc", utc_now()}};
  m.update(extra);
  std::ofstream(dir / "manifest.json") << m.dump(2) << '\n';
  std::ofstream(dir / "config.json") << nimbus::config::to_json(cfg).dump(2) << '\n';
}

void loss_outputs(const pl::TrainLog& log, const fs::path& dir, const std::string& name) {
  fs::create_directories(dir);
  log.write_csv(dir / (name + "_loss.csv"));
  std::vector<double> x(log.loss.size());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i);
  nimbus::svg::write_line_chart(dir / (name + "_loss.svg"), name + " training loss", "iteration", "loss",
                                {{name, x, log.loss}});
}

fs::path data_dir(const Options& o) { return fs::path(o.out) / "data"; }
fs::path ckpt_dir(const Options& o) { return fs::path(o.out) / "checkpoints"; }
fs::path logs_dir(const Options& o) { return fs::path(o.out) / "logs"; }

int gen_data(const Options& o) {
  RunConfig cfg = load_config(o);
  if (o.seed_set) cfg.data.seed = o.seed;
  if (o.dry_run) return 0;
  const auto ds = pl::make_dataset(cfg.data);
  pl::save_dataset(ds, data_dir(o));

  // per-variable spectra and retained energy under both masking rules at γ = 0.5
  const auto prep = pl::prepare(ds.train, ds);
  const std::size_t V = ds.train.variables(), H = ds.train.height(), W = ds.train.width(), P = H * W;
  std::ofstream csv(data_dir(o) / "spectra.csv");
  csv << "variable,cutoff_vamfm,retained_vamfm,retained_ffm\n";
  const auto frame = pl::gather(prep.residuals, {0}).reshaped({V, H, W});
  const auto plan = nimbus::regularize::plan_vamfm(frame, 0.5);
  std::vector<std::string> labels;
  std::vector<double> kept_v, kept_f;
  for (std::size_t v = 0; v < V; ++v) {
    const std::span<const float> plane(frame.data() + v * P, P);
    const double kv = nimbus::spectral::retained_fraction(plane, H, W, plan.input_cutoffs[v]);
    const double kf = nimbus::spectral::retained_fraction(plane, H, W, nimbus::regularize::ffm_input_cutoff(0.5));
    csv << ds.train.specs[v].name << ',' << plan.input_cutoffs[v] << ',' << kv << ',' << kf << '\n';
    labels.push_back(ds.train.specs[v].name);
    kept_v.push_back(kv);
    kept_f.push_back(kf);
  }
  nimbus::svg::write_bar_chart(data_dir(o) / "retained_vamfm.svg", "retained energy, variable-aware mask (gamma 0.5)",
                               "fraction", labels, kept_v);
  nimbus::svg::write_bar_chart(data_dir(o) / "retained_ffm.svg", "retained energy, fixed mask (gamma 0.5)", "fraction", labels,
                               kept_f);
  write_manifest(data_dir(o), "gen-data", cfg, cfg.data.seed,
                 {{"train_times", cfg.data.train_times}, {"test_times", cfg.data.test_times}});
  std::cout << "wrote " << data_dir(o).string() << '\n';
  return 0;
}

int train_vae(const Options& o) {
  const RunConfig cfg = load_config(o);
  if (o.dry_run) return 0;
  const auto ds = pl::load_dataset(data_dir(o));
  const auto run = pl::train_vae(pl::prepare(ds.train, ds), ds.train.lat, ds.train.specs, cfg, o.seed);
  fs::create_directories(ckpt_dir(o));
  run.model->params().save(ckpt_dir(o) / "vae.pypt");
  loss_outputs(run.log, logs_dir(o), "vae");
  write_manifest(logs_dir(o) / "vae", "train-vae", cfg, o.seed, {{"final_loss", run.log.loss.back()}});
  std::cout << "vae final loss " << run.log.loss.back() << '\n';
  return 0;
}

int train_mae(const Options& o) {
  const RunConfig cfg = load_config(o);
  if (o.dry_run) return 0;
  if (cfg.mae.conditioning == "none") {
    std::cout << "mae.conditioning is none; nothing to train\n";
    return 0;
  }
  const auto ds = pl::load_dataset(data_dir(o));
  const auto prep = pl::prepare(ds.train, ds);
  fs::create_directories(ckpt_dir(o));
  pl::TrainLog log;
  if (cfg.mae.conditioning == "3d-mae") {
    auto run = pl::train_mae(prep, ds.train.lat, ds.train.specs, cfg, o.seed);
    run.model->params().save(ckpt_dir(o) / "mae.pypt");
    log = run.log;
  } else {
    auto run = pl::train_frame_ae(prep, ds.train.lat, ds.train.specs, cfg, o.seed);
    run.model->params().save(ckpt_dir(o) / "frame_ae.pypt");
    log = run.log;
  }
  loss_outputs(log, logs_dir(o), "mae");
  write_manifest(logs_dir(o) / "mae", "train-mae", cfg, o.seed, {{"conditioning", cfg.mae.conditioning}});
  std::cout << cfg.mae.conditioning << " final loss " << log.loss.back() << '\n';
  return 0;
}

int train_diffusion(const Options& o) {
  const RunConfig cfg = load_config(o);
  if (o.dry_run) return 0;
  const auto ds = pl::load_dataset(data_dir(o));
  auto sys = pl::load_system(cfg, ds, ckpt_dir(o), true, false);
  const auto log = pl::train_diffusion(sys, pl::prepare(ds.train, ds), o.seed);
  sys.den->params().save(ckpt_dir(o) / "denoiser.pypt");
  pl::write_meta(ckpt_dir(o), {{"sigma_data", sys.sigma_data},
                               {"cond_scale", sys.cond_scale},
                               {"conditioning", cfg.mae.conditioning},
                               {"strategy", cfg.vae.strategy},
                               {"config_hash", nimbus::config::hash_hex(cfg)}});
  loss_outputs(log, logs_dir(o), "diffusion");
  write_manifest(logs_dir(o) / "diffusion", "train-diffusion", cfg, o.seed, {{"sigma_data", sys.sigma_data}});
  std::cout << "diffusion final loss " << log.loss.back() << " (sigma_data " << sys.sigma_data << ")\n";
  return 0;
}

fs::path member_path(const fs::path& dir, std::size_t t0, std::size_t m) {
  std::ostringstream c, f;
  c << "case_" << std::setw(4) << std::setfill('0') << t0;
  f << "member_" << std::setw(3) << std::setfill('0') << m << ".pyld";
  return dir / c.str() / f.str();
}

int run_forecast(const Options& o) {
  const RunConfig cfg = load_config(o);
  if (o.dry_run) return 0;
  const auto ds = pl::load_dataset(data_dir(o));
  std::vector<pl::CaseForecast> cases;
  if (o.persistence) {
    cases = pl::persistence_forecasts(cfg, ds.test);
  } else {
    const auto sys = pl::load_system(cfg, ds, ckpt_dir(o), true, true);
    cases = pl::run_forecasts(sys, ds.test, o.seed, cfg.sampler.stochastic);
  }
  const fs::path dir = fs::path(o.out) / "forecast";
  fs::remove_all(dir);
  json jc = json::array();
  for (const auto& c : cases) {
    for (std::size_t m = 0; m < c.ensemble.members; ++m) {
      nimbus::grid::FieldBatch fb{c.ensemble.data[m], ds.test.lat, ds.test.lon, ds.test.specs};
      const auto p = member_path(dir, c.t0, m);
      fs::create_directories(p.parent_path());
      nimbus::io::write_fields(fb, p);
    }
    jc.push_back({{"t0", c.t0}, {"member_seeds", c.ensemble.seeds}});
  }
  write_manifest(dir, "forecast", cfg, o.seed,
                 {{"cases", jc},
                  {"members", cfg.forecast.members},
                  {"leads", cfg.forecast.leads},
                  {"stochastic", cfg.sampler.stochastic},
                  {"baseline", o.persistence ? "persistence" : "model"}});
  std::cout << "wrote " << cases.size() << " cases to " << dir.string() << '\n';
  return 0;
}

int evaluate(const Options& o) {
  const RunConfig cfg = load_config(o);
  if (o.dry_run) return 0;
  const auto ds = pl::load_dataset(data_dir(o));
  const fs::path fdir = fs::path(o.out) / "forecast";
  if (!fs::exists(fdir / "manifest.json")) throw nimbus::ConfigError("missing forecast: expected " + (fdir / "manifest.json").string());
  json man;
  std::ifstream(fdir / "manifest.json") >> man;
  std::vector<pl::CaseForecast> cases;
  const std::size_t members = man.at("members").get<std::size_t>(), leads = man.at("leads").get<std::size_t>();
  for (const auto& c : man.at("cases")) {
    pl::CaseForecast cf;
    cf.t0 = c.at("t0").get<std::size_t>();
    cf.ensemble.members = members;
    cf.ensemble.leads = leads;
    cf.ensemble.seeds = c.at("member_seeds").get<std::vector<std::uint64_t>>();
    for (std::size_t m = 0; m < members; ++m) {
      const auto p = member_path(fdir, cf.t0, m);
      if (!fs::exists(p)) throw nimbus::ConfigError("missing forecast member: expected " + p.string());
      cf.ensemble.data.push_back(nimbus::io::read_fields(p).data);
    }
    cases.push_back(std::move(cf));
  }
  const auto rep = pl::score(cases, ds.test, ds.state_stats, cfg.verify);
  const fs::path edir = fs::path(o.out) / "eval";
  pl::write_report(rep, edir);
  std::vector<nimbus::svg::Series> series;
  for (std::size_t v = 0; v < rep.variables.size(); ++v) {
    nimbus::svg::Series s{rep.variables[v], {}, {}};
    for (const auto& lm : rep.leads) {
      s.x.push_back(6.0 * static_cast<double>(lm.lead));
      s.y.push_back(lm.rmse[v] / ds.state_stats[v].std);
    }
    series.push_back(std::move(s));
  }
  nimbus::svg::write_line_chart(edir / "rmse.svg", "ensemble-mean RMSE (units of state std)", "lead (h)", "RMSE / std",
                                series);
  std::vector<std::string> labels;
  std::vector<double> counts;
  for (std::size_t i = 0; i < rep.rank.counts.size(); ++i) {
    labels.push_back(std::to_string(i));
    counts.push_back(static_cast<double>(rep.rank.counts[i]));
  }
  nimbus::svg::write_bar_chart(edir / "rank_histogram.svg", "rank histogram, first lead", "count", labels, counts);
  write_manifest(edir, "evaluate", cfg, o.seed, {{"first_lead_rmse_standardized", rep.leads.front().rmse_std}});
  std::cout << "first-lead RMSE (standardized) " << rep.leads.front().rmse_std << '\n';
  return 0;
}

int diagnose(const Options& o) {
  const RunConfig cfg = load_config(o);
  if (o.dry_run) return 0;
  const auto ds = pl::load_dataset(data_dir(o));
  const auto sys = pl::load_system(cfg, ds, ckpt_dir(o), true, true);
  const auto rep = pl::diagnose(sys, pl::prepare(ds.test, ds), cfg.verify.diagnose_samples, o.seed);
  const fs::path dir = fs::path(o.out) / "diagnose";
  fs::create_directories(dir);
  std::ofstream bands(dir / "band_energy.csv");
  bands << "band_lo,band_hi,encoder,generated\n";
  for (std::size_t b = 0; b < rep.encoder_bands.size(); ++b)
    bands << rep.band_edges[b] << ',' << rep.band_edges[b + 1] << ',' << rep.encoder_bands[b] << ','
          << rep.generated_bands[b] << '\n';
  std::ofstream mask(dir / "mask_rmse.csv");
  mask << "mask_radius,encoder_rmse,generated_rmse\n";
  for (std::size_t i = 0; i < rep.mask_radii.size(); ++i)
    mask << rep.mask_radii[i] << ',' << rep.encoder_rmse[i] << ',' << rep.generated_rmse[i] << '\n';
  std::vector<double> centers;
  for (std::size_t b = 0; b < rep.encoder_bands.size(); ++b) centers.push_back(0.5 * (rep.band_edges[b] + rep.band_edges[b + 1]));
  nimbus::svg::write_line_chart(dir / "band_energy.svg", "normalized latent spectral energy", "radius", "energy fraction",
                                {{"encoder", centers, rep.encoder_bands}, {"generated", centers, rep.generated_bands}});
  nimbus::svg::write_line_chart(dir / "mask_rmse.svg", "decoded RMSE after latent low-pass", "mask radius", "RMSE",
                                {{"encoder", rep.mask_radii, rep.encoder_rmse},
                                 {"generated", rep.mask_radii, rep.generated_rmse}});
  write_manifest(dir, "diagnose", cfg, o.seed, {{"samples", cfg.verify.diagnose_samples}});
  std::cout << "top-band energy encoder " << rep.encoder_bands.back() << " generated " << rep.generated_bands.back() << '\n';
  return 0;
}

int ablate(const Options& o) {
  const RunConfig cfg = load_config(o);
  for (const auto& c : o.conditionings)
    if (c != "none" && c != "2d-cond" && c != "3d-mae") throw nimbus::ConfigError("unknown conditioning '" + c + "'");
  for (const auto& s : o.strategies) nimbus::regularize::parse_strategy(s);
  if (o.replicates == 0) throw nimbus::ConfigError("--replicates must be >= 1");
  if (o.dry_run) return 0;
  const auto ds = fs::exists(data_dir(o) / "train.pyld") ? pl::load_dataset(data_dir(o)) : pl::make_dataset(cfg.data);
  std::vector<std::uint64_t> seeds;
  for (std::size_t r = 0; r < o.replicates; ++r) seeds.push_back(o.seed + r);
  const fs::path dir = fs::path(o.out) / "ablate";
  fs::create_directories(dir);
  std::vector<pl::CellResult> done;
  const auto cells = pl::ablate(cfg, ds, o.conditionings, o.strategies, seeds, [&](const pl::CellResult& r) {
    done.push_back(r);
    pl::write_ablation_csv(done, dir / "cells.csv");
    std::cout << r.seed << ' ' << r.conditioning << '/' << r.strategy << " rmse " << r.rmse << std::endl;
  });
  // mean over replicates, one row per (conditioning, strategy)
  std::ofstream table(dir / "table.csv");
  table.precision(10);
  table << "conditioning,strategy,rmse_mean,crps_mean,ssr_mean,best_in_replicates\n";
  std::vector<std::string> labels;
  std::vector<double> means;
  for (const auto& c : o.conditionings)
    for (const auto& s : o.strategies) {
      double r = 0, cr = 0, ss = 0;
      std::size_t wins = 0;
      for (auto seed : seeds) {
        const pl::CellResult* best = nullptr;
        for (const auto& x : cells)
          if (x.seed == seed && (!best || x.rmse < best->rmse)) best = &x;
        for (const auto& x : cells)
          if (x.seed == seed && x.conditioning == c && x.strategy == s) {
            r += x.rmse / static_cast<double>(seeds.size());
            cr += x.crps / static_cast<double>(seeds.size());
            ss += x.ssr / static_cast<double>(seeds.size());
            if (best == &x) ++wins;
          }
      }
      table << c << ',' << s << ',' << r << ',' << cr << ',' << ss << ',' << wins << '\n';
      labels.push_back(c + "/" + s);
      means.push_back(r);
    }
  nimbus::svg::write_bar_chart(dir / "table.svg", "first-lead RMSE by cell (mean over replicates)", "RMSE (std units)",
                               labels, means);
  write_manifest(dir, "ablate", cfg, o.seed, {{"replicates", o.replicates}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nimbus: desk-scale latent diffusion ensemble forecasting"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("nimbus ") + kVersion);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "run configuration (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "run seed")->each([&](const std::string&) { o.seed_set = true; });
    sub->add_option("--out", o.out, "run directory");
    sub->add_option("--workers", o.workers, "worker threads for ensemble members");
    sub->add_flag("--dry-run", o.dry_run, "validate the configuration and exit");
  };
  struct Cmd {
    const char* name;
    const char* help;
    int (*fn)(const Options&);
  };
  const Cmd cmds[] = {{"gen-data", "generate the synthetic advection dataset", gen_data},
                      {"train-vae", "train the residual VAE", train_vae},
                      {"train-mae", "train the conditioning encoder", train_mae},
                      {"train-diffusion", "train the latent denoiser", train_diffusion},
                      {"forecast", "run ensemble forecasts on the test split", run_forecast},
                      {"evaluate", "score forecasts", evaluate},
                      {"diagnose", "latent spectral diagnostics", diagnose},
                      {"ablate", "conditioning x regularizer ablation grid", ablate}};
  int (*chosen)(const Options&) = nullptr;
  for (const auto& c : cmds) {
    auto* sub = app.add_subcommand(c.name, c.help);
    common(sub);
    if (std::string(c.name) == "forecast") sub->add_flag("--persistence", o.persistence, "persistence baseline");
    if (std::string(c.name) == "ablate") {
      sub->add_option("--conditionings", o.conditionings, "conditioning encoders")->delimiter(',');
      sub->add_option("--strategies", o.strategies, "spectral regularizers")->delimiter(',');
      sub->add_option("--replicates", o.replicates, "seeded replicates");
    }
    sub->callback([&chosen, fn = c.fn] { chosen = fn; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const int rc = chosen(o);
    if (o.dry_run) std::cout << "config ok " << nimbus::config::hash_hex(load_config(o)) << '\n';
    return rc;
  } catch (const nimbus::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const nimbus::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
