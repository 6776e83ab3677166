// medfpca command-line tool: simulate | fit | replicate | report.
// JSON config in, CSV/JSON artifacts out; every run writes a manifest that
// fully determines its outputs (resolved config + master seed + version).

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "medfpca/data.hpp"
#include "medfpca/diagnostics.hpp"
#include "medfpca/errors.hpp"
#include "medfpca/gee.hpp"
#include "medfpca/mediation.hpp"
#include "medfpca/simulate.hpp"
#include "medfpca/study.hpp"

namespace {

constexpr const char* kVersion = "0.1.0";

using nlohmann::json;
using namespace medfpca;

std::string now_iso() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// --- strict config reading: unknown keys rejected with a field path ---

void reject_unknown(const json& obj, const std::string& path,
                    const std::set<std::string>& allowed) {
  if (!obj.is_object())
    throw ConfigError(path + ": expected an object");
  for (const auto& [key, _] : obj.items())
    if (!allowed.count(key))
      throw ConfigError("unknown config key '" +
                        (path.empty() ? key : path + "." + key) + "'");
}

template <typename T>
T get_or(const json& obj, const std::string& path, const std::string& key,
         T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config field '" + path + "." + key +
                      "' has the wrong type");
  }
}

struct RunConfig {
  std::uint64_t seed = 1;
  std::string output_dir = ".";
  int threads = 1;
  SimConfig sim;
  MediationConfig fit;
  // study section
  int n_reps = 100;
  std::vector<std::string> methods{"mfpca", "gee"};
  std::vector<double> sparsity{25.0};
  // io section
  CsvSchema schema;
  OutcomeTransform transform = OutcomeTransform::none;
  json resolved;  // full echo for the manifest
};

SimConfig parse_sim(const json& s) {
  reject_unknown(s, "sim",
                 {"n_subjects", "mean_obs", "sigma_x", "sigma_m", "sigma_y",
                  "kernel_bandwidth", "obs_noise_sd"});
  SimConfig cfg;
  cfg.n_subjects = get_or(s, "sim", "n_subjects", cfg.n_subjects);
  cfg.mean_obs = get_or(s, "sim", "mean_obs", cfg.mean_obs);
  cfg.sigma_x = get_or(s, "sim", "sigma_x", cfg.sigma_x);
  cfg.sigma_m = get_or(s, "sim", "sigma_m", cfg.sigma_m);
  cfg.sigma_y = get_or(s, "sim", "sigma_y", cfg.sigma_y);
  cfg.kernel_bandwidth = get_or(s, "sim", "kernel_bandwidth", cfg.kernel_bandwidth);
  cfg.obs_noise_sd = get_or(s, "sim", "obs_noise_sd", cfg.obs_noise_sd);
  try {
    cfg.check();
  } catch (const ConfigError& e) {
    throw ConfigError(e.what());  // message already carries the sim.* path
  }
  return cfg;
}

MediationConfig parse_fit(const json& f) {
  reject_unknown(f, "fit",
                 {"n_knots", "grid_size", "n_iter", "n_burn", "thin",
                  "fev_threshold", "t_mixing_dof", "mh_step", "pilot_iter",
                  "pilot_burn", "pilot_thin", "max_components", "plugin",
                  "report_grid_size"});
  MediationConfig cfg;
  cfg.chain.n_knots = get_or(f, "fit", "n_knots", cfg.chain.n_knots);
  cfg.chain.grid_size = get_or(f, "fit", "grid_size", cfg.chain.grid_size);
  cfg.chain.n_iter = get_or(f, "fit", "n_iter", cfg.chain.n_iter);
  cfg.chain.n_burn = get_or(f, "fit", "n_burn", cfg.chain.n_burn);
  cfg.chain.thin = get_or(f, "fit", "thin", cfg.chain.thin);
  cfg.chain.fev_threshold = get_or(f, "fit", "fev_threshold", cfg.chain.fev_threshold);
  cfg.chain.t_mixing_dof = get_or(f, "fit", "t_mixing_dof", cfg.chain.t_mixing_dof);
  cfg.chain.mh_step = get_or(f, "fit", "mh_step", cfg.chain.mh_step);
  cfg.pilot_iter = get_or(f, "fit", "pilot_iter", cfg.pilot_iter);
  cfg.pilot_burn = get_or(f, "fit", "pilot_burn", cfg.pilot_burn);
  cfg.pilot_thin = get_or(f, "fit", "pilot_thin", cfg.pilot_thin);
  cfg.max_components = get_or(f, "fit", "max_components", cfg.max_components);
  cfg.report_grid_size = get_or(f, "fit", "report_grid_size", cfg.report_grid_size);
  const std::string plugin =
      get_or<std::string>(f, "fit", "plugin", "posterior_mean");
  if (plugin == "posterior_mean")
    cfg.plugin = MediatorPlugin::posterior_mean;
  else if (plugin == "observed")
    cfg.plugin = MediatorPlugin::observed;
  else
    throw ConfigError("config field 'fit.plugin' must be 'posterior_mean' or 'observed'");
  cfg.check();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config parse error in '" + path + "': " + e.what());
  }
  reject_unknown(j, "", {"seed", "output_dir", "threads", "sim", "fit", "study", "io"});
  RunConfig cfg;
  cfg.seed = get_or<std::uint64_t>(j, "", "seed", cfg.seed);
  cfg.output_dir = get_or<std::string>(j, "", "output_dir", cfg.output_dir);
  cfg.threads = get_or(j, "", "threads", cfg.threads);
  if (const char* env = std::getenv("MEDFPCA_THREADS")) {
    // environment overrides config for operational convenience
    try {
      cfg.threads = std::stoi(env);
    } catch (const std::exception&) {
      throw ConfigError("MEDFPCA_THREADS is not an integer");
    }
  }
  if (cfg.threads < 1) throw ConfigError("config field 'threads' must be >= 1");
  if (j.contains("sim")) cfg.sim = parse_sim(j.at("sim"));
  cfg.sim.seed = cfg.seed;
  if (j.contains("fit")) cfg.fit = parse_fit(j.at("fit"));
  cfg.fit.seed = cfg.seed;
  if (j.contains("study")) {
    const json& s = j.at("study");
    reject_unknown(s, "study", {"n_reps", "methods", "sparsity"});
    cfg.n_reps = get_or(s, "study", "n_reps", cfg.n_reps);
    cfg.methods = get_or(s, "study", "methods", cfg.methods);
    cfg.sparsity = get_or(s, "study", "sparsity", cfg.sparsity);
    if (cfg.n_reps < 1) throw ConfigError("config field 'study.n_reps' must be >= 1");
    if (cfg.methods.empty())
      throw ConfigError("config field 'study.methods' must be non-empty");
    for (const auto& m : cfg.methods)
      if (m != "mfpca" && m != "gee")
        throw ConfigError("config field 'study.methods': unknown method '" + m + "'");
    if (cfg.sparsity.empty())
      throw ConfigError("config field 'study.sparsity' must be non-empty");
  }
  if (j.contains("io")) {
    const json& io = j.at("io");
    reject_unknown(io, "io",
                   {"id", "treatment", "time", "mediator", "outcome",
                    "covariates", "outcome_transform"});
    cfg.schema.id = get_or<std::string>(io, "io", "id", cfg.schema.id);
    cfg.schema.treatment =
        get_or<std::string>(io, "io", "treatment", cfg.schema.treatment);
    cfg.schema.time = get_or<std::string>(io, "io", "time", cfg.schema.time);
    cfg.schema.mediator =
        get_or<std::string>(io, "io", "mediator", cfg.schema.mediator);
    cfg.schema.outcome =
        get_or<std::string>(io, "io", "outcome", cfg.schema.outcome);
    cfg.schema.covariates = get_or(io, "io", "covariates", cfg.schema.covariates);
    const std::string tr =
        get_or<std::string>(io, "io", "outcome_transform", "none");
    if (tr == "none")
      cfg.transform = OutcomeTransform::none;
    else if (tr == "log")
      cfg.transform = OutcomeTransform::log;
    else
      throw ConfigError("config field 'io.outcome_transform' must be 'none' or 'log'");
  } else {
    cfg.schema.covariates = {"x1", "x2", "x3"};  // simulated-data default
  }
  cfg.resolved = j;
  cfg.resolved["seed"] = cfg.seed;
  cfg.resolved["threads"] = cfg.threads;
  return cfg;
}

std::string outpath(const RunConfig& cfg, const std::string& name) {
  return cfg.output_dir == "." ? name : cfg.output_dir + "/" + name;
}

void write_text(const std::string& path, const std::string& body) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << body;
}

json manifest_base(const std::string& command, const RunConfig& cfg,
                   const std::string& started) {
  json m;
  m["command"] = command;
  m["version"] = kVersion;
  m["seed"] = cfg.seed;
  m["config"] = cfg.resolved;
  m["started_at"] = started;
  m["finished_at"] = now_iso();
  m["warnings"] = json::array();
  return m;
}

// --- commands ---

int cmd_simulate(const std::string& cfg_path) {
  const std::string started = now_iso();
  RunConfig cfg = load_config(cfg_path);
  auto [ds, truth] = generate_dataset(cfg.sim);
  (void)truth;
  write_dataset(outpath(cfg, "dataset.csv"), ds);
  json t;
  t["acme_integral"] = SimTruth::acme_integral;
  t["te_integral"] = SimTruth::te_integral;
  t["seed"] = cfg.seed;
  t["config"] = cfg.resolved;
  write_text(outpath(cfg, "truth.json"), t.dump(2) + "\n");
  json m = manifest_base("simulate", cfg, started);
  m["outputs"] = {"dataset.csv", "truth.json"};
  write_text(outpath(cfg, "manifest.json"), m.dump(2) + "\n");
  return 0;
}

std::string curve_csv(const EffectCurve& c) {
  std::ostringstream out;
  out << "t,mean,lower,upper\n";
  char buf[160];
  for (Eigen::Index g = 0; g < c.grid.size(); ++g) {
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f,%.6f\n", c.grid(g),
                  c.mean(g), c.lower(g), c.upper(g));
    out << buf;
  }
  return out.str();
}

int cmd_fit(const std::string& cfg_path, const std::string& data_path) {
  const std::string started = now_iso();
  RunConfig cfg = load_config(cfg_path);
  Dataset ds = load_dataset(data_path, cfg.schema, cfg.transform);
  MediationFit fit = fit_mediation(ds, cfg.fit);

  const EffectCurve acme = acme_curve(fit, fit.report_grid);
  const EffectCurve te = te_curve(fit, fit.report_grid);
  const EffectCurve ande = ande_curve(fit, fit.report_grid);
  write_text(outpath(cfg, "acme.csv"), curve_csv(acme));
  write_text(outpath(cfg, "te.csv"), curve_csv(te));
  write_text(outpath(cfg, "ande.csv"), curve_csv(ande));

  json est;
  for (const auto& [name, curve] :
       {std::pair<const char*, const EffectCurve*>{"acme", &acme},
        {"te", &te},
        {"ande", &ande}}) {
    const EffectIntegral ei = integrate_effect(*curve);
    est[name] = {{"mean", ei.mean}, {"lower", ei.ci.first}, {"upper", ei.ci.second}};
  }
  est["n_mediator_components"] = fit.n_mediator_components;
  est["n_outcome_components"] = fit.n_outcome_components;
  est["time_scale"] = fit.time_scale;
  write_text(outpath(cfg, "estimates.json"), est.dump(2) + "\n");

  // scalar chain diagnostics on the headline quantities
  std::vector<std::pair<std::string, std::vector<double>>> traces;
  std::vector<double> g_tr, s2m_tr, s2y_tr, l2_tr;
  for (const auto& d : fit.outcome.draws) {
    g_tr.push_back(d.gamma());
    s2y_tr.push_back(d.sigma2);
  }
  for (const auto& d : fit.mediator.draws) {
    s2m_tr.push_back(d.sigma2);
    l2_tr.push_back(d.lambda2(0));
  }
  traces.emplace_back("gamma", g_tr);
  traces.emplace_back("mediator_sigma2", s2m_tr);
  traces.emplace_back("outcome_sigma2", s2y_tr);
  traces.emplace_back("mediator_lambda2_1", l2_tr);
  const ChainReport diag = diagnose_chain(traces);
  json dj;
  dj["scalars"] = json::array();
  for (const auto& s : diag.scalars)
    dj["scalars"].push_back(
        {{"name", s.name}, {"ess", s.ess}, {"rhat", s.rhat}, {"flagged", s.flagged}});
  dj["any_flagged"] = diag.any_flagged;
  write_text(outpath(cfg, "diagnostics.json"), dj.dump(2) + "\n");

  json m = manifest_base("fit", cfg, started);
  m["outputs"] = {"acme.csv", "te.csv", "ande.csv", "estimates.json",
                  "diagnostics.json"};
  m["dataset"] = data_path;
  if (diag.any_flagged)
    m["warnings"].push_back("chain diagnostics flagged (rhat > 1.1 or degenerate)");
  if (!fit.mediator.warning.empty()) m["warnings"].push_back(fit.mediator.warning);
  if (!fit.outcome.warning.empty()) m["warnings"].push_back(fit.outcome.warning);
  write_text(outpath(cfg, "manifest.json"), m.dump(2) + "\n");
  if (diag.any_flagged)
    std::cerr << "warning: chain diagnostics flagged; see diagnostics.json\n";
  return 0;
}

int cmd_replicate(const std::string& cfg_path) {
  const std::string started = now_iso();
  RunConfig cfg = load_config(cfg_path);
  std::vector<Method> methods;
  for (const auto& m : cfg.methods)
    methods.push_back(m == "mfpca" ? Method::mfpca : Method::gee);
  if (static_cast<long>(cfg.n_reps) * static_cast<long>(cfg.sparsity.size()) >= 500)
    std::cerr << "warning: full-scale replication requested; expect hours of runtime\n";

  std::vector<ReplicationReport> reports;
  int level = 0;
  for (double T : cfg.sparsity) {
    SimConfig sim = cfg.sim;
    sim.mean_obs = T;
    reports.push_back(run_replication(
        sim, cfg.fit, methods, cfg.n_reps, cfg.threads,
        derive_seed(cfg.seed, "sparsity", static_cast<std::uint64_t>(level++))));
  }
  write_text(outpath(cfg, "report.csv"), report_csv(reports));
  std::cout << report_text(reports);

  json m = manifest_base("replicate", cfg, started);
  m["outputs"] = {"report.csv"};
  int failed = 0;
  for (const auto& r : reports) {
    failed += r.n_failed;
    for (const auto& f : r.failures) m["warnings"].push_back(f);
    if (!r.valid) m["warnings"].push_back("report invalid: >5% replicate failures");
  }
  m["n_failed"] = failed;
  write_text(outpath(cfg, "manifest.json"), m.dump(2) + "\n");
  return 0;
}

int cmd_report(const std::string& report_path) {
  std::ifstream in(report_path);
  if (!in) throw IoError("cannot open '" + report_path + "'");
  std::string header;
  if (!std::getline(in, header))
    throw ValidationError("empty report '" + report_path + "'");
  if (header.rfind("method,estimand,sparsity_T", 0) != 0)
    throw ValidationError("'" + report_path + "' is not a replication report CSV");
  std::vector<ReplicationReport> reports;
  std::string line;
  double cur_T = -1.0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = medfpca::detail::split_csv_line(line);
    if (f.size() != 8)
      throw ValidationError("malformed report row: '" + line + "'");
    ReplicationCell c;
    c.method = f[0];
    c.estimand = f[1];
    c.sparsity_T = std::stod(f[2]);
    c.n_reps = std::stoi(f[3]);
    c.abs_bias = std::stod(f[4]);
    c.rmse = std::stod(f[5]);
    c.coverage = std::stod(f[6]);
    c.n_failed = std::stoi(f[7]);
    if (reports.empty() || c.sparsity_T != cur_T) {
      reports.emplace_back();
      reports.back().n_requested = c.n_reps + c.n_failed;
      cur_T = c.sparsity_T;
    }
    reports.back().cells.push_back(std::move(c));
  }
  std::cout << report_text(reports);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"functional-principal-component causal mediation toolkit"};
  app.require_subcommand(1);

  std::string cfg_path, data_path, report_path;
  auto* sim = app.add_subcommand("simulate", "generate a synthetic dataset");
  sim->add_option("-c,--config", cfg_path, "JSON config")->required();
  auto* fit = app.add_subcommand("fit", "fit the mediation model to a dataset");
  fit->add_option("-c,--config", cfg_path, "JSON config")->required();
  fit->add_option("-d,--data", data_path, "long-format CSV dataset")->required();
  auto* repl = app.add_subcommand("replicate", "run a simulation study");
  repl->add_option("-c,--config", cfg_path, "JSON config")->required();
  auto* rep = app.add_subcommand("report", "pretty-print a replication report");
  rep->add_option("-i,--input", report_path, "report CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) ? 2 : 0;
  }

  try {
    if (sim->parsed()) return cmd_simulate(cfg_path);
    if (fit->parsed()) return cmd_fit(cfg_path, data_path);
    if (repl->parsed()) return cmd_replicate(cfg_path);
    if (rep->parsed()) return cmd_report(report_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const SchemaError& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return 3;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
