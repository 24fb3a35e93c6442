// kbrw: command-line front end for the killed branching random walk toolkit.

#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kbrw/experiment.hpp"

namespace {

using kbrw::json;

struct Common {
  std::string model_path;
  std::uint64_t seed = 1;
  unsigned workers = 1;
  std::string output_dir;
  bool quiet = false;
};

// Numbers and booleans become JSON scalars so that the config hash matches an
// equivalent config document; everything else stays a string.
json typed(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos == v.size()) {
      if (d == std::floor(d) && d >= 0.0 && d < 9.0e15 && v.find_first_of(".eE") == std::string::npos)
        return static_cast<std::uint64_t>(d);
      return d;
    }
  } catch (const std::exception&) {
  }
  return v;
}

struct FlagSet {
  std::map<std::string, std::string> values;

  void add(CLI::App* app, const std::string& name, const std::string& help) {
    app->add_option("--" + name, values[name], help);
  }

  json to_json(CLI::App* app) const {
    json j = json::object();
    for (const auto& [name, v] : values) {
      if (app->get_option("--" + name)->count() == 0) continue;
      std::string key = name;
      std::replace(key.begin(), key.end(), '-', '_');
      j[key] = typed(v);
    }
    return j;
  }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw kbrw::ConfigError("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json parse_json_file(const std::string& path) {
  try {
    return json::parse(slurp(path));
  } catch (const json::parse_error& e) {
    throw kbrw::SchemaError("$", path + ": invalid JSON: " + e.what());
  }
}

void add_common(CLI::App* app, Common& c, bool needs_model) {
  auto* m = app->add_option("--model", c.model_path, "model JSON file");
  if (needs_model) m->required();
  app->add_option("--seed", c.seed, "master seed");
  app->add_option("--workers", c.workers, "worker threads (KBRW_WORKERS overrides)");
  app->add_option("-o,--output-dir", c.output_dir, "directory for summary.json, CSV tables and MANIFEST");
  app->add_flag("-q,--quiet", c.quiet, "do not print the summary");
}

int execute(const kbrw::ExperimentConfig& cfg, bool quiet) {
  const auto out = kbrw::run(cfg);
  if (!quiet) std::cout << out.summary.dump(2) << "\n";
  if (out.exit_code == kbrw::kExitTruncated)
    std::cerr << "warning: truncated fraction " << out.truncated_fraction << " exceeds 0.5\n";
  return out.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Killed branching random walk simulation and estimation"};
  app.require_subcommand(1);

  struct Sub {
    CLI::App* app;
    Common common;
    FlagSet flags;
  };
  std::map<std::string, Sub> subs;
  auto make = [&](const std::string& name, const std::string& help, bool needs_model,
                  const std::vector<std::pair<std::string, std::string>>& flags) {
    auto& s = subs[name];
    s.app = app.add_subcommand(name, help);
    add_common(s.app, s.common, needs_model);
    for (const auto& [f, h] : flags) s.flags.add(s.app, f, h);
  };

  make("analyze-model", "psi, rho*, rho-/rho+ and the regime of a model", true, {});
  make("simulate", "killed trees: Z, leaves and H(L) per replica", true,
       {{"mode", "trees|martingale"},
        {"x", "start position (default 1; martingale: 0)"},
        {"generations", "martingale generations, e.g. 1,5,20"},
        {"levels", "probe levels, e.g. 2.0,4.0,6.0"},
        {"replicas", "number of trees"},
        {"caps", "max_particles[,max_generations]"},
        {"max-particles", "particle cap per tree (martingale: population cap)"},
        {"max-generations", "generation cap per tree"},
        {"stop-at-top", "do not expand particles above the top level (true|false)"},
        {"survival-curve", "grid n1,n2,... for P(Z>n) and P(#L[0]>n)"},
        {"records", "write records.csv (true|false)"}});
  make("walk", "tilted random walk functionals", true,
       {{"tilt", "auto|star|plus|minus"},
        {"op", "renewal|cr|passage|tanaka|overshoot"},
        {"t", "level"},
        {"x", "start position"},
        {"replicas", "replicas"},
        {"max-steps", "step cap per walk"},
        {"grid", "renewal grid x1,x2,..."},
        {"method", "visit|ladder|both"},
        {"k", "Tanaka horizon"}});
  make("spine", "spine-based estimators", true,
       {{"op", "eh|survival|many21|marginal-check|tail"},
        {"x", "start position"},
        {"t", "level (tail: stratum split level)"},
        {"t2", "second survival probe"},
        {"replicas", "spine replicas"},
        {"naive-replicas", "plain Monte Carlo replicas"},
        {"forward-replicas", "forward tree replicas for eh"},
        {"renewal-replicas", "replicas for an estimated renewal table"},
        {"n", "generation"},
        {"functional", "one|alive"},
        {"mutate", "perturbed sampler for marginal-check (true|false)"},
        {"grid", "tail grid n1,n2,..."},
        {"max-particles", "particle cap per tree"},
        {"max-generations", "generation cap per tree"}});
  make("estimate", "tail fits from simulate records, first-passage constants, convolution tails", false,
       {{"op", "tail|constants|convolution"},
        {"input", "records.csv written by simulate"},
        {"column", "Z|leaves"},
        {"mode", "auto|subcritical|critical"},
        {"grid", "n1,n2,... (default powers of 2)"},
        {"min-exceedances", "minimum exceedances per grid point"},
        {"replicas", "replicas (constants)"},
        {"max-steps", "step cap (constants)"},
        {"x", "start position of the recorded trees (tail)"},
        {"constants-replicas", "critical tail: replicas for c_crit, enables the plateau check"},
        {"xi", "convolution: number of terms"},
        {"y", "convolution: weight Y"},
        {"p", "convolution: Pareto index"},
        {"a", "convolution: Pareto scale, P(Gamma > t) = a t^-p"}});
  make("oracle", "exact values by enumeration and dynamic programming", true,
       {{"op", "eh|passage|escape|undershoot|kstep|enumerate|many21"},
        {"tilt", "auto|star|plus|minus"},
        {"x", "start position"},
        {"t", "level"},
        {"k", "steps"},
        {"depth", "tree depth"},
        {"killed", "enumerate the killed tree (true|false)"},
        {"n", "generation"},
        {"functional", "one|alive"}});
  make("report", "one row per acceptance criterion from run summaries", false,
       {{"inputs", "summary.json files or run directories, comma separated"}});

  std::string config_path;
  bool run_quiet = false;
  auto* run_app = app.add_subcommand("run", "execute an experiment config document");
  run_app->add_option("--config", config_path, "ExperimentConfig JSON")->required();
  run_app->add_flag("-q,--quiet", run_quiet, "do not print the summary");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kbrw::kExitConfig;
  }

  try {
    if (run_app->parsed()) {
      const auto cfg = kbrw::config_from_json(parse_json_file(config_path));
      return execute(cfg, run_quiet);
    }
    for (auto& [name, s] : subs) {
      if (!s.app->parsed()) continue;
      kbrw::ExperimentConfig cfg;
      cfg.command = name;
      if (!s.common.model_path.empty()) cfg.model = parse_json_file(s.common.model_path);
      cfg.flags = s.flags.to_json(s.app);
      if (cfg.flags.contains("caps")) {
        const auto caps = s.flags.values.at("caps");
        const auto comma = caps.find(',');
        cfg.flags["max_particles"] = typed(caps.substr(0, comma));
        if (comma != std::string::npos) cfg.flags["max_generations"] = typed(caps.substr(comma + 1));
        cfg.flags.erase("caps");
      }
      cfg.seed = s.common.seed;
      cfg.workers = s.common.workers;
      cfg.output_dir = s.common.output_dir;
      return execute(cfg, s.common.quiet);
    }
  } catch (const kbrw::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kbrw::kExitConfig;
  } catch (const kbrw::SchemaError& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return kbrw::kExitConfig;
  } catch (const kbrw::RegimeError& e) {
    std::cerr << "regime error: " << e.what() << "\n";
    return kbrw::kExitConfig;
  } catch (const kbrw::ModelError& e) {
    std::cerr << "model error: " << e.what() << "\n";
    return kbrw::kExitConfig;
  } catch (const kbrw::CapError& e) {
    std::cerr << "cap exceeded: " << e.what() << "\n";
    return kbrw::kExitTruncated;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kbrw::kExitFailure;
  }
  return kbrw::kExitFailure;
}
