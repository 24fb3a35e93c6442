#pragma once

// Experiment harness: a config document (model + command + flags + seed)
// is executed by run(), which writes CSV record tables, a JSON summary and a
// MANIFEST into the output directory.

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "kbrw/brw.hpp"
#include "kbrw/error.hpp"
#include "kbrw/estimate.hpp"
#include "kbrw/ks.hpp"
#include "kbrw/model.hpp"
#include "kbrw/model_json.hpp"
#include "kbrw/oracle.hpp"
#include "kbrw/parallel.hpp"
#include "kbrw/spine.hpp"
#include "kbrw/stats.hpp"
#include "kbrw/walk.hpp"

namespace kbrw {

inline constexpr std::string_view kCodeVersion = "kbrw 0.1.0";

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitTruncated = 3;

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct ExperimentConfig {
  json model;
  std::string command;
  json flags = json::object();
  std::uint64_t seed = 1;
  unsigned workers = 1;
  std::filesystem::path output_dir;
};

inline json to_json(const ExperimentConfig& c) {
  return {{"model", c.model},     {"command", c.command}, {"flags", c.flags},
          {"seed", c.seed},       {"workers", c.workers}, {"output_dir", c.output_dir.string()}};
}

inline ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  ExperimentConfig c;
  if (!j.contains("command") || !j["command"].is_string()) throw ConfigError("config.command: missing string");
  c.command = j["command"];
  if (j.contains("model")) c.model = j["model"];
  if (j.contains("flags")) {
    if (!j["flags"].is_object()) throw ConfigError("config.flags: expected an object");
    c.flags = j["flags"];
  }
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned()) throw ConfigError("config.seed: expected an unsigned integer");
    c.seed = j["seed"];
  }
  if (j.contains("workers")) {
    if (!j["workers"].is_number_unsigned()) throw ConfigError("config.workers: expected an unsigned integer");
    c.workers = j["workers"];
  }
  if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
  return c;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Hash of everything that determines the numbers: model, command, flags and
/// seed. Worker count and output location are excluded.
inline std::string config_hash(const ExperimentConfig& c) {
  const json key = {{"model", c.model}, {"command", c.command}, {"flags", c.flags}, {"seed", c.seed}};
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(key.dump())));
  return buf;
}

inline json to_json(const EstimateWithCI& e) {
  return {{"estimate", e.value},
          {"stderr", e.std_error},
          {"n_effective", e.n_effective},
          {"replicas", e.replicas},
          {"truncated_count", e.truncated_count},
          {"truncated_fraction", e.truncated_fraction}};
}

inline json to_json(const SurvivalCurve& c) {
  json rows = json::array();
  for (std::size_t i = 0; i < c.grid.size(); ++i)
    rows.push_back({{"n", c.grid[i]},
                    {"survival", c.survival[i].value},
                    {"stderr", c.survival[i].std_error},
                    {"exceedances", c.exceedances[i]},
                    {"censored", static_cast<bool>(c.censored[i])}});
  return rows;
}

inline json to_json(const TailFitReport& r) {
  json j;
  j["mode"] = to_string(r.mode);
  j["grid"] = r.grid;
  j["fitted"] = to_json(r.fitted);
  j["goodness_of_fit"] = r.goodness_of_fit;
  if (!r.normalized.empty()) j["normalized"] = r.normalized;
  j["reference"] = r.reference ? json(*r.reference) : json(nullptr);
  json s = json::array();
  for (const auto& e : r.survival) s.push_back(to_json(e));
  j["survival"] = s;
  return j;
}

/// One acceptance check carried by a summary; `report` aggregates these.
inline json check(int criterion, const std::string& name, bool pass, double value, const std::string& bound) {
  return {{"criterion", criterion}, {"name", name}, {"pass", pass}, {"value", value}, {"bound", bound}};
}

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Small CSV table with a fixed header.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void row(const std::vector<double>& values) {
    std::string line;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (i) line += ',';
      line += fmt_double(values[i]);
    }
    lines_.push_back(std::move(line));
  }
  void raw(std::string line) { lines_.push_back(std::move(line)); }

  std::string str() const {
    std::string out;
    for (std::size_t i = 0; i < header_.size(); ++i) out += (i ? "," : "") + header_[i];
    out += '\n';
    for (const auto& l : lines_) out += l + '\n';
    return out;
  }
  std::size_t size() const { return lines_.size(); }

 private:
  std::vector<std::string> header_;
  std::vector<std::string> lines_;
};

struct RunOutcome {
  json summary;
  /// CSV name -> content.
  std::map<std::string, std::string> tables;
  double truncated_fraction = 0.0;
  int exit_code = kExitOk;
};

namespace detail {

// Typed access to the flags object; every flag read is recorded so that
// unknown flags can be rejected.
class Flags {
 public:
  Flags(const json& j, std::string command) : j_(j.is_null() ? json::object() : j), command_(std::move(command)) {
    if (!j_.is_object()) throw ConfigError(command_ + ": flags must be an object");
  }

  bool has(const std::string& k) const {
    used_.insert(k);
    return j_.contains(k) && !j_[k].is_null();
  }

  double num(const std::string& k, double def) const {
    if (!has(k)) return def;
    const auto& v = j_[k];
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
      try {
        std::size_t pos = 0;
        const double d = std::stod(v.get<std::string>(), &pos);
        if (pos == v.get<std::string>().size()) return d;
      } catch (const std::exception&) {
      }
    }
    throw ConfigError(command_ + ": flag --" + dashed(k) + " expects a number");
  }

  double required(const std::string& k) const {
    if (!has(k)) throw ConfigError(command_ + ": flag --" + dashed(k) + " is required");
    return num(k, 0.0);
  }

  std::uint64_t count(const std::string& k, std::uint64_t def) const {
    const double v = num(k, static_cast<double>(def));
    if (!(v >= 0.0) || v != std::floor(v) || v > 1.8e19)
      throw ConfigError(command_ + ": flag --" + dashed(k) + " expects a non-negative integer");
    return static_cast<std::uint64_t>(v);
  }

  std::string str(const std::string& k, const std::string& def, const std::vector<std::string>& allowed = {}) const {
    std::string s = def;
    if (has(k)) {
      if (!j_[k].is_string()) throw ConfigError(command_ + ": flag --" + dashed(k) + " expects a string");
      s = j_[k].get<std::string>();
    }
    if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), s) == allowed.end()) {
      std::string opts;
      for (const auto& a : allowed) opts += (opts.empty() ? "" : "|") + a;
      throw ConfigError(command_ + ": flag --" + dashed(k) + " must be one of " + opts + ", got '" + s + "'");
    }
    return s;
  }

  std::vector<double> list(const std::string& k, const std::vector<double>& def) const {
    if (!has(k)) return def;
    const auto& v = j_[k];
    std::vector<double> out;
    if (v.is_array()) {
      for (const auto& e : v) {
        if (!e.is_number()) throw ConfigError(command_ + ": flag --" + dashed(k) + " expects numbers");
        out.push_back(e.get<double>());
      }
      return out;
    }
    if (v.is_number()) return {v.get<double>()};
    if (!v.is_string()) throw ConfigError(command_ + ": flag --" + dashed(k) + " expects a list");
    std::stringstream ss(v.get<std::string>());
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        std::size_t pos = 0;
        out.push_back(std::stod(item, &pos));
        while (pos < item.size() && std::isspace(static_cast<unsigned char>(item[pos]))) ++pos;
        if (pos != item.size()) throw std::invalid_argument(item);
      } catch (const std::exception&) {
        throw ConfigError(command_ + ": flag --" + dashed(k) + ": '" + item + "' is not a number");
      }
    }
    return out;
  }

  std::vector<std::string> strings(const std::string& k) const {
    std::vector<std::string> out;
    if (!has(k)) return out;
    const auto& v = j_[k];
    if (v.is_array()) {
      for (const auto& e : v) out.push_back(e.get<std::string>());
    } else if (v.is_string()) {
      std::stringstream ss(v.get<std::string>());
      std::string item;
      while (std::getline(ss, item, ',')) out.push_back(item);
    } else {
      throw ConfigError(command_ + ": flag --" + dashed(k) + " expects a list of strings");
    }
    return out;
  }

  bool boolean(const std::string& k, bool def) const {
    if (!has(k)) return def;
    const auto& v = j_[k];
    if (v.is_boolean()) return v.get<bool>();
    if (v.is_string()) {
      const auto s = v.get<std::string>();
      if (s == "true" || s == "1") return true;
      if (s == "false" || s == "0") return false;
    }
    throw ConfigError(command_ + ": flag --" + dashed(k) + " expects true or false");
  }

  void reject_unknown() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError(command_ + ": unknown flag --" + dashed(it.key()));
  }

 private:
  static std::string dashed(std::string k) {
    std::replace(k.begin(), k.end(), '_', '-');
    return k;
  }

  json j_;
  std::string command_;
  mutable std::set<std::string> used_;
};

struct ModelContext {
  Model model;
  ModelAnalytics analytics;
};

inline ModelContext load_model(const ExperimentConfig& c) {
  if (c.model.is_null()) throw ConfigError(c.command + ": a model document is required");
  Model m = model_from_json(c.model);
  auto a = classify_regime(m);
  return {std::move(m), a};
}

inline McConfig mc(const ExperimentConfig& c, std::uint64_t replicas, std::uint64_t salt) {
  return {replicas, salt ? derive_seed(c.seed, salt) : c.seed, resolve_workers(c.workers)};
}

inline double tilt_for(const ModelAnalytics& a, const std::string& name) {
  if (a.regime == Regime::OutOfScope) throw RegimeError("model is out of scope (no minimizer of psi(t)/t)");
  if (name == "auto") return a.tilt();
  if (name == "star") return a.rho_star;
  if (name == "plus") {
    if (!a.rho_plus) throw RegimeError("tilt 'plus' needs a subcritical model");
    return *a.rho_plus;
  }
  if (!a.rho_minus) throw RegimeError("tilt 'minus' needs a subcritical model");
  return *a.rho_minus;
}

/// Renewal table of the regime walk: closed form for +-d walks, otherwise a
/// ladder-duality estimate on [0, x_max] extended linearly beyond.
inline RenewalTable regime_renewal(const TiltedWalk& w, double x_max, const McConfig& cfg) {
  if (auto cf = closed_form_renewal(w)) return *cf;
  std::vector<double> grid;
  const double step = std::max(0.05, x_max / 200.0);
  for (double y = 0.0; y <= x_max + 1e-12; y += step) grid.push_back(y);
  return RenewalTable::from_estimate(renewal_function(w, grid, RenewalMethod::LadderDuality, cfg), true);
}

inline bool finite_lattice(const TiltedWalk& w) { return !w.is_gaussian() && w.model().lattice_span().has_value(); }

/// Exact C_R for a lattice walk from the exit-problem oracle.
inline double exact_C_R(const TiltedWalk& w) {
  if (std::abs(w.drift()) <= kRegimeTolerance) {
    const double H = 2000.0 * detail::walk_span(w);
    return 1.0 / exact_conditional_undershoot(w, [](double y) { return y; }, H);
  }
  return 1.0 / exact_escape_probability(w, 0.0).value;
}

// ---------------------------------------------------------------------------

inline RunOutcome run_analyze(const ExperimentConfig& c, const Flags& f) {
  f.reject_unknown();
  const auto ctx = load_model(c);
  RunOutcome out;
  out.summary["model"] = to_json(ctx.model);
  out.summary["analytics"] = to_json(ctx.analytics);
  return out;
}

// Non-killed trees: W_n, the derivative martingale (critical) and M_n at
// rho- (subcritical), against their constant means.
inline RunOutcome run_martingale(const ExperimentConfig& c, const Flags& f) {
  const double x = f.num("x", 0.0);
  auto gens = f.list("generations", {1.0, 5.0, 20.0});
  const auto replicas = f.count("replicas", 100000);
  const auto max_population = f.count("max_particles", 10'000'000);
  f.reject_unknown();
  const auto ctx = load_model(c);
  const auto& a = ctx.analytics;
  if (a.regime == Regime::OutOfScope) throw RegimeError("model is out of scope");
  std::sort(gens.begin(), gens.end());
  const bool critical = a.regime == Regime::Critical;
  const double rho = a.tilt();
  const auto n_max = static_cast<std::uint64_t>(gens.back());
  const std::size_t m = gens.size();

  struct Acc {
    std::vector<MeanAccumulator> w, dw, mm;
    void merge(const Acc& o) {
      for (std::size_t i = 0; i < w.size(); ++i) {
        w[i].merge(o.w[i]);
        dw[i].merge(o.dw[i]);
        mm[i].merge(o.mm[i]);
      }
    }
  };
  Acc init;
  init.w.resize(m);
  init.dw.resize(m);
  init.mm.resize(m);
  const auto acc = run_replicas<Acc>(
      mc(c, replicas, 0),
      [&](Acc& s, Rng& rng, std::uint64_t) {
        const auto traj = martingale_trajectory(ctx.model, a, x, n_max, rng, max_population);
        for (std::size_t i = 0; i < m; ++i) {
          const auto& ms = traj[static_cast<std::size_t>(gens[i])];
          if (ms.truncated) {
            s.w[i].add_truncated();
            s.dw[i].add_truncated();
            s.mm[i].add_truncated();
            continue;
          }
          s.w[i].add(ms.additive_W_n);
          if (critical) s.dw[i].add(ms.derivative_dW_n);
          if (ms.M_rho_minus_n) s.mm[i].add(*ms.M_rho_minus_n);
        }
      },
      init);

  RunOutcome out;
  auto& s = out.summary;
  const double w_mean = std::exp(rho * x);
  const double dw_mean = -a.rho_star * x * std::exp(a.rho_star * x);
  s["x"] = x;
  s["regime"] = to_string(a.regime);
  s["rho"] = rho;
  s["W_expected"] = w_mean;
  if (critical) s["dW_expected"] = dw_mean;
  s["checks"] = json::array();
  double max_z = 0.0;
  json rows = json::array();
  for (std::size_t i = 0; i < m; ++i) {
    const auto we = acc.w[i].estimate();
    json r = {{"n", gens[i]}, {"W", to_json(we)}, {"z_W", z_score(we, w_mean)}};
    max_z = std::max(max_z, z_score(we, w_mean));
    out.truncated_fraction = std::max(out.truncated_fraction, we.truncated_fraction);
    if (critical) {
      const auto de = acc.dw[i].estimate();
      r["dW"] = to_json(de);
      r["z_dW"] = z_score(de, dw_mean);
      max_z = std::max(max_z, z_score(de, dw_mean));
    }
    if (a.rho_minus) {
      const auto me = acc.mm[i].estimate();
      r["M_rho_minus"] = to_json(me);
      r["z_M_rho_minus"] = z_score(me, std::exp(*a.rho_minus * x));
    }
    rows.push_back(r);
  }
  s["generations"] = rows;
  if (critical)
    s["checks"].push_back(check(4, "E[W_n] and E[dW_n] by simulation", max_z <= 4.0, max_z, "max z <= 4"));

  // Exact means by enumeration where the tree is small enough.
  if (ctx.model.has_finite_support()) {
    double max_err = 0.0;
    json exact = json::array();
    for (std::size_t n = 1; n <= 3; ++n) {
      std::map<std::string, GenerationFunctional> fs{{"W", generation_functionals::additive(rho)}};
      if (critical) fs["dW"] = generation_functionals::derivative(a.rho_star);
      if (a.rho_minus) fs["M_rho_minus"] = generation_functionals::additive(*a.rho_minus);
      try {
        const auto e = enumerate_tree_expectation(ctx.model, x, n, fs);
        json row = {{"n", n}};
        for (const auto& [k, v] : e.expectations) row[k] = v;
        exact.push_back(row);
        max_err = std::max(max_err, std::abs(e.expectations.at("W") - w_mean));
        if (critical) max_err = std::max(max_err, std::abs(e.expectations.at("dW") - dw_mean));
        if (a.rho_minus)
          max_err = std::max(max_err, std::abs(e.expectations.at("M_rho_minus") - std::exp(*a.rho_minus * x)));
      } catch (const CapError&) {
        break;
      }
    }
    s["exact"] = exact;
    if (!exact.empty())
      s["checks"].push_back(check(4, "martingale means by enumeration, n <= 3", max_err <= 1e-9, max_err,
                                  "max abs error <= 1e-9"));
  }
  return out;
}

inline RunOutcome run_simulate(const ExperimentConfig& c, const Flags& f) {
  if (f.str("mode", "trees", {"trees", "martingale"}) == "martingale") return run_martingale(c, f);
  const double x = f.num("x", 1.0);
  const auto levels = f.list("levels", {});
  const auto replicas = f.count("replicas", 10000);
  TreeOptions opt;
  opt.probe_levels = levels;
  opt.caps.max_particles = f.count("max_particles", opt.caps.max_particles);
  opt.caps.max_generations = f.count("max_generations", opt.caps.max_generations);
  opt.stop_at_top_level = f.boolean("stop_at_top", false);
  const auto curve_grid = f.list("survival_curve", {});
  const bool records = f.boolean("records", true);
  f.reject_unknown();
  if (x < 0.0) throw ConfigError("simulate: --x must be >= 0");
  const auto ctx = load_model(c);
  std::sort(opt.probe_levels.begin(), opt.probe_levels.end());
  const std::size_t m = opt.probe_levels.size();

  struct Acc {
    MeanAccumulator z, leaves;
    std::vector<MeanAccumulator> surv, h, z0l;
    std::uint64_t ok = 0, bad = 0, undecided = 0, truncated = 0;
    SurvivalAccumulator zs, ls;
    std::string rows;
    void merge(const Acc& o) {
      z.merge(o.z);
      leaves.merge(o.leaves);
      for (std::size_t i = 0; i < surv.size(); ++i) {
        surv[i].merge(o.surv[i]);
        h[i].merge(o.h[i]);
        z0l[i].merge(o.z0l[i]);
      }
      ok += o.ok;
      bad += o.bad;
      undecided += o.undecided;
      truncated += o.truncated;
      zs.merge(o.zs);
      ls.merge(o.ls);
      rows += o.rows;
    }
  };
  Acc init;
  init.surv.resize(m);
  init.h.resize(m);
  init.z0l.resize(m);
  init.zs = SurvivalAccumulator(curve_grid);
  init.ls = SurvivalAccumulator(curve_grid);
  const auto acc = run_replicas<Acc>(
      mc(c, replicas, 0),
      [&](Acc& a, Rng& rng, std::uint64_t i) {
        KilledTreeSimulator sim(ctx.model, opt);
        const auto& r = sim.run(x, rng);
        switch (exploration_check(r)) {
          case Verdict::True: ++a.ok; break;
          case Verdict::False: ++a.bad; break;
          default: ++a.undecided;
        }
        if (r.truncated) {
          ++a.truncated;
          a.z.add_censored(static_cast<double>(r.total_progeny_Z));
          a.leaves.add_censored(static_cast<double>(r.leaf_count));
        } else {
          a.z.add(static_cast<double>(r.total_progeny_Z));
          a.leaves.add(static_cast<double>(r.leaf_count));
        }
        for (std::size_t k = 0; k < m; ++k) {
          if (r.truncated) {
            a.surv[k].add_truncated();
            a.h[k].add_truncated();
            a.z0l[k].add_truncated();
            continue;
          }
          a.surv[k].add(r.H[k] > 0 ? 1.0 : 0.0);
          a.h[k].add(static_cast<double>(r.H[k]));
          a.z0l[k].add(static_cast<double>(r.Z0L[k]));
        }
        if (!curve_grid.empty()) {
          a.zs.add(static_cast<double>(r.total_progeny_Z), r.truncated);
          a.ls.add(static_cast<double>(r.leaf_count), r.truncated);
        }
        if (records) {
          std::string line = std::to_string(i) + ',' + std::to_string(r.total_progeny_Z) + ',' +
                             std::to_string(r.leaf_count);
          for (std::size_t k = 0; k < m; ++k) line += ',' + std::to_string(r.H[k]);
          line += r.truncated ? ",1\n" : ",0\n";
          a.rows += line;
        }
      },
      init);

  RunOutcome out;
  auto& s = out.summary;
  s["x"] = x;
  s["replicas"] = replicas;
  s["truncated_count"] = acc.truncated;
  out.truncated_fraction = replicas ? static_cast<double>(acc.truncated) / static_cast<double>(replicas) : 0.0;
  s["truncated_fraction"] = out.truncated_fraction;
  s["mean_Z"] = to_json(acc.z.estimate());
  s["mean_leaves"] = to_json(acc.leaves.estimate());
  json lv = json::array();
  for (std::size_t k = 0; k < m; ++k)
    lv.push_back({{"level", opt.probe_levels[k]},
                  {"survival", to_json(acc.surv[k].estimate())},
                  {"mean_H", to_json(acc.h[k].estimate())},
                  {"mean_Z0L", to_json(acc.z0l[k].estimate())}});
  s["levels"] = lv;
  s["exploration"] = {{"true", acc.ok}, {"false", acc.bad}, {"indeterminate", acc.undecided}};
  s["checks"] = json::array({check(1, "exploration identity Y_Z = #L[0] on every decided tree",
                                   acc.bad == 0 && acc.ok > 0, static_cast<double>(acc.bad), "violations == 0")});
  if (records) {
    std::string header = "replica,Z,leaves";
    for (std::size_t k = 0; k < m; ++k) header += ",H_" + fmt_double(opt.probe_levels[k]);
    header += ",truncated\n";
    out.tables["records.csv"] = header + acc.rows;
  }
  if (!curve_grid.empty()) {
    const auto zc = acc.zs.curve(), lc = acc.ls.curve();
    s["survival_Z"] = to_json(zc);
    s["survival_leaves"] = to_json(lc);
    CsvTable t({"n", "P_Z_gt_n", "se_Z", "P_leaves_gt_n", "se_leaves"});
    for (std::size_t i = 0; i < curve_grid.size(); ++i)
      t.row({zc.grid[i], zc.survival[i].value, zc.survival[i].std_error, lc.survival[i].value,
             lc.survival[i].std_error});
    out.tables["survival.csv"] = t.str();
  }
  return out;
}

inline RunOutcome run_walk(const ExperimentConfig& c, const Flags& f) {
  const auto tilt = f.str("tilt", "auto", {"auto", "star", "plus", "minus"});
  const auto op = f.str("op", "", {"renewal", "cr", "passage", "tanaka", "overshoot"});
  const auto replicas = f.count("replicas", 100000);
  const double t = f.num("t", 20.0);
  const double x = f.num("x", 0.0);
  const auto max_steps = f.count("max_steps", 1'000'000);
  std::vector<double> grid;
  std::string method;
  std::size_t k = 10;
  if (op == "renewal") {
    grid = f.list("grid", {0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
    method = f.str("method", "both", {"visit", "ladder", "both"});
  }
  if (op == "tanaka") k = f.count("k", 10);
  f.reject_unknown();
  if (op == "tanaka" && k == 0) throw ConfigError("walk: --k must be >= 1");
  const auto ctx = load_model(c);
  const double rho = tilt_for(ctx.analytics, tilt);
  const TiltedWalk w(ctx.model, rho);
  const bool lattice = finite_lattice(w);
  const bool critical = std::abs(w.drift()) <= kRegimeTolerance;

  RunOutcome out;
  auto& s = out.summary;
  s["op"] = op;
  s["tilt"] = tilt;
  s["rho"] = rho;
  s["drift"] = w.drift();
  s["lattice"] = lattice;
  s["checks"] = json::array();

  if (op == "renewal") {
    RenewalOptions ro;
    ro.max_steps = max_steps;
    const auto cf = closed_form_renewal(w);
    std::optional<RenewalEstimate> visit, ladder;
    if (method != "ladder") visit = renewal_function(w, grid, RenewalMethod::VisitCount, mc(c, replicas, 1), ro);
    if (method != "visit") ladder = renewal_function(w, grid, RenewalMethod::LadderDuality, mc(c, replicas, 2), ro);
    CsvTable tab({"x", "R_visit", "se_visit", "R_ladder", "se_ladder", "R_closed_form"});
    json pts = json::array();
    double max_z = 0.0, max_rel = 0.0, trunc = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      json p = {{"x", grid[i]}};
      const double nan = std::numeric_limits<double>::quiet_NaN();
      double rv = nan, sv = nan, rl = nan, sl = nan, rc = nan;
      if (visit) {
        rv = visit->r_values[i].value;
        sv = visit->r_values[i].std_error;
        p["visit_count"] = to_json(visit->r_values[i]);
        trunc = std::max(trunc, visit->r_values[i].truncated_fraction);
      }
      if (ladder) {
        rl = ladder->r_values[i].value;
        sl = ladder->r_values[i].std_error;
        p["ladder_duality"] = to_json(ladder->r_values[i]);
        trunc = std::max(trunc, ladder->r_values[i].truncated_fraction);
      }
      if (visit && ladder) {
        const double z = pooled_z(visit->r_values[i], ladder->r_values[i]);
        p["pooled_z"] = z;
        max_z = std::max(max_z, z);
      }
      if (cf) {
        rc = (*cf)(grid[i]);
        p["closed_form"] = rc;
        for (const auto& e : {visit, ladder})
          if (e) max_rel = std::max(max_rel, std::abs(e->r_values[i].value / rc - 1.0));
      }
      pts.push_back(p);
      tab.row({grid[i], rv, sv, rl, sl, rc});
    }
    s["points"] = pts;
    out.truncated_fraction = trunc;
    if (visit && ladder)
      s["checks"].push_back(check(5, "VisitCount vs LadderDuality renewal", max_z <= 4.0, max_z, "max pooled z <= 4"));
    if (cf) s["checks"].push_back(check(5, "renewal closed form", max_rel <= 0.01, max_rel, "max relative error <= 1%"));
    out.tables["renewal.csv"] = tab.str();
    return out;
  }

  if (op == "cr") {
    CROptions co;
    co.probe_t = t;
    co.max_steps = max_steps;
    const auto cr = estimate_C_R(w, mc(c, replicas, 0), co);
    s["C_R"] = to_json(cr.c_r);
    s["base"] = to_json(cr.base);
    s["probe_t"] = t;
    s["passage"] = to_json(cr.passage);
    s["consistency"] = cr.consistency;
    out.truncated_fraction = cr.c_r.truncated_fraction;
    if (lattice) {
      const double exact = exact_C_R(w);
      s["C_R_exact"] = exact;
      const double rel = std::abs(cr.c_r.value / exact - 1.0);
      s["checks"].push_back(check(5, "C_R against exact value", rel <= 0.02, rel, "relative error <= 2%"));
    }
    return out;
  }

  if (op == "passage") {
    const auto p = passage_probability(w, x, t, mc(c, replicas, 0), max_steps);
    s["x"] = x;
    s["t"] = t;
    s["passage"] = to_json(p);
    out.truncated_fraction = p.truncated_fraction;
    double cr = 0.0;
    if (lattice) {
      s["passage_exact"] = exact_passage_probability(w, x, t);
      cr = exact_C_R(w);
      s["C_R_exact"] = cr;
    } else {
      const auto e = estimate_C_R(w, mc(c, replicas, 1), {t, max_steps, 1e-12});
      cr = e.c_r.value;
      s["C_R"] = to_json(e.c_r);
    }
    const double scaled = cr * p.value * (critical ? t : 1.0);
    s["scaled"] = scaled;
    if (x == 0.0)
      s["checks"].push_back(check(6, critical ? "C_R t P(tau_t+ < tau_0-)" : "C_R P(tau_t+ < tau_0-)",
                                  scaled >= 0.9 && scaled <= 1.1, scaled, "[0.9, 1.1]"));
    return out;
  }

  if (op == "tanaka") {
    struct Acc {
      std::vector<double> end;
      std::uint64_t positive = 0, paths = 0, truncated = 0;
      MeanAccumulator weight;
      void merge(const Acc& o) {
        end.insert(end.end(), o.end.begin(), o.end.end());
        positive += o.positive;
        paths += o.paths;
        truncated += o.truncated;
        weight.merge(o.weight);
      }
    };
    const auto mean_h_est = ladder_height_mean(w, mc(c, replicas, 3), max_steps);
    const double mean_h = mean_h_est.value;
    const HatSSampler hs(w, mean_h, {max_steps});
    const auto acc = run_replicas<Acc>(mc(c, replicas, 0), [&](Acc& a, Rng& rng, std::uint64_t) {
      const auto smp = hs.sample(k, rng);
      if (smp.truncated) {
        ++a.truncated;
        a.weight.add_truncated();
        return;
      }
      ++a.paths;
      bool pos = true;
      for (std::size_t j = 1; j < smp.path.positions.size(); ++j) pos = pos && smp.path.positions[j] > 0.0;
      if (pos) ++a.positive;
      a.end.push_back(smp.path.positions[k]);
      a.weight.add(smp.weight);
    });
    s["k"] = k;
    s["paths"] = acc.paths;
    s["truncated_count"] = acc.truncated;
    out.truncated_fraction = replicas ? static_cast<double>(acc.truncated) / static_cast<double>(replicas) : 0.0;
    s["positive_fraction"] = acc.paths ? static_cast<double>(acc.positive) / static_cast<double>(acc.paths) : 0.0;
    MeanAccumulator em;
    for (double v : acc.end) em.add(v);
    s["mean_zeta_k"] = to_json(em.estimate());
    const auto wt = acc.weight.estimate();
    s["hat_s_weight"] = to_json(wt);
    s["ladder_height_mean"] = mean_h;
    s["checks"].push_back(check(7, "Tanaka positivity", acc.positive == acc.paths && acc.paths > 0,
                                static_cast<double>(acc.positive) / std::max<double>(1.0, static_cast<double>(acc.paths)),
                                "== 1"));
    // The normalizer E[H_1] is itself estimated; its error enters the z-score.
    const double se = std::hypot(wt.std_error, mean_h_est.std_error / mean_h);
    const double zw = se > 0.0 ? std::abs(wt.value - 1.0) / se : z_score(wt, 1.0);
    s["checks"].push_back(check(7, "hat-S weights average to 1", zw <= 3.0, zw, "z <= 3"));
    CsvTable tab({"zeta_k"});
    for (double v : acc.end) tab.row({v});
    out.tables["tanaka.csv"] = tab.str();
    // h-transform comparison for +-d walks, where zeta_k = d + X_{k-1}.
    if (const auto cf = closed_form_renewal(w)) {
      const double d = w.step_masses().back().value;
      const auto h = run_replicas<Acc>(mc(c, replicas, 4), [&](Acc& a, Rng& rng, std::uint64_t) {
        a.end.push_back(d + conditioned_chain(w, *cf, 0.0, k - 1, rng).back());
      });
      const auto ks = ks_two_sample(acc.end, h.end);
      s["ks_tanaka_vs_h_transform"] = {{"statistic", ks.statistic}, {"p_value", ks.p_value}};
      s["checks"].push_back(check(7, "Tanaka vs h-transform marginals (KS)", ks.p_value > 0.01, ks.p_value, "p > 0.01"));
    }
    return out;
  }

  // overshoot
  if (w.drift() < -kRegimeTolerance) throw RegimeError("overshoot: the walk drifts to -infinity");
  struct OAcc {
    MeanAccumulator a, b;
    void merge(const OAcc& o) {
      a.merge(o.a);
      b.merge(o.b);
    }
  };
  const auto acc = run_replicas<OAcc>(mc(c, replicas, 0), [&](OAcc& a, Rng& rng, std::uint64_t) {
    for (int i = 0; i < 2; ++i) {
      const double level = i ? 2.0 * t : t;
      const auto p = first_passage(w, x, level, std::nullopt, max_steps, rng);
      auto& m = i ? a.b : a.a;
      if (p.reason == StopReason::MaxSteps)
        m.add_truncated();
      else
        m.add(p.position - level);
    }
  });
  const auto e1 = acc.a.estimate(), e2 = acc.b.estimate();
  s["t"] = t;
  s["overshoot_t"] = to_json(e1);
  s["overshoot_2t"] = to_json(e2);
  s["pooled_z"] = pooled_z(e1, e2);
  out.truncated_fraction = std::max(e1.truncated_fraction, e2.truncated_fraction);
  return out;
}

inline RunOutcome run_spine(const ExperimentConfig& c, const Flags& f) {
  const auto op = f.str("op", "", {"eh", "survival", "many21", "marginal-check", "tail"});
  const auto replicas = f.count("replicas", 100000);
  const double x = f.num("x", op == "tail" ? 0.0 : 1.0);
  double t = 0.0, t2 = 0.0;
  std::uint64_t naive = 0, renewal_replicas = 20000, forward = 0;
  std::size_t n = 1;
  std::string functional;
  bool mutate = false;
  std::vector<double> grid;
  TreeCaps caps;
  if (op == "eh" || op == "survival") t = f.required("t");
  if (op == "eh") forward = f.count("forward_replicas", 0);
  if (op == "survival") {
    t2 = f.num("t2", 0.0);
    naive = f.count("naive_replicas", 0);
  }
  if (op == "survival" || op == "tail") renewal_replicas = f.count("renewal_replicas", renewal_replicas);
  if (op == "many21") {
    n = f.count("n", 1);
    functional = f.str("functional", "one", {"one", "alive"});
  }
  if (op == "marginal-check") {
    n = f.count("n", 2);
    mutate = f.boolean("mutate", false);
  }
  if (op == "tail") {
    t = f.num("t", 4.0);
    naive = f.count("naive_replicas", replicas);
    grid = f.list("grid", geometric_grid(100.0, 10000.0, std::sqrt(std::sqrt(10.0))));
  }
  if (op == "survival" || op == "tail") {
    caps.max_particles = f.count("max_particles", caps.max_particles);
    caps.max_generations = f.count("max_generations", caps.max_generations);
  }
  f.reject_unknown();
  const auto ctx = load_model(c);
  const auto& a = ctx.analytics;
  if (a.regime == Regime::OutOfScope) throw RegimeError("model is out of scope");
  const double rho = a.tilt();
  const TiltedWalk w(ctx.model, rho);
  const bool critical = a.regime == Regime::Critical;

  RunOutcome out;
  auto& s = out.summary;
  s["op"] = op;
  s["rho"] = rho;
  s["regime"] = to_string(a.regime);
  s["checks"] = json::array();

  if (op == "eh") {
    const auto e = estimate_EH(ctx.model, a, x, t, mc(c, replicas, 0));
    s["x"] = x;
    s["t"] = t;
    s["E_H"] = to_json(e);
    s["effective_sample_size"] = e.n_effective;
    s["truncated_count"] = e.truncated_count;
    out.truncated_fraction = e.truncated_fraction;
    if (finite_lattice(w)) {
      const double exact = exact_EH(w, x, t);
      s["E_H_exact"] = exact;
      s["checks"].push_back(check(2, "spine E[H(t)] vs exact", z_score(e, exact) <= 4.0, z_score(e, exact), "z <= 4"));
    }
    if (forward) {
      const auto fw = forward_EH(ctx.model, x, t, mc(c, forward, 1));
      s["E_H_forward"] = to_json(fw);
      s["pooled_z_forward"] = pooled_z(e, fw);
    }
    return out;
  }

  if (op == "survival") {
    const double top = std::max(t, t2);
    const auto R = detail::regime_renewal(w, top + 10.0, mc(c, renewal_replicas, 9));
    auto probe = [&](double level, std::uint64_t salt) {
      const auto e = estimate_survival_spine(ctx.model, a, x, level, R, mc(c, replicas, salt), caps);
      const double norm = (critical ? level : 1.0) * std::exp(rho * level);
      json j = {{"t", level},
                {"survival", to_json(e.estimate)},
                {"effective_sample_size", e.effective_sample_size},
                {"truncated_count", e.truncated_count},
                {"hit_fraction", e.hit_fraction},
                {"normalized", norm * e.estimate.value}};
      out.truncated_fraction = std::max(out.truncated_fraction, e.estimate.truncated_fraction);
      return std::pair{j, e.estimate};
    };
    auto [j1, e1] = probe(t, 0);
    s["x"] = x;
    s["probes"] = json::array({j1});
    s["estimate"] = e1.value;
    s["stderr"] = e1.std_error;
    s["effective_sample_size"] = j1["effective_sample_size"];
    s["truncated_count"] = j1["truncated_count"];
    if (naive) {
      TreeOptions opt;
      opt.probe_levels = {t};
      opt.caps = caps;
      const auto nv = run_replicas<MeanAccumulator>(mc(c, naive, 5), [&](MeanAccumulator& m, Rng& rng, std::uint64_t) {
                        KilledTreeSimulator sim(ctx.model, opt);
                        const auto& r = sim.run(x, rng);
                        if (r.truncated)
                          m.add_truncated();
                        else
                          m.add(r.H[0] > 0 ? 1.0 : 0.0);
                      }).estimate();
      const double z = pooled_z(e1, nv);
      s["naive"] = to_json(nv);
      s["pooled_z_naive"] = z;
      s["checks"].push_back(check(8, "spine vs naive survival at the overlap probe", z <= 4.0, z, "pooled z <= 4"));
    }
    if (t2 > 0.0) {
      auto [j2, e2] = probe(t2, 6);
      s["probes"].push_back(j2);
      const double ratio = j1["normalized"].get<double>() / j2["normalized"].get<double>();
      s["normalized_ratio"] = ratio;
      if (critical)
        s["checks"].push_back(check(8, "t e^{rho* t} P(H(t)>0) at t and t2", ratio >= 1.0 / 1.5 && ratio <= 1.5, ratio,
                                    "ratio in [1/1.5, 1.5]"));
      else
        s["checks"].push_back(check(8, "e^{rho+ t} P(H(t)>0) at t and t2", std::abs(ratio - 1.0) <= 0.25, ratio,
                                    "|ratio - 1| <= 0.25"));
    }
    return out;
  }

  if (op == "many21") {
    const auto F = functional == "alive" ? functionals::alive() : functionals::one();
    const auto e = many_to_one_estimate(ctx.model, rho, x, n, F, mc(c, replicas, 0));
    s["x"] = x;
    s["n"] = n;
    s["functional"] = functional;
    s["estimate"] = e.value;
    s["stderr"] = e.std_error;
    s["effective_sample_size"] = e.n_effective;
    s["truncated_count"] = e.truncated_count;
    if (ctx.model.intensity()) {
      const double exact = path_expectation(ctx.model, x, n, F);
      s["exact"] = exact;
      s["checks"].push_back(check(3, "many-to-one vs exact enumeration", z_score(e, exact) <= 4.0, z_score(e, exact),
                                  "z <= 4"));
    }
    return out;
  }

  if (op == "marginal-check") {
    const auto r = spine_marginal_check(ctx.model, rho, n, mutate);
    s["n"] = n;
    s["mutate"] = mutate;
    s["total_variation"] = r.total_variation;
    s["support_size"] = r.support_size;
    return out;
  }

  // tail: stratified spine / naive estimate of P(Z > n) and P(#L[0] > n).
  const auto R = detail::regime_renewal(w, t + 10.0, mc(c, renewal_replicas, 9));
  SplitTailOptions so;
  so.t = t;
  so.naive = mc(c, naive, 7);
  so.spine = mc(c, replicas, 8);
  so.caps = caps;
  const auto tail = progeny_tail_split(ctx.model, a, x, grid, R, so);
  s["x"] = x;
  s["t_split"] = t;
  s["survival_Z"] = to_json(tail.progeny);
  s["survival_leaves"] = to_json(tail.leaves);
  s["truncated_count"] = tail.truncated;
  out.truncated_fraction =
      static_cast<double>(tail.truncated) / std::max<double>(1.0, static_cast<double>(naive + replicas));
  CsvTable tab({"n", "P_Z_gt_n", "se_Z", "P_leaves_gt_n", "se_leaves"});
  for (std::size_t i = 0; i < grid.size(); ++i)
    tab.row({grid[i], tail.progeny.survival[i].value, tail.progeny.survival[i].std_error,
             tail.leaves.survival[i].value, tail.leaves.survival[i].std_error});
  out.tables["tail.csv"] = tab.str();
  try {
    if (critical) {
      const auto fit = tail_fit(tail.progeny, TailMode::CriticalPlateau);
      s["tail_fit"] = to_json(fit);
    } else {
      const auto fit = tail_fit(tail.progeny, TailMode::SubcriticalSlope, *a.rho_plus / *a.rho_minus);
      s["tail_fit"] = to_json(fit);
      const double rel = std::abs(fit.fitted.value / *fit.reference - 1.0);
      s["checks"].push_back(check(9, "log-log slope of P(Z>n) vs -rho+/rho-", rel <= 0.15, fit.fitted.value,
                                  "within 15% of " + fmt_double(*fit.reference)));
    }
  } catch (const Error& e) {
    s["tail_fit_error"] = e.what();
  }
  return out;
}

/// Reads `replica,Z,leaves,...,truncated` rows written by `simulate`.
inline std::pair<std::vector<double>, std::vector<bool>> read_records(const std::filesystem::path& p,
                                                                      const std::string& column) {
  std::ifstream in(p);
  if (!in) throw ConfigError("estimate: cannot read " + p.string());
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("estimate: " + p.string() + " is empty");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string h;
    while (std::getline(ss, h, ',')) header.push_back(h);
  }
  const auto col = std::find(header.begin(), header.end(), column);
  const auto tr = std::find(header.begin(), header.end(), "truncated");
  if (col == header.end()) throw ConfigError("estimate: column '" + column + "' not in " + p.string());
  const auto ci = static_cast<std::size_t>(col - header.begin());
  const auto ti = static_cast<std::size_t>(tr - header.begin());
  std::vector<double> values;
  std::vector<bool> censored;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != header.size())
      throw ConfigError("estimate: " + p.string() + ":" + std::to_string(lineno) + ": wrong number of fields");
    try {
      values.push_back(std::stod(cells[ci]));
      censored.push_back(tr != header.end() && cells[ti] == "1");
    } catch (const std::exception&) {
      throw ConfigError("estimate: " + p.string() + ":" + std::to_string(lineno) + ": not a number");
    }
  }
  return {values, censored};
}

inline RunOutcome run_estimate(const ExperimentConfig& c, const Flags& f) {
  const auto op = f.str("op", "tail", {"tail", "constants", "convolution"});
  RunOutcome out;
  auto& s = out.summary;
  s["op"] = op;
  if (op == "convolution") {
    const auto xi = f.count("xi", 1);
    const double y = f.num("y", 1.0);
    const double p = f.num("p", 2.0);
    const double scale = f.num("a", 1.0);
    const auto replicas = f.count("replicas", 1'000'000);
    const auto grid = f.list("grid", {10.0, 30.0, 100.0});
    f.reject_unknown();
    if (xi > 64) throw ConfigError("estimate: --xi must be <= 64");
    if (!(y >= 0.0) || !(p >= 1.0) || !(scale > 0.0)) throw ConfigError("estimate: need --y >= 0, --p >= 1, --a > 0");
    const auto rep = convolution_tail_check(OffspringLaw::deterministic(static_cast<unsigned>(xi)), DiscreteLaw{{y}, {1.0}},
                                            p, scale, mc(c, replicas, 0), grid);
    s["xi"] = xi;
    s["y"] = y;
    s["p"] = p;
    s["a"] = scale;
    s["limit"] = rep.limit;
    json rows = json::array();
    CsvTable tab({"t", "scaled_tail", "stderr"});
    for (std::size_t i = 0; i < rep.t_grid.size(); ++i) {
      rows.push_back({{"t", rep.t_grid[i]}, {"scaled_tail", to_json(rep.scaled_tail[i])}});
      tab.row({rep.t_grid[i], rep.scaled_tail[i].value, rep.scaled_tail[i].std_error});
    }
    s["grid"] = rows;
    out.tables["convolution.csv"] = tab.str();
    const double rel = std::abs(rep.scaled_tail.back().value / rep.limit - 1.0);
    s["relative_error"] = rel;
    s["checks"] = json::array({check(11, "t^p P(sum > t) at the largest t vs a E[sum Y^p]", rel <= 0.10, rel,
                                     "relative error <= 10%")});
    return out;
  }
  if (op == "constants") {
    const auto replicas = f.count("replicas", 100000);
    const auto max_steps = f.count("max_steps", 1'000'000);
    f.reject_unknown();
    const auto ctx = load_model(c);
    ConstantsBudget b;
    b.mc = mc(c, replicas, 0);
    b.max_steps = max_steps;
    const auto consts = estimate_constants(ctx.model, ctx.analytics, ctx.analytics.regime, b);
    s["regime"] = to_string(ctx.analytics.regime);
    for (const auto& [k, v] : consts) {
      s["constants"][k] = to_json(v);
      out.truncated_fraction = std::max(out.truncated_fraction, v.truncated_fraction);
    }
    return out;
  }
  const auto input = f.str("input", "");
  const auto column = f.str("column", "Z", {"Z", "leaves"});
  const auto mode_name = f.str("mode", "auto", {"auto", "subcritical", "critical"});
  auto grid = f.list("grid", {});
  const double min_exc = f.num("min_exceedances", 20.0);
  const double x = f.num("x", 0.0);
  const auto constants_replicas = f.count("constants_replicas", 0);
  f.reject_unknown();
  if (input.empty()) throw ConfigError("estimate: --input <records.csv> is required");
  const auto [values, censored] = read_records(input, column);
  if (values.empty()) throw ConfigError("estimate: no records in " + input);
  std::optional<ModelAnalytics> a;
  if (!c.model.is_null()) a = load_model(c).analytics;
  TailMode mode;
  if (mode_name == "auto") {
    if (!a) throw ConfigError("estimate: --mode auto needs a model");
    if (a->regime == Regime::OutOfScope) throw RegimeError("model is out of scope");
    mode = a->regime == Regime::Critical ? TailMode::CriticalPlateau : TailMode::SubcriticalSlope;
  } else {
    mode = mode_name == "critical" ? TailMode::CriticalPlateau : TailMode::SubcriticalSlope;
  }
  if (grid.empty()) {
    const double top = *std::max_element(values.begin(), values.end());
    for (double n = 2.0; n <= std::max(2.0, top); n *= 2.0) grid.push_back(n);
  }
  std::sort(grid.begin(), grid.end());
  const auto curve = survival_table(values, censored, grid);
  std::optional<double> ref;
  if (a && a->rho_plus && mode == TailMode::SubcriticalSlope) ref = *a->rho_plus / *a->rho_minus;
  const auto fit = tail_fit(curve, mode, ref, {min_exc, 4});
  std::uint64_t cens = 0;
  for (bool b : censored) cens += b;
  out.truncated_fraction = static_cast<double>(cens) / static_cast<double>(values.size());
  s["input"] = input;
  s["column"] = column;
  s["records"] = values.size();
  s["truncated_count"] = cens;
  s["survival"] = to_json(curve);
  s["tail_fit"] = to_json(fit);
  CsvTable tab({"n", "survival", "stderr", "normalized"});
  for (std::size_t i = 0; i < curve.grid.size(); ++i) {
    const double n = curve.grid[i];
    const double norm = mode == TailMode::CriticalPlateau ? n * std::log(n) * std::log(n) * curve.survival[i].value
                                                          : curve.survival[i].value;
    tab.row({n, curve.survival[i].value, curve.survival[i].std_error, norm});
  }
  out.tables["tail.csv"] = tab.str();
  if (mode == TailMode::CriticalPlateau && a && a->regime == Regime::Critical && constants_replicas > 0) {
    // The plateau should sit at c_crit R(x) e^{rho* x}.
    ConstantsBudget b;
    b.mc = mc(c, constants_replicas, 21);
    const auto consts = estimate_constants(load_model(c).model, *a, Regime::Critical, b);
    const TiltedWalk w(load_model(c).model, a->rho_star);
    const auto R = detail::regime_renewal(w, x + 10.0, mc(c, 20000, 22));
    const double level = consts.at("c_crit").value * R(x) * std::exp(a->rho_star * x);
    const double ratio = fit.fitted.value / level;
    s["x"] = x;
    s["c_crit"] = to_json(consts.at("c_crit"));
    s["predicted_plateau"] = level;
    s["plateau_ratio"] = ratio;
    s["checks"] = json::array(
        {check(10, "n (log n)^2 P(Z>n) spread over the top decade", fit.goodness_of_fit <= 2.0, fit.goodness_of_fit,
               "max/min <= 2"),
         check(10, "plateau vs c_crit R(x) e^{rho* x}", ratio >= 0.5 && ratio <= 2.0, ratio, "ratio in [1/2, 2]")});
  }
  return out;
}

inline RunOutcome run_oracle(const ExperimentConfig& c, const Flags& f) {
  const auto op = f.str("op", "", {"eh", "passage", "escape", "undershoot", "kstep", "enumerate", "many21"});
  const auto tilt = f.str("tilt", "auto", {"auto", "star", "plus", "minus"});
  const double x = f.num("x", op == "enumerate" || op == "many21" ? 0.0 : 1.0);
  double t = 0.0;
  std::size_t k = 0;
  std::string functional = "one";
  bool killed = false;
  if (op == "eh" || op == "passage") t = f.required("t");
  if (op == "kstep") k = f.count("k", 10);
  if (op == "enumerate") {
    k = f.count("depth", 2);
    killed = f.boolean("killed", false);
  }
  if (op == "many21") {
    k = f.count("n", 1);
    functional = f.str("functional", "one", {"one", "alive"});
  }
  f.reject_unknown();
  const auto ctx = load_model(c);
  RunOutcome out;
  auto& s = out.summary;
  s["op"] = op;
  s["x"] = x;
  if (op == "enumerate") {
    const double rho = ctx.analytics.regime == Regime::OutOfScope ? 1.0 : ctx.analytics.tilt();
    const auto r = enumerate_tree_expectation(ctx.model, x, k,
                                              {{"count", generation_functionals::count()},
                                               {"W", generation_functionals::additive(rho)},
                                               {"dW", generation_functionals::derivative(rho)},
                                               {"W_squared", generation_functionals::additive_squared(rho)}},
                                              killed);
    s["depth"] = k;
    s["killed"] = killed;
    s["rho"] = rho;
    s["expectations"] = r.expectations;
    s["outcome_count"] = r.outcome_count;
    s["total_probability"] = r.total_probability;
    return out;
  }
  if (op == "many21") {
    s["n"] = k;
    s["functional"] = functional;
    s["exact"] = path_expectation(ctx.model, x, k, functional == "alive" ? functionals::alive() : functionals::one());
    return out;
  }
  const double rho = tilt_for(ctx.analytics, tilt);
  const TiltedWalk w(ctx.model, rho);
  s["rho"] = rho;
  if (op == "eh") {
    s["t"] = t;
    s["exact"] = exact_EH(w, x, t);
  } else if (op == "passage") {
    s["t"] = t;
    s["exact"] = exact_passage_probability(w, x, t);
  } else if (op == "escape") {
    const auto e = exact_escape_probability(w, x);
    s["exact"] = e.value;
    s["error_bound"] = e.error_bound;
  } else if (op == "undershoot") {
    const double H = 2000.0 * detail::walk_span(w);
    s["height"] = H;
    s["mean_undershoot"] = exact_conditional_undershoot(w, [](double y) { return y; }, H);
    s["exp_moment"] = exact_conditional_undershoot(w, [&](double y) { return std::exp(rho * y); }, H);
  } else {
    const auto law = exact_kstep_law(w, x, k);
    const double h = detail::walk_span(w);
    json rows = json::array();
    for (const auto& [j, p] : law) rows.push_back({{"position", x + static_cast<double>(j) * h}, {"probability", p}});
    s["k"] = k;
    s["law"] = rows;
  }
  return out;
}

inline RunOutcome run_report(const ExperimentConfig& c, const Flags& f) {
  const auto inputs = f.strings("inputs");
  f.reject_unknown();
  if (inputs.empty()) throw ConfigError("report: --inputs <summary.json or run dir>[,...] is required");
  std::map<int, std::vector<json>> by_criterion;
  for (const auto& in : inputs) {
    std::filesystem::path p(in);
    if (std::filesystem::is_directory(p)) p /= "summary.json";
    std::ifstream is(p);
    if (!is) throw ConfigError("report: cannot read " + p.string());
    json j;
    try {
      j = json::parse(is);
    } catch (const json::parse_error& e) {
      throw ConfigError("report: " + p.string() + ": " + e.what());
    }
    const json& checks = j.contains("summary") ? j["summary"]["checks"] : j["checks"];
    if (!checks.is_array()) continue;
    for (auto ch : checks) {
      ch["source"] = p.string();
      by_criterion[ch["criterion"].get<int>()].push_back(ch);
    }
  }
  RunOutcome out;
  json rows = json::array();
  std::string md = "| criterion | status | checks | detail |\n|---|---|---|---|\n";
  bool all = true;
  for (int k = 1; k <= 12; ++k) {
    const auto it = by_criterion.find(k);
    std::string status = "not run", detail;
    std::size_t n_checks = 0;
    if (it != by_criterion.end()) {
      bool pass = true;
      for (const auto& ch : it->second) {
        pass = pass && ch["pass"].get<bool>();
        if (!detail.empty()) detail += "; ";
        detail += ch["name"].get<std::string>() + " = " + fmt_double(ch["value"].get<double>()) + " (" +
                  ch["bound"].get<std::string>() + ")";
      }
      n_checks = it->second.size();
      status = pass ? "pass" : "FAIL";
      all = all && pass;
      rows.push_back({{"criterion", k}, {"status", status}, {"checks", it->second}});
    } else {
      rows.push_back({{"criterion", k}, {"status", status}, {"checks", json::array()}});
    }
    md += "| " + std::to_string(k) + " | " + status + " | " + std::to_string(n_checks) + " | " + detail + " |\n";
  }
  out.summary["criteria"] = rows;
  out.summary["all_run_pass"] = all;
  out.tables["report.md"] = md;
  return out;
}

}  // namespace detail

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> c{"analyze-model", "simulate", "walk",  "spine",
                                          "estimate",      "oracle",   "report"};
  return c;
}

/// Executes the configured subcommand. Writes summary.json, the CSV tables and
/// MANIFEST when output_dir is set. Throws ConfigError/SchemaError/RegimeError
/// for invalid configurations.
inline RunOutcome run(const ExperimentConfig& c) {
  const detail::Flags f(c.flags, c.command);
  RunOutcome out;
  if (c.command == "analyze-model")
    out = detail::run_analyze(c, f);
  else if (c.command == "simulate")
    out = detail::run_simulate(c, f);
  else if (c.command == "walk")
    out = detail::run_walk(c, f);
  else if (c.command == "spine")
    out = detail::run_spine(c, f);
  else if (c.command == "estimate")
    out = detail::run_estimate(c, f);
  else if (c.command == "oracle")
    out = detail::run_oracle(c, f);
  else if (c.command == "report")
    out = detail::run_report(c, f);
  else
    throw ConfigError("unknown command '" + c.command + "'");

  out.exit_code = out.truncated_fraction > 0.5 ? kExitTruncated : kExitOk;
  json summary = {{"command", c.command},
                  {"config_hash", config_hash(c)},
                  {"seed", c.seed},
                  {"seed_schedule_id", std::string(kSeedScheduleId)},
                  {"summary", out.summary}};
  out.summary = summary;

  if (!c.output_dir.empty()) {
    std::filesystem::create_directories(c.output_dir);
    auto write = [&](const std::string& name, const std::string& content) {
      std::ofstream os(c.output_dir / name, std::ios::binary);
      if (!os) throw ConfigError("cannot write " + (c.output_dir / name).string());
      os << content;
    };
    write("summary.json", out.summary.dump(2) + "\n");
    std::vector<std::string> files{"summary.json"};
    for (const auto& [name, content] : out.tables) {
      write(name, content);
      files.push_back(name);
    }
    const json manifest = {{"config_hash", config_hash(c)},
                           {"code_version", std::string(kCodeVersion)},
                           {"seed", c.seed},
                           {"seed_schedule_id", std::string(kSeedScheduleId)},
                           {"workers", resolve_workers(c.workers)},
                           {"config", to_json(c)},
                           {"truncation", {{"truncated_fraction", out.truncated_fraction},
                                           {"cap_breach_dominated", out.exit_code == kExitTruncated}}},
                           {"files", files}};
    write("MANIFEST", manifest.dump(2) + "\n");
  }
  return out;
}

}  // namespace kbrw
