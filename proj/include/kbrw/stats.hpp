#pragma once

// Survival tables, tail fits, first-passage constants, Yaglom diagnostics and
// the Pareto convolution check.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kbrw/brw.hpp"
#include "kbrw/error.hpp"
#include "kbrw/estimate.hpp"
#include "kbrw/ks.hpp"
#include "kbrw/model.hpp"
#include "kbrw/parallel.hpp"
#include "kbrw/spine.hpp"
#include "kbrw/walk.hpp"

namespace kbrw {

// ---------------------------------------------------------------------------
// Survival tables.

struct SurvivalCurve {
  std::vector<double> grid;
  std::vector<EstimateWithCI> survival;
  /// Effective number of exceedances, (p / se)^2 (the raw count for plain MC).
  std::vector<double> exceedances;
  /// Grid points at or above the partial count of some censored record.
  std::vector<bool> censored;
};

/// Streaming P(value > n) on a grid. A censored value v is a lower bound for
/// the true value: it counts as an exceedance for n < v and flags n >= v.
class SurvivalAccumulator {
 public:
  SurvivalAccumulator() = default;
  explicit SurvivalAccumulator(std::vector<double> grid)
      : grid_(std::move(grid)), exceed_(grid_.size() + 1, 0), censored_(grid_.size() + 1, 0) {}

  void add(double value, bool censored = false) {
    ++n_;
    const auto idx = static_cast<std::size_t>(std::lower_bound(grid_.begin(), grid_.end(), value) - grid_.begin());
    ++exceed_[0];
    --exceed_[idx];
    if (censored) ++censored_[idx];
  }
  void add_truncated() { ++dropped_; }

  void merge(const SurvivalAccumulator& o) {
    if (grid_.empty()) *this = SurvivalAccumulator(o.grid_);
    n_ += o.n_;
    dropped_ += o.dropped_;
    for (std::size_t i = 0; i < exceed_.size(); ++i) {
      exceed_[i] += o.exceed_[i];
      censored_[i] += o.censored_[i];
    }
  }

  std::uint64_t count() const { return n_; }

  SurvivalCurve curve() const {
    SurvivalCurve c;
    c.grid = grid_;
    std::int64_t run = 0, cens = 0;
    std::uint64_t cens_total = 0;
    for (auto v : censored_) cens_total += static_cast<std::uint64_t>(v);
    for (std::size_t i = 0; i < grid_.size(); ++i) {
      run += exceed_[i];
      cens += censored_[i];
      EstimateWithCI e;
      const double N = static_cast<double>(n_);
      e.value = N > 0 ? static_cast<double>(run) / N : 0.0;
      e.std_error = N > 0 ? std::sqrt(e.value * (1.0 - e.value) / N) : 0.0;
      e.n_effective = N;
      e.replicas = n_ + dropped_;
      e.truncated_count = cens_total + dropped_;
      e.truncated_fraction = e.replicas ? static_cast<double>(e.truncated_count) / static_cast<double>(e.replicas) : 0.0;
      c.survival.push_back(e);
      c.exceedances.push_back(static_cast<double>(run));
      c.censored.push_back(cens > 0);
    }
    return c;
  }

 private:
  std::vector<double> grid_;
  std::vector<std::int64_t> exceed_;
  std::vector<std::int64_t> censored_;
  std::uint64_t n_ = 0;
  std::uint64_t dropped_ = 0;
};

inline SurvivalCurve survival_table(const std::vector<double>& values, const std::vector<bool>& censored,
                                    const std::vector<double>& grid) {
  SurvivalAccumulator acc(grid);
  for (std::size_t i = 0; i < values.size(); ++i) acc.add(values[i], i < censored.size() && censored[i]);
  return acc.curve();
}

/// Curve from arbitrary per-point estimates (e.g. importance-weighted).
inline SurvivalCurve survival_from_estimates(const std::vector<double>& grid, const std::vector<EstimateWithCI>& est) {
  SurvivalCurve c;
  c.grid = grid;
  c.survival = est;
  for (const auto& e : est) {
    c.exceedances.push_back(e.std_error > 0.0 ? (e.value / e.std_error) * (e.value / e.std_error)
                                              : (e.value > 0.0 ? std::numeric_limits<double>::infinity() : 0.0));
    c.censored.push_back(false);
  }
  return c;
}

/// Geometric grid lo * ratio^k up to hi (inclusive within rounding).
inline std::vector<double> geometric_grid(double lo, double hi, double ratio) {
  std::vector<double> g;
  for (double v = lo; v <= hi * (1.0 + 1e-9); v *= ratio) g.push_back(v);
  return g;
}

// ---------------------------------------------------------------------------
// Tail fits.

enum class TailMode { SubcriticalSlope, CriticalPlateau };

inline const char* to_string(TailMode m) { return m == TailMode::SubcriticalSlope ? "subcritical_slope" : "critical_plateau"; }

struct TailFitReport {
  TailMode mode = TailMode::SubcriticalSlope;
  std::vector<double> grid;
  std::vector<EstimateWithCI> survival;
  /// Slope of log P vs log n, or the plateau level of n (log n)^2 P.
  EstimateWithCI fitted;
  /// chi^2 per degree of freedom (slope) or max/min over the top decade (plateau).
  double goodness_of_fit = 0.0;
  /// n (log n)^2 P(Z > n) (plateau mode).
  std::vector<double> normalized;
  std::optional<double> reference;
};

struct TailFitOptions {
  double min_exceedances = 20.0;
  std::size_t min_points = 4;
};

inline TailFitReport tail_fit(const SurvivalCurve& curve, TailMode mode, std::optional<double> rho_ratio = std::nullopt,
                              const TailFitOptions& opt = {}) {
  std::vector<std::size_t> use;
  for (std::size_t i = 0; i < curve.grid.size(); ++i)
    if (curve.exceedances[i] >= opt.min_exceedances && curve.survival[i].value > 0.0) use.push_back(i);
  if (use.size() < opt.min_points) {
    std::string achievable;
    for (auto i : use) achievable += (achievable.empty() ? "" : ",") + std::to_string(curve.grid[i]);
    throw Error("tail_fit: only " + std::to_string(use.size()) + " grid points have >= " +
                std::to_string(opt.min_exceedances) + " exceedances; achievable grid: [" + achievable + "]");
  }
  for (std::size_t k = 1; k < use.size(); ++k)
    if (!(curve.grid[use[k]] > curve.grid[use[k - 1]])) throw Error("tail_fit: grid must be strictly increasing");

  TailFitReport rep;
  rep.mode = mode;
  for (auto i : use) {
    rep.grid.push_back(curve.grid[i]);
    rep.survival.push_back(curve.survival[i]);
  }
  if (rho_ratio) rep.reference = mode == TailMode::SubcriticalSlope ? -*rho_ratio : *rho_ratio;

  if (mode == TailMode::SubcriticalSlope) {
    const std::size_t k = rep.grid.size();
    std::vector<double> x(k), y(k), w(k);
    bool exact = false;
    for (std::size_t i = 0; i < k; ++i) {
      x[i] = std::log(rep.grid[i]);
      y[i] = std::log(rep.survival[i].value);
      const double rel = rep.survival[i].std_error / rep.survival[i].value;
      if (rel == 0.0) exact = true;
      w[i] = rel > 0.0 ? 1.0 / (rel * rel) : 1.0;
    }
    if (exact) std::fill(w.begin(), w.end(), 1.0);
    double sw = 0, sx = 0, sy = 0;
    for (std::size_t i = 0; i < k; ++i) {
      sw += w[i];
      sx += w[i] * x[i];
      sy += w[i] * y[i];
    }
    const double mx = sx / sw, my = sy / sw;
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < k; ++i) {
      sxx += w[i] * (x[i] - mx) * (x[i] - mx);
      sxy += w[i] * (x[i] - mx) * (y[i] - my);
    }
    const double slope = sxy / sxx;
    double chi2 = 0;
    for (std::size_t i = 0; i < k; ++i) {
      const double r = y[i] - (my + slope * (x[i] - mx));
      chi2 += w[i] * r * r;
    }
    rep.fitted.value = slope;
    // Residual-based error when weights are unit, model-based otherwise.
    rep.fitted.std_error = exact ? std::sqrt(chi2 / std::max<double>(1.0, static_cast<double>(k) - 2.0) / sxx)
                                 : std::sqrt(1.0 / sxx);
    rep.fitted.n_effective = static_cast<double>(k);
    rep.goodness_of_fit = chi2 / std::max<double>(1.0, static_cast<double>(k) - 2.0);
    return rep;
  }

  // Plateau: mean over the top half-decade, spread over the top decade.
  const double n_max = rep.grid.back();
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  MeanAccumulator plateau;
  double var_sum = 0.0;
  for (std::size_t i = 0; i < rep.grid.size(); ++i) {
    const double n = rep.grid[i];
    const double f = n * std::log(n) * std::log(n);
    const double v = f * rep.survival[i].value;
    rep.normalized.push_back(v);
    if (n >= n_max / 10.0 * (1.0 - 1e-9)) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (n >= n_max / std::sqrt(10.0) * (1.0 - 1e-9)) {
      plateau.add(v);
      var_sum += f * f * rep.survival[i].std_error * rep.survival[i].std_error;
    }
  }
  rep.fitted.value = plateau.mean();
  // Adjacent survival points share exceedances; this treats them as
  // independent and so understates nothing worse than a factor sqrt(k).
  rep.fitted.std_error = std::sqrt(var_sum) / static_cast<double>(plateau.count());
  rep.fitted.n_effective = static_cast<double>(plateau.count());
  rep.goodness_of_fit = hi / lo;
  return rep;
}

// ---------------------------------------------------------------------------
// First-passage constants.

struct ConstantsBudget {
  McConfig mc;
  std::uint64_t max_steps = 1'000'000;
  double escape_eps = 1e-12;
};

/// c'_crit, c_crit, C_R and c* (critical, c* in rho*-rescaled units), or
/// Q(tau_0^- = inf), C_R and c*_sub (subcritical).
inline std::map<std::string, EstimateWithCI> estimate_constants(const Model& model, const ModelAnalytics& a,
                                                                Regime requested, const ConstantsBudget& b) {
  if (a.regime == Regime::OutOfScope) throw RegimeError("model is out of scope: no constants");
  if (requested != a.regime)
    throw RegimeError(std::string("requested ") + to_string(requested) + " constants for a " + to_string(a.regime) +
                      " model");
  std::map<std::string, EstimateWithCI> out;
  McConfig c1 = b.mc, c2 = b.mc;
  c1.seed = derive_seed(b.mc.seed, 11);
  c2.seed = derive_seed(b.mc.seed, 12);

  // Q[e^{-r S_{tau_0^-}}] - 1 and Q[-S_{tau_0^-}] for the walk tilted by r.
  auto undershoot_pair = [&](double r, const McConfig& cfg) {
    const TiltedWalk walk(model, r);
    struct Acc {
      MeanAccumulator expo, lin;
      void merge(const Acc& o) {
        expo.merge(o.expo);
        lin.merge(o.lin);
      }
    };
    auto acc = run_replicas<Acc>(cfg, [&](Acc& s, Rng& rng, std::uint64_t) {
      const auto p = first_passage(walk, 0.0, std::nullopt, 0.0, b.max_steps, rng);
      if (p.reason == StopReason::MaxSteps) {
        s.expo.add_truncated();
        s.lin.add_truncated();
        return;
      }
      s.expo.add(std::exp(-r * p.position) - 1.0);
      s.lin.add(-p.position);
    });
    return std::pair{acc.expo.estimate(), acc.lin.estimate()};
  };

  if (a.regime == Regime::Critical) {
    const double r = a.rho_star;
    auto [cprime, under] = undershoot_pair(r, c1);
    out["c_crit_prime"] = cprime;
    auto c = cprime;
    c.value /= (a.mean_offspring - 1.0);
    c.std_error /= (a.mean_offspring - 1.0);
    out["c_crit"] = c;
    EstimateWithCI one;
    one.value = 1.0;
    auto cr = ratio_estimate(one, under);
    cr.replicas = under.replicas;
    cr.truncated_count = under.truncated_count;
    cr.truncated_fraction = under.truncated_fraction;
    out["C_R"] = cr;
    out["undershoot_mean"] = under;
    // In units where rho* = 1 the undershoot is r * (-S).
    auto scaled = under;
    scaled.value *= r;
    scaled.std_error *= r;
    out["c_star"] = ratio_estimate(cprime, scaled);
    return out;
  }

  const TiltedWalk plus(model, *a.rho_plus);
  const auto escape = escape_probability(plus, c1, b.escape_eps, b.max_steps);
  out["Q_escape"] = escape;
  EstimateWithCI one;
  one.value = 1.0;
  auto cr = ratio_estimate(one, escape);
  cr.replicas = escape.replicas;
  cr.truncated_count = escape.truncated_count;
  out["C_R"] = cr;
  const double rm = *a.rho_minus;
  auto [num, under] = undershoot_pair(rm, c2);
  out["rho_minus_undershoot_mean"] = under;
  auto scaled = under;
  scaled.value *= rm;
  scaled.std_error *= rm;
  out["c_star_sub"] = ratio_estimate(num, scaled);
  return out;
}

// ---------------------------------------------------------------------------
// Yaglom diagnostics.

/// [R(t1) e^{rho t1} P(H(t1)>0)] / [R(t2) e^{rho t2} P(H(t2)>0)], R(t) = t
/// (critical) or 1 (subcritical).
inline EstimateWithCI survival_normalization_ratio(double t1, const EstimateWithCI& p1, double t2,
                                                   const EstimateWithCI& p2, double rho, bool critical) {
  auto norm = [&](double t, EstimateWithCI p) {
    const double f = (critical ? t : 1.0) * std::exp(rho * t);
    p.value *= f;
    p.std_error *= f;
    return p;
  };
  return ratio_estimate(norm(t1, p1), norm(t2, p2));
}

struct YaglomReport {
  KsResult min_overshoot;
  KsResult log_mass;
  EstimateWithCI ratio;
};

inline YaglomReport yaglom_diagnostic(const YaglomDataset& a, const YaglomDataset& b, bool critical) {
  if (a.samples.empty() || b.samples.empty()) throw Error("yaglom_diagnostic: empty dataset");
  std::vector<double> ma, mb, la, lb;
  for (const auto& s : a.samples) {
    ma.push_back(s.min_overshoot);
    la.push_back(std::log(s.tilted_mass));
  }
  for (const auto& s : b.samples) {
    mb.push_back(s.min_overshoot);
    lb.push_back(std::log(s.tilted_mass));
  }
  YaglomReport r;
  r.min_overshoot = ks_two_sample(ma, mb);
  r.log_mass = ks_two_sample(la, lb);
  r.ratio = survival_normalization_ratio(a.t, a.survival, b.t, b.survival, a.rho, critical);
  return r;
}

// ---------------------------------------------------------------------------
// Heavy-tailed random sums: sum_{i <= xi} Y_i Gamma_i with P(Gamma > s) = a s^{-p}.

struct ConvolutionReport {
  std::vector<double> t_grid;
  /// t^p P(sum > t).
  std::vector<EstimateWithCI> scaled_tail;
  double limit = 0.0;
};

/// Y_law must be a non-negative finitely supported law.
inline ConvolutionReport convolution_tail_check(const OffspringLaw& xi, const DiscreteLaw& Y, double p, double a,
                                                const McConfig& cfg, std::vector<double> t_grid) {
  if (!(p >= 1.0) || !(a > 0.0)) throw Error("convolution_tail_check needs p >= 1 and a > 0");
  for (double y : Y.values)
    if (y < 0.0) throw Error("convolution_tail_check: Y must be non-negative");
  const Model ylaw(OffspringLaw::deterministic(2), DisplacementLaw{Y});
  double ey = 0.0;
  for (std::size_t i = 0; i < Y.values.size(); ++i) ey += Y.probs[i] * std::pow(Y.values[i], p);
  std::sort(t_grid.begin(), t_grid.end());
  ConvolutionReport rep;
  rep.t_grid = t_grid;
  rep.limit = a * xi.mean() * ey;
  const double scale = std::pow(a, 1.0 / p);
  auto acc = run_replicas<SurvivalAccumulator>(
      cfg,
      [&](SurvivalAccumulator& s, Rng& rng, std::uint64_t) {
        const unsigned k = xi.sample(rng);
        double sum = 0.0;
        for (unsigned i = 0; i < k; ++i) {
          const double u = 1.0 - uniform01(rng);
          sum += ylaw.sample_displacement(rng) * scale * std::pow(u, -1.0 / p);
        }
        s.add(sum);
      },
      SurvivalAccumulator(t_grid));
  const auto curve = acc.curve();
  for (std::size_t i = 0; i < t_grid.size(); ++i) {
    auto e = curve.survival[i];
    const double f = std::pow(t_grid[i], p);
    e.value *= f;
    e.std_error *= f;
    rep.scaled_tail.push_back(e);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Total progeny and leaves tails.

struct ProgenyTail {
  SurvivalCurve progeny;
  SurvivalCurve leaves;
  std::uint64_t truncated = 0;
};

struct ProgenyTailAcc {
  SurvivalAccumulator z, l;
  std::uint64_t truncated = 0;
  void merge(const ProgenyTailAcc& o) {
    z.merge(o.z);
    l.merge(o.l);
    truncated += o.truncated;
  }
};

/// Plain Monte Carlo P_x(Z > n) and P_x(#L[0] > n). Truncated trees enter as
/// censored at their partial counts.
inline ProgenyTail progeny_tail_naive(const Model& model, double x, const std::vector<double>& grid,
                                      const McConfig& cfg, const TreeCaps& caps = {}) {
  TreeOptions opt;
  opt.caps = caps;
  ProgenyTailAcc init{SurvivalAccumulator(grid), SurvivalAccumulator(grid), 0};
  auto acc = run_replicas<ProgenyTailAcc>(
      cfg,
      [&](ProgenyTailAcc& a, Rng& rng, std::uint64_t) {
        KilledTreeSimulator sim(model, opt);
        const auto& r = sim.run(x, rng);
        a.z.add(static_cast<double>(r.total_progeny_Z), r.truncated);
        a.l.add(static_cast<double>(r.leaf_count), r.truncated);
        if (r.truncated) ++a.truncated;
      },
      init);
  return {acc.z.curve(), acc.l.curve(), acc.truncated};
}

struct SplitTailOptions {
  /// Level separating the two strata.
  double t = 6.0;
  McConfig naive;
  McConfig spine;
  TreeCaps caps;
  std::uint64_t max_steps = 10'000'000;
};

/// P_x(Z > n) = P_x(Z > n, H(t) = 0) + P_x(Z > n, H(t) > 0).
///
/// The first stratum is plain Monte Carlo. The second uses the spine
/// decomposition over the line H(t) with weight
/// e^{rho x} R(S_tau) / sum_{u in H(t)} R(V(u)) e^{rho V(u)}: the spine runs
/// under Q_x to tau_t^+, and every sibling and the spine particle at S_tau
/// then start independent killed P-trees, run to extinction.
inline ProgenyTail progeny_tail_split(const Model& model, const ModelAnalytics& a, double x,
                                      const std::vector<double>& grid, const RenewalTable& R,
                                      const SplitTailOptions& o) {
  const double t = o.t;
  TreeOptions full;
  full.caps = o.caps;
  full.probe_levels = {t};
  full.stop_at_top_level = false;
  full.collect_overshoots = true;

  ProgenyTailAcc init{SurvivalAccumulator(grid), SurvivalAccumulator(grid), 0};
  auto naive = run_replicas<ProgenyTailAcc>(
      o.naive,
      [&](ProgenyTailAcc& acc, Rng& rng, std::uint64_t) {
        KilledTreeSimulator sim(model, full);
        const auto& r = sim.run(x, rng);
        if (r.truncated) {
          ++acc.truncated;
          acc.z.add_truncated();
          acc.l.add_truncated();
          return;
        }
        const bool below = r.H[0] == 0;
        acc.z.add(below ? static_cast<double>(r.total_progeny_Z) : 0.0);
        acc.l.add(below ? static_cast<double>(r.leaf_count) : 0.0);
      },
      init);

  const double rho = a.tilt();
  const SpineSampler sampler(model, rho);
  struct SpineAcc {
    VectorAccumulator z, l;
    std::uint64_t truncated = 0;
    void merge(const SpineAcc& o) {
      z.merge(o.z);
      l.merge(o.l);
      truncated += o.truncated;
    }
  };
  const std::size_t m = grid.size();
  auto spine = run_replicas<SpineAcc>(
      o.spine,
      [&](SpineAcc& acc, Rng& rng, std::uint64_t) {
        detail::SpineRun run;
        SpineStep step;
        detail::run_spine(sampler, x, t, o.max_steps, rng, run, step);
        std::vector<double> zv(m, 0.0), lv(m, 0.0);
        if (run.truncated) {
          ++acc.truncated;
          acc.z.add_truncated();
          acc.l.add_truncated();
          return;
        }
        if (!run.hit) {
          acc.z.add(zv);
          acc.l.add(lv);
          return;
        }
        KilledTreeSimulator sim(model, full);
        double Z = static_cast<double>(run.spine.size() - 1), L = 0.0, denom = 0.0;
        auto grow = [&](double y) {
          if (y < 0.0) {
            L += 1.0;
            return true;
          }
          const auto& r = sim.run(y, rng);
          if (r.truncated) return false;
          Z += static_cast<double>(r.total_progeny_Z);
          L += static_cast<double>(r.leaf_count);
          for (double ov : r.overshoots[0]) denom += R(t + ov) * std::exp(rho * ov);
          return true;
        };
        bool ok = grow(run.spine.back());
        for (double y : run.sibling_starts) ok = ok && grow(y);
        if (!ok) {
          ++acc.truncated;
          acc.z.add_truncated();
          acc.l.add_truncated();
          return;
        }
        const double w = std::exp(rho * (x - t)) * R(run.spine.back()) / denom;
        for (std::size_t i = 0; i < m; ++i) {
          zv[i] = Z > grid[i] ? w : 0.0;
          lv[i] = L > grid[i] ? w : 0.0;
        }
        acc.z.add(zv);
        acc.l.add(lv);
      },
      SpineAcc{VectorAccumulator(m), VectorAccumulator(m), 0});

  const auto nz = naive.z.curve(), nl = naive.l.curve();
  std::vector<EstimateWithCI> ez, el;
  for (std::size_t i = 0; i < m; ++i) {
    auto combine = [&](const EstimateWithCI& a1, const EstimateWithCI& b1) {
      EstimateWithCI e = b1;
      e.value = a1.value + b1.value;
      e.std_error = std::hypot(a1.std_error, b1.std_error);
      e.replicas = a1.replicas + b1.replicas;
      e.truncated_count = a1.truncated_count + b1.truncated_count;
      e.truncated_fraction = e.replicas ? static_cast<double>(e.truncated_count) / static_cast<double>(e.replicas) : 0.0;
      return e;
    };
    ez.push_back(combine(nz.survival[i], spine.z.estimate(i)));
    el.push_back(combine(nl.survival[i], spine.l.estimate(i)));
  }
  return {survival_from_estimates(grid, ez), survival_from_estimates(grid, el), naive.truncated + spine.truncated};
}

// ---------------------------------------------------------------------------
// Tail of M_infinity^{(rho-)} by population dynamics.

/// Fixed-point iteration of M = sum_{|u|=1} e^{rho- V(u)} M^{(u)}: a pool of
/// `pool_size` values, each generation rebuilt by resampling children's values
/// from the previous pool. After n generations the pool approximates the law of
/// M_n^{(rho-)} started from M_0 = 1.
inline std::vector<double> rho_minus_martingale_pool(const Model& model, const ModelAnalytics& a,
                                                     std::size_t pool_size, std::size_t generations, std::uint64_t seed) {
  if (!a.rho_minus) throw RegimeError("M^(rho-) needs a subcritical model");
  const double rm = *a.rho_minus;
  std::vector<double> pool(pool_size, 1.0), next(pool_size);
  std::vector<double> kids;
  for (std::size_t g = 0; g < generations; ++g) {
    Rng rng = stream_for(seed, g);
    std::uniform_int_distribution<std::size_t> pick(0, pool_size - 1);
    for (std::size_t i = 0; i < pool_size; ++i) {
      model.sample_offspring(rng, kids);
      double m = 0.0;
      for (double d : kids) m += std::exp(rm * d) * pool[pick(rng)];
      next[i] = m;
    }
    pool.swap(next);
  }
  return pool;
}

}  // namespace kbrw
