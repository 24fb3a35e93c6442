#pragma once

// The spine random walk under an exponential tilt, its first passages,
// ladder structure and renewal function, and the walk conditioned to stay
// positive (Tanaka's gluing construction and the Doob h-transform).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "kbrw/error.hpp"
#include "kbrw/estimate.hpp"
#include "kbrw/model.hpp"
#include "kbrw/parallel.hpp"
#include "kbrw/rng.hpp"

namespace kbrw {

/// Random walk whose step law is e^{rho z} E[L(dz)].
class TiltedWalk {
 public:
  TiltedWalk(const Model& model, double rho, double mass_tol = 1e-8) : model_(model), rho_(rho) {
    const auto p = model_.psi_all(rho);
    if (std::abs(p.value) > mass_tol)
      throw RegimeError("tilt rho = " + std::to_string(rho) + " has mass e^psi = " + std::to_string(std::exp(p.value)) +
                        ", not a probability");
    drift_ = p.d1;
    if (model_.is_gaussian()) {
      const auto& g = model_.gaussian();
      mean_ = g.mean + rho * g.sd * g.sd;
      sd_ = g.sd;
    } else {
      double total = 0.0;
      const auto intensity = *model_.intensity();
      for (const auto& m : intensity) {
        const double w = m.weight * std::exp(rho * m.value);
        steps_.push_back({m.value, w});
        total += w;
      }
      double acc = 0.0;
      for (auto& s : steps_) {
        s.weight /= total;
        cumulative_.push_back(acc += s.weight);
      }
      cumulative_.back() = 1.0;
    }
  }

  const Model& model() const { return model_; }
  double rho() const { return rho_; }
  double drift() const { return drift_; }
  bool is_gaussian() const { return model_.is_gaussian(); }
  bool is_lattice() const { return model_.is_lattice(); }
  double gaussian_mean() const { return mean_; }
  double gaussian_sd() const { return sd_; }

  /// Exact step p.m.f. (finite support only).
  const std::vector<PointMass>& step_masses() const {
    if (is_gaussian()) throw ModelError("step p.m.f. requested for a continuous step law");
    return steps_;
  }

  double step_mean() const {
    if (is_gaussian()) return mean_;
    double m = 0.0;
    for (const auto& s : steps_) m += s.value * s.weight;
    return m;
  }

  double sample_step(Rng& rng) const {
    if (is_gaussian()) return mean_ + sd_ * rng.normal();
    const double u = uniform01(rng);
    std::size_t i = 0;
    while (u >= cumulative_[i]) ++i;
    return steps_[i].value;
  }

  /// theta > 0 with E[e^{-theta X}] = 1 when the drift is positive, so that
  /// P(walk from h ever goes below 0) <= e^{-theta h}.
  double lundberg_exponent() const {
    if (!(drift_ > 0.0)) throw RegimeError("Lundberg exponent needs a positive drift");
    if (is_gaussian()) return 2.0 * mean_ / (sd_ * sd_);
    auto kappa = [&](double theta) {
      std::vector<PointMass> neg;
      for (const auto& s : steps_) neg.push_back({-s.value, s.weight});
      return detail::log_sum_exp_moments(neg, theta).value;
    };
    double hi = 1.0;
    while (kappa(hi) <= 0.0) {
      hi *= 2.0;
      if (hi > 1e6) throw RegimeError("no Lundberg exponent: the step law has no negative atoms");
    }
    return detail::bisect(kappa, 1e-12, hi);
  }

 private:
  Model model_;
  double rho_;
  double drift_ = 0.0;
  double mean_ = 0.0;
  double sd_ = 0.0;
  std::vector<PointMass> steps_;
  std::vector<double> cumulative_;
};

inline TiltedWalk make_tilted_walk(const Model& model, double rho) { return TiltedWalk(model, rho); }

/// The walk of the regime tilt: rho* (critical) or rho+ (subcritical).
inline TiltedWalk regime_walk(const Model& model, const ModelAnalytics& a) { return TiltedWalk(model, a.tilt()); }

// ---------------------------------------------------------------------------
// Paths and first passages.

enum class StopReason { HitAbove, HitBelow, MaxSteps };

inline const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::HitAbove: return "hit_above";
    case StopReason::HitBelow: return "hit_below";
    default: return "max_steps";
  }
}

struct WalkPath {
  double start = 0.0;
  std::vector<double> increments;
  /// positions[k] = S_k; positions[0] = start.
  std::vector<double> positions;
  StopReason reason = StopReason::MaxSteps;
  std::optional<double> upper;
  std::optional<double> lower;

  static WalkPath from_positions(double start, const std::vector<double>& after_start) {
    WalkPath p;
    p.start = start;
    p.positions.push_back(start);
    double prev = start;
    for (double s : after_start) {
      p.increments.push_back(s - prev);
      p.positions.push_back(s);
      prev = s;
    }
    return p;
  }

  std::size_t steps() const { return increments.size(); }
  double end() const { return positions.back(); }
  /// T^+ = S_tau - upper at an upward crossing.
  double overshoot() const { return end() - upper.value_or(std::numeric_limits<double>::quiet_NaN()); }
  /// T^- = lower - S_tau at a downward crossing.
  double undershoot() const { return lower.value_or(std::numeric_limits<double>::quiet_NaN()) - end(); }
};

struct Passage {
  StopReason reason = StopReason::MaxSteps;
  std::uint64_t steps = 0;
  double position = 0.0;
};

/// First k >= 0 with S_k > upper or S_k < lower, or k = max_steps.
inline Passage first_passage(const TiltedWalk& walk, double x, std::optional<double> upper,
                             std::optional<double> lower, std::uint64_t max_steps, Rng& rng) {
  const double hi = upper.value_or(std::numeric_limits<double>::infinity());
  const double lo = lower.value_or(-std::numeric_limits<double>::infinity());
  double s = x;
  for (std::uint64_t k = 0;; ++k) {
    if (s > hi) return {StopReason::HitAbove, k, s};
    if (s < lo) return {StopReason::HitBelow, k, s};
    if (k == max_steps) return {StopReason::MaxSteps, k, s};
    s += walk.sample_step(rng);
  }
}

inline WalkPath simulate_until_passage(const TiltedWalk& walk, double x, std::optional<double> upper,
                                       std::optional<double> lower, std::uint64_t max_steps, Rng& rng) {
  WalkPath p;
  p.start = x;
  p.upper = upper;
  p.lower = lower;
  p.positions.push_back(x);
  const double hi = upper.value_or(std::numeric_limits<double>::infinity());
  const double lo = lower.value_or(-std::numeric_limits<double>::infinity());
  double s = x;
  for (std::uint64_t k = 0;; ++k) {
    if (s > hi) {
      p.reason = StopReason::HitAbove;
      return p;
    }
    if (s < lo) {
      p.reason = StopReason::HitBelow;
      return p;
    }
    if (k == max_steps) {
      p.reason = StopReason::MaxSteps;
      return p;
    }
    const double dx = walk.sample_step(rng);
    s += dx;
    p.increments.push_back(dx);
    p.positions.push_back(s);
  }
}

struct LadderEpoch {
  std::size_t index = 0;
  double height = 0.0;
};

struct LadderDecomposition {
  /// Strict ascending records: S_index > max_{k<index} S_k, height = S_index.
  std::vector<LadderEpoch> ascending;
  /// Strict descending records of -S: height = -S_index.
  std::vector<LadderEpoch> descending;
};

inline LadderDecomposition ladder_decompose(const WalkPath& path) {
  if (path.positions.empty()) throw Error("ladder_decompose: empty path");
  LadderDecomposition d;
  double hi = path.positions[0], lo = path.positions[0];
  for (std::size_t k = 1; k < path.positions.size(); ++k) {
    const double s = path.positions[k];
    if (s > hi) {
      hi = s;
      d.ascending.push_back({k, s});
    }
    if (s < lo) {
      lo = s;
      d.descending.push_back({k, -s});
    }
  }
  return d;
}

/// P_x(tau_t^+ < tau_0^-) by Monte Carlo. Walks that hit max_steps are
/// excluded and counted as truncated.
inline EstimateWithCI passage_probability(const TiltedWalk& walk, double x, double t, const McConfig& cfg,
                                          std::uint64_t max_steps = 10'000'000) {
  auto acc = run_replicas<MeanAccumulator>(cfg, [&](MeanAccumulator& a, Rng& rng, std::uint64_t) {
    const auto p = first_passage(walk, x, t, 0.0, max_steps, rng);
    if (p.reason == StopReason::MaxSteps)
      a.add_truncated();
    else
      a.add(p.reason == StopReason::HitAbove ? 1.0 : 0.0);
  });
  return acc.estimate();
}

/// Height above which a positive-drift walk returns below 0 with probability
/// at most eps.
inline double escape_height(const TiltedWalk& walk, double eps) { return std::log(1.0 / eps) / walk.lundberg_exponent(); }

// ---------------------------------------------------------------------------
// Renewal function R(x) = Q[sum_{j < tau*} 1{S_j >= -x}], tau* = inf{j >= 1: S_j >= 0}.

enum class RenewalMethod { VisitCount, LadderDuality };

inline const char* to_string(RenewalMethod m) { return m == RenewalMethod::VisitCount ? "visit_count" : "ladder_duality"; }

struct RenewalOptions {
  /// VisitCount: steps per excursion. A capped excursion keeps its partial count.
  std::uint64_t max_steps = 1'000'000;
  /// LadderDuality: steps per descending ladder epoch; a capped replica is dropped.
  std::uint64_t ladder_max_steps = 100000;
  /// LadderDuality with positive drift: escape probability bound at the cutoff.
  double escape_eps = 1e-12;
};

struct RenewalEstimate {
  std::vector<double> x_grid;
  std::vector<EstimateWithCI> r_values;
  RenewalMethod method = RenewalMethod::VisitCount;
  /// Values after pool-adjacent-violators cleanup (non-decreasing).
  std::vector<double> monotone;
  /// Number of adjacent pairs where the raw estimate decreased.
  std::size_t raw_violations = 0;
};

namespace detail {

// Unweighted pool-adjacent-violators for a non-decreasing fit.
inline std::vector<double> isotonic(const std::vector<double>& y) {
  std::vector<double> level;
  std::vector<std::size_t> width;
  for (double v : y) {
    level.push_back(v);
    width.push_back(1);
    while (level.size() > 1 && level[level.size() - 2] > level.back()) {
      const std::size_t w = width[width.size() - 2] + width.back();
      const double m = (level[level.size() - 2] * static_cast<double>(width[width.size() - 2]) +
                        level.back() * static_cast<double>(width.back())) /
                       static_cast<double>(w);
      level.pop_back();
      width.pop_back();
      level.back() = m;
      width.back() = w;
    }
  }
  std::vector<double> out;
  for (std::size_t i = 0; i < level.size(); ++i) out.insert(out.end(), width[i], level[i]);
  return out;
}

inline std::size_t grid_index(const std::vector<double>& grid, double v) {
  return static_cast<std::size_t>(std::lower_bound(grid.begin(), grid.end(), v) - grid.begin());
}

}  // namespace detail

inline RenewalEstimate renewal_function(const TiltedWalk& walk, std::vector<double> x_grid, RenewalMethod method,
                                        const McConfig& cfg, const RenewalOptions& opt = {}) {
  if (walk.drift() < -kRegimeTolerance) throw RegimeError("renewal function needs a walk with drift >= 0");
  if (x_grid.empty()) throw Error("renewal_function: empty grid");
  std::vector<std::size_t> order(x_grid.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x_grid[a] < x_grid[b]; });
  std::vector<double> sorted;
  for (auto i : order) sorted.push_back(x_grid[i]);
  const std::size_t m = sorted.size();
  const double x_max = sorted.back();
  const bool escapes = walk.drift() > kRegimeTolerance;
  const double cutoff = escapes ? escape_height(walk, opt.escape_eps) : std::numeric_limits<double>::infinity();

  auto body = [&](VectorAccumulator& acc, Rng& rng, std::uint64_t) {
    std::vector<double> diff(m + 1, 0.0);
    bool censored = false;
    if (method == RenewalMethod::VisitCount) {
      double s = 0.0;
      diff[detail::grid_index(sorted, 0.0)] += 1.0;
      for (std::uint64_t j = 1;; ++j) {
        if (j > opt.max_steps) {
          censored = true;
          break;
        }
        s += walk.sample_step(rng);
        if (s >= 0.0) break;
        if (-s <= x_max) diff[detail::grid_index(sorted, -s)] += 1.0;
      }
    } else {
      diff[detail::grid_index(sorted, 0.0)] += 1.0;
      double level = 0.0;
      for (;;) {
        const auto p = first_passage(walk, 0.0, cutoff, 0.0, opt.ladder_max_steps, rng);
        if (p.reason == StopReason::MaxSteps) {
          acc.add_truncated();
          return;
        }
        if (p.reason == StopReason::HitAbove) break;
        level += -p.position;
        if (level > x_max) break;
        diff[detail::grid_index(sorted, level)] += 1.0;
      }
    }
    std::vector<double> values(m);
    double run = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      run += diff[i];
      values[i] = sorted[i] < 0.0 ? 0.0 : run;
    }
    if (censored)
      acc.add_censored(values);
    else
      acc.add(values);
  };
  const auto acc = run_replicas<VectorAccumulator>(cfg, body, VectorAccumulator(m));

  RenewalEstimate est;
  est.method = method;
  est.x_grid = x_grid;
  est.r_values.resize(m);
  std::vector<double> raw(m);
  for (std::size_t k = 0; k < m; ++k) {
    est.r_values[order[k]] = acc.estimate(k);
    raw[k] = acc.estimate(k).value;
  }
  for (std::size_t k = 1; k < m; ++k)
    if (raw[k] < raw[k - 1]) ++est.raw_violations;
  const auto iso = detail::isotonic(raw);
  est.monotone.resize(m);
  for (std::size_t k = 0; k < m; ++k) est.monotone[order[k]] = iso[k];
  return est;
}

/// Tabulated or closed-form renewal function, R = 0 on (-inf, 0).
class RenewalTable {
 public:
  /// R(x) = sum_{n=0}^{floor(x/span)} r^n: walks whose strict descending
  /// ladder height is always `span` and occurs with probability r.
  static RenewalTable skip_free(double span, double r) {
    RenewalTable t;
    t.kind_ = Kind::SkipFree;
    t.span_ = span;
    t.r_ = r;
    return t;
  }

  /// Piecewise-linear interpolation through (grid, values). Beyond the grid the
  /// table either throws or extrapolates with the slope of the last two knots.
  static RenewalTable interpolated(std::vector<double> grid, std::vector<double> values, bool extrapolate = false) {
    if (grid.size() != values.size() || grid.empty()) throw Error("renewal table: grid/value size mismatch");
    std::vector<std::size_t> order(grid.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return grid[a] < grid[b]; });
    RenewalTable t;
    t.kind_ = Kind::Table;
    t.extrapolate_ = extrapolate;
    for (auto i : order) {
      if (grid[i] < 0.0) continue;
      t.grid_.push_back(grid[i]);
      t.values_.push_back(values[i]);
    }
    if (t.grid_.empty() || t.grid_.front() != 0.0) throw Error("renewal table must contain x = 0");
    return t;
  }

  static RenewalTable from_estimate(const RenewalEstimate& e, bool extrapolate = false) {
    return interpolated(e.x_grid, e.monotone, extrapolate);
  }

  bool exact() const { return kind_ == Kind::SkipFree; }
  double max_x() const {
    if (kind_ == Kind::SkipFree || extrapolate_) return std::numeric_limits<double>::infinity();
    return grid_.back();
  }

  double operator()(double x) const {
    if (x < 0.0) return 0.0;
    if (kind_ == Kind::SkipFree) {
      const double n = std::floor(x / span_ + 1e-12);
      if (r_ == 1.0) return n + 1.0;
      return (1.0 - std::pow(r_, n + 1.0)) / (1.0 - r_);
    }
    if (x > grid_.back()) {
      if (!extrapolate_)
        throw CapError("renewal table covers [0, " + std::to_string(grid_.back()) + "], needed x = " + std::to_string(x));
      if (grid_.size() == 1) return values_.back();
      const std::size_t k = grid_.size() - 1;
      const double slope = (values_[k] - values_[k - 1]) / (grid_[k] - grid_[k - 1]);
      return values_[k] + slope * (x - grid_[k]);
    }
    const std::size_t k = detail::grid_index(grid_, x);
    if (grid_[k] == x || k == 0) return values_[k];
    const double w = (x - grid_[k - 1]) / (grid_[k] - grid_[k - 1]);
    return values_[k - 1] + w * (values_[k] - values_[k - 1]);
  }

 private:
  enum class Kind { SkipFree, Table };
  Kind kind_ = Kind::Table;
  double span_ = 1.0;
  double r_ = 1.0;
  bool extrapolate_ = false;
  std::vector<double> grid_;
  std::vector<double> values_;
};

/// Closed-form R for +/-d walks: the descending ladder height is always d and
/// the walk ever goes below 0 with probability r = min(1, P(-d)/P(+d)).
inline std::optional<RenewalTable> closed_form_renewal(const TiltedWalk& walk) {
  if (walk.is_gaussian()) return std::nullopt;
  const auto& s = walk.step_masses();
  if (s.size() != 2 || std::abs(s[0].value + s[1].value) > 1e-12 || s[1].value <= 0.0) return std::nullopt;
  const double r = std::min(1.0, s[0].weight / s[1].weight);
  return RenewalTable::skip_free(s[1].value, r);
}

// ---------------------------------------------------------------------------
// C_R and first-passage consistency.

struct CREstimate {
  EstimateWithCI c_r;
  /// Q[-S_{tau_0^-}] (critical) or Q(tau_0^- = infinity) (positive drift).
  EstimateWithCI base;
  double probe_t = 0.0;
  EstimateWithCI passage;
  /// C_R t P(tau_t^+ < tau_0^-) (critical) or C_R P(tau_t^+ < tau_0^-).
  double consistency = 0.0;
};

struct CROptions {
  double probe_t = 20.0;
  std::uint64_t max_steps = 1'000'000;
  double escape_eps = 1e-12;
};

/// Undershoot -S_{tau_0^-} from 0; walks still above 0 after max_steps are dropped.
inline EstimateWithCI undershoot_mean(const TiltedWalk& walk, const McConfig& cfg, std::uint64_t max_steps) {
  return run_replicas<MeanAccumulator>(cfg, [&](MeanAccumulator& a, Rng& rng, std::uint64_t) {
           const auto p = first_passage(walk, 0.0, std::nullopt, 0.0, max_steps, rng);
           if (p.reason == StopReason::MaxSteps)
             a.add_truncated();
           else
             a.add(-p.position);
         }).estimate();
}

/// Q(tau_0^- = infinity) from 0 for a positive-drift walk: escape is declared
/// at the height where the return probability is below escape_eps.
inline EstimateWithCI escape_probability(const TiltedWalk& walk, const McConfig& cfg, double escape_eps = 1e-12,
                                         std::uint64_t max_steps = 10'000'000) {
  const double h = escape_height(walk, escape_eps);
  return passage_probability(walk, 0.0, h, cfg, max_steps);
}

inline CREstimate estimate_C_R(const TiltedWalk& walk, const McConfig& cfg, const CROptions& opt = {}) {
  CREstimate out;
  McConfig base_cfg = cfg;
  base_cfg.seed = derive_seed(cfg.seed, 1);
  McConfig probe_cfg = cfg;
  probe_cfg.seed = derive_seed(cfg.seed, 2);
  const bool critical = std::abs(walk.drift()) <= kRegimeTolerance;
  if (!critical && walk.drift() < 0.0) throw RegimeError("C_R needs the rho* or rho+ tilt (drift >= 0)");
  out.base = critical ? undershoot_mean(walk, base_cfg, opt.max_steps)
                      : escape_probability(walk, base_cfg, opt.escape_eps, opt.max_steps);
  out.c_r = out.base;
  out.c_r.value = 1.0 / out.base.value;
  out.c_r.std_error = out.base.std_error / (out.base.value * out.base.value);
  out.probe_t = opt.probe_t;
  out.passage = passage_probability(walk, 0.0, opt.probe_t, probe_cfg, opt.max_steps);
  out.consistency = out.c_r.value * out.passage.value * (critical ? opt.probe_t : 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Walk conditioned to stay positive.

struct TanakaOptions {
  /// Step cap for one pre-ladder segment.
  std::uint64_t segment_cap = 1'000'000;
};

struct TanakaSample {
  /// zeta_0 = 0, ..., zeta_n.
  WalkPath path;
  /// First glued segment: sigma_1^+ and H_1 = zeta_{sigma_1^+}.
  std::uint64_t first_sigma = 0;
  double first_height = 0.0;
  bool truncated = false;
};

/// Glues reversed and reflected pre-ladder segments
/// w(l) = S_sigma - S_{sigma - l}, l = 0..sigma, of independent walks from 0,
/// sigma = inf{k >= 1: S_k > 0}.
inline TanakaSample tanaka_conditioned_walk(const TiltedWalk& walk, std::size_t n_steps, Rng& rng,
                                            const TanakaOptions& opt = {}) {
  if (walk.drift() < -kRegimeTolerance) throw RegimeError("Tanaka construction needs drift >= 0");
  TanakaSample out;
  std::vector<double> zeta(n_steps + 1, 0.0);
  std::vector<double> ring(std::max<std::size_t>(n_steps, 1));
  std::size_t filled = 0;
  double base = 0.0;
  bool first = true;
  while (filled < n_steps || first) {
    const std::size_t need = std::max<std::size_t>(n_steps - filled, 1);
    double s = 0.0;
    std::uint64_t len = 0;
    for (;;) {
      if (len == opt.segment_cap) {
        out.truncated = true;
        out.path = WalkPath::from_positions(0.0, {});
        return out;
      }
      const double dx = walk.sample_step(rng);
      ring[len % need] = dx;
      ++len;
      s += dx;
      if (s > 0.0) break;
    }
    if (first) {
      out.first_sigma = len;
      out.first_height = s;
      first = false;
    }
    // w(l) = sum of the last l increments.
    const std::size_t take = static_cast<std::size_t>(std::min<std::uint64_t>(len, n_steps - filled));
    double w = 0.0;
    for (std::size_t l = 1; l <= take; ++l) {
      w += ring[(len - l) % need];
      zeta[filled + l] = base + w;
    }
    base += s;
    filled += static_cast<std::size_t>(std::min<std::uint64_t>(len, n_steps - filled));
    if (n_steps == 0) break;
  }
  out.path = WalkPath::from_positions(0.0, std::vector<double>(zeta.begin() + 1, zeta.end()));
  return out;
}

/// Mean strict ascending ladder height E[H_1] from 0.
inline EstimateWithCI ladder_height_mean(const TiltedWalk& walk, const McConfig& cfg,
                                         std::uint64_t max_steps = 1'000'000) {
  if (!walk.is_gaussian()) {
    const auto& s = walk.step_masses();
    const auto span = walk.model().lattice_span();
    // Upward skip-free lattice walk: the ladder height is the up step.
    if (span && s.back().value > 0.0 && std::abs(s.back().value - *span) < 1e-12) {
      bool single_up = true;
      for (std::size_t i = 0; i + 1 < s.size(); ++i)
        if (s[i].value > 0.0) single_up = false;
      if (single_up) {
        EstimateWithCI e;
        e.value = s.back().value;
        e.replicas = 0;
        return e;
      }
    }
  }
  return run_replicas<MeanAccumulator>(cfg, [&](MeanAccumulator& a, Rng& rng, std::uint64_t) {
           const auto p = first_passage(walk, 0.0, 0.0, std::nullopt, max_steps, rng);
           if (p.reason == StopReason::MaxSteps)
             a.add_truncated();
           else
             a.add(p.position);
         }).estimate();
}

struct HatSSample {
  WalkPath path;
  /// zeta_{sigma~} / E[H_1] with sigma~ = sigma_1^+.
  double weight = 0.0;
  /// sup{1 <= n <= horizon: zeta_n = min_{1<=i<=n} zeta_i}.
  std::size_t sigma_hat = 0;
  /// sigma~ falls beyond the horizon.
  bool beyond_horizon = false;
  bool truncated = false;
};

/// Size-biased glued walk: a Tanaka path with importance weight H_1 / E[H_1].
class HatSSampler {
 public:
  HatSSampler(const TiltedWalk& walk, double ladder_height_mean, TanakaOptions opt = {})
      : walk_(walk), mean_h_(ladder_height_mean), opt_(opt) {}

  HatSSample sample(std::size_t n_steps, Rng& rng) const {
    HatSSample out;
    auto t = tanaka_conditioned_walk(walk_, n_steps, rng, opt_);
    out.truncated = t.truncated;
    if (t.truncated) return out;
    out.path = std::move(t.path);
    out.weight = t.first_height / mean_h_;
    out.beyond_horizon = t.first_sigma > n_steps;
    double lo = std::numeric_limits<double>::infinity();
    for (std::size_t n = 1; n < out.path.positions.size(); ++n)
      if (out.path.positions[n] <= lo) {
        lo = out.path.positions[n];
        out.sigma_hat = n;
      }
    return out;
  }

  double ladder_mean() const { return mean_h_; }

 private:
  TiltedWalk walk_;
  double mean_h_;
  TanakaOptions opt_;
};

/// One step of the h-transform chain with h = R on [0, inf):
/// P(y, dz) proportional to R(z) 1{z >= 0} P_walk(y, dz).
inline double conditioned_step(const TiltedWalk& walk, const RenewalTable& R, double y, Rng& rng) {
  if (y < 0.0) throw Error("conditioned_step: y must be >= 0");
  if (!walk.is_gaussian()) {
    const auto& s = walk.step_masses();
    double total = 0.0;
    for (const auto& m : s) total += m.weight * R(y + m.value);
    if (!(total > 0.0)) throw CapError("conditioned_step: normalizer M(y) <= 0 at y = " + std::to_string(y));
    const double u = uniform01(rng) * total;
    double acc = 0.0;
    for (const auto& m : s) {
      acc += m.weight * R(y + m.value);
      if (u < acc) return y + m.value;
    }
    for (auto it = s.rbegin(); it != s.rend(); ++it)
      if (R(y + it->value) > 0.0) return y + it->value;
    return y;
  }
  // R is non-decreasing, so R(y + mean + 8 sd) bounds the acceptance ratio
  // except on an event of probability 6e-16.
  const double bound = R(y + walk.gaussian_mean() + 8.0 * walk.gaussian_sd());
  if (!(bound > 0.0)) throw CapError("conditioned_step: renewal table vanishes near y = " + std::to_string(y));
  for (;;) {
    const double z = y + walk.sample_step(rng);
    if (z < 0.0) continue;
    if (uniform01(rng) * bound < R(z)) return z;
  }
}

/// X_0 = y, ..., X_k of the h-transform chain.
inline std::vector<double> conditioned_chain(const TiltedWalk& walk, const RenewalTable& R, double y, std::size_t k,
                                             Rng& rng) {
  std::vector<double> xs{y};
  for (std::size_t i = 0; i < k; ++i) xs.push_back(conditioned_step(walk, R, xs.back(), rng));
  return xs;
}

}  // namespace kbrw
