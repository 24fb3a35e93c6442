#pragma once

// Forward simulation of the branching random walk killed below 0.
//
// Trees are explored depth first in lexicographic order with an explicit
// stack, so only the frontier is ever stored. Along the way the simulator
// keeps the stopping-line counts at a sorted list of probe levels:
//   H(L)    particles u with V(u) > L whose ancestors all stayed in [0, L],
//   Z[0,L]  leaves whose ancestors all stayed <= L.

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

struct TreeCaps {
  /// Bound on Z + #L[0].
  std::uint64_t max_particles = 10'000'000;
  std::uint64_t max_generations = 100'000;
};

struct TreeOptions {
  /// Sorted ascending on construction of the simulator.
  std::vector<double> probe_levels;
  TreeCaps caps;
  /// Particles above the highest probe level are recorded but not expanded.
  bool stop_at_top_level = true;
  /// Keep V(u) - L for u in H(L), for every probe level.
  bool collect_overshoots = false;
  /// Keep nu(U_1), nu(U_2), ... in exploration order.
  bool record_nu = false;
};

struct TreeRecord {
  double start_x = 0.0;
  std::uint64_t total_progeny_Z = 0;
  std::uint64_t leaf_count = 0;
  /// Y_Z = 1 + sum over expanded particles of (nu - 1).
  std::int64_t exploration_Y_Z = 1;
  std::vector<double> levels;
  std::vector<std::uint64_t> H;
  std::vector<std::uint64_t> Z0L;
  std::vector<std::vector<double>> overshoots;
  double max_position = -std::numeric_limits<double>::infinity();
  bool truncated = false;
  /// Particles left unexpanded because they crossed the top probe level.
  std::uint64_t stopped = 0;
  std::uint64_t generations_simulated = 0;
  std::vector<std::uint32_t> nu_sequence;

  std::uint64_t H_at(std::size_t i) const { return H[i]; }
  bool survived(std::size_t i) const { return H[i] > 0; }
  /// Sum over u in H(L_i) of e^{rho (V(u) - L_i)}; needs collect_overshoots.
  double tilted_mass(std::size_t i, double rho) const {
    double s = 0.0;
    for (double o : overshoots[i]) s += std::exp(rho * o);
    return s;
  }
};

/// Reusable killed-tree simulator (one per worker).
class KilledTreeSimulator {
 public:
  KilledTreeSimulator(const Model& model, TreeOptions opt) : model_(model), opt_(std::move(opt)) {
    std::sort(opt_.probe_levels.begin(), opt_.probe_levels.end());
  }

  const TreeOptions& options() const { return opt_; }

  const TreeRecord& run(double x, Rng& rng) {
    if (x < 0.0) throw Error("killed tree: start position must be >= 0");
    const auto& levels = opt_.probe_levels;
    const std::size_t m = levels.size();
    const double top = m ? levels.back() : std::numeric_limits<double>::infinity();
    const bool stop = opt_.stop_at_top_level && m > 0;

    rec_.start_x = x;
    rec_.total_progeny_Z = 0;
    rec_.leaf_count = 0;
    rec_.exploration_Y_Z = 1;
    rec_.levels = levels;
    rec_.H.assign(m, 0);
    rec_.Z0L.assign(m, 0);
    rec_.overshoots.resize(m);
    for (auto& o : rec_.overshoots) o.clear();
    rec_.max_position = -std::numeric_limits<double>::infinity();
    rec_.truncated = false;
    rec_.stopped = 0;
    rec_.generations_simulated = 0;
    rec_.nu_sequence.clear();
    std::vector<std::int64_t> h_diff(m + 1, 0), z_diff(m + 1, 0);

    stack_.clear();
    stack_.push_back({x, -std::numeric_limits<double>::infinity(), 0});
    while (!stack_.empty()) {
      const Node u = stack_.back();
      stack_.pop_back();
      if (rec_.total_progeny_Z + rec_.leaf_count >= opt_.caps.max_particles) {
        rec_.truncated = true;
        break;
      }
      ++rec_.total_progeny_Z;
      rec_.max_position = std::max(rec_.max_position, u.v);
      rec_.generations_simulated = std::max<std::uint64_t>(rec_.generations_simulated, u.depth);

      // Levels L with parent_max <= L < V(u): u is in H(L).
      if (m && u.v > levels.front()) {
        const std::size_t lo = lower_index(u.parent_max);
        const std::size_t hi = lower_index(u.v);
        if (lo < hi) {
          ++h_diff[lo];
          --h_diff[hi];
          if (opt_.collect_overshoots)
            for (std::size_t i = lo; i < hi; ++i) rec_.overshoots[i].push_back(u.v - levels[i]);
        }
      }
      if (stop && u.v > top) {
        ++rec_.stopped;
        continue;
      }
      if (u.depth >= opt_.caps.max_generations) {
        rec_.truncated = true;
        continue;
      }
      model_.sample_offspring(rng, kids_);
      rec_.exploration_Y_Z += static_cast<std::int64_t>(kids_.size()) - 1;
      if (opt_.record_nu) rec_.nu_sequence.push_back(static_cast<std::uint32_t>(kids_.size()));
      const double pm = std::max(u.parent_max, u.v);
      for (auto it = kids_.rbegin(); it != kids_.rend(); ++it) {
        const double c = u.v + *it;
        if (c < 0.0) {
          ++rec_.leaf_count;
          if (m) ++z_diff[lower_index(pm)];
        } else {
          stack_.push_back({c, pm, u.depth + 1});
        }
      }
    }
    std::int64_t h = 0, z = 0;
    for (std::size_t i = 0; i < m; ++i) {
      h += h_diff[i];
      z += z_diff[i];
      rec_.H[i] = static_cast<std::uint64_t>(h);
      rec_.Z0L[i] = static_cast<std::uint64_t>(z);
    }
    return rec_;
  }

 private:
  struct Node {
    double v;
    double parent_max;
    std::uint64_t depth;
  };

  std::size_t lower_index(double v) const {
    const auto& l = opt_.probe_levels;
    return static_cast<std::size_t>(std::lower_bound(l.begin(), l.end(), v) - l.begin());
  }

  const Model& model_;
  TreeOptions opt_;
  TreeRecord rec_;
  std::vector<Node> stack_;
  std::vector<double> kids_;
};

inline TreeRecord simulate_killed_tree(const Model& model, double x, const TreeOptions& opt, Rng& rng) {
  KilledTreeSimulator sim(model, opt);
  return sim.run(x, rng);
}

enum class Verdict { True, False, Indeterminate };

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::True: return "true";
    case Verdict::False: return "false";
    default: return "indeterminate";
  }
}

/// Replays Y_k = 1 + sum_{i<=k} (nu(U_i) - 1) over the recorded exploration
/// and compares Y_Z with the leaf count.
inline Verdict exploration_check(const TreeRecord& r) {
  if (r.truncated || r.stopped > 0) return Verdict::Indeterminate;
  std::int64_t y = 1;
  if (!r.nu_sequence.empty() || r.total_progeny_Z == 0) {
    if (r.nu_sequence.size() != r.total_progeny_Z) return Verdict::False;
    for (auto nu : r.nu_sequence) y += static_cast<std::int64_t>(nu) - 1;
  } else {
    y = r.exploration_Y_Z;
  }
  return y == static_cast<std::int64_t>(r.leaf_count) ? Verdict::True : Verdict::False;
}

// ---------------------------------------------------------------------------
// Martingales of the non-killed walk.

struct MartingaleSample {
  std::uint64_t generation_n = 0;
  double additive_W_n = 0.0;
  /// -sum rho* V e^{rho* V} (critical models only, else NaN).
  double derivative_dW_n = std::numeric_limits<double>::quiet_NaN();
  /// sum e^{rho- V} (subcritical models only).
  std::optional<double> M_rho_minus_n;
  bool extinct = false;
  bool truncated = false;
  std::uint64_t population = 0;
};

/// Generation-by-generation simulation without barrier, n = 0..n_max.
/// After a population cap breach the remaining samples are flagged truncated.
inline std::vector<MartingaleSample> martingale_trajectory(const Model& model, const ModelAnalytics& a, double x,
                                                           std::uint64_t n_max, Rng& rng,
                                                           std::uint64_t max_population = 10'000'000) {
  const double rho = a.tilt();
  const bool critical = a.regime == Regime::Critical;
  std::vector<MartingaleSample> out;
  std::vector<double> gen{x}, next, kids;
  bool truncated = false;
  for (std::uint64_t n = 0; n <= n_max; ++n) {
    MartingaleSample s;
    s.generation_n = n;
    s.population = gen.size();
    s.extinct = gen.empty();
    s.truncated = truncated;
    double w = 0.0, dw = 0.0, mm = 0.0;
    for (double v : gen) {
      w += std::exp(rho * v);
      if (critical) dw -= a.rho_star * v * std::exp(a.rho_star * v);
      if (a.rho_minus) mm += std::exp(*a.rho_minus * v);
    }
    s.additive_W_n = w;
    if (critical) s.derivative_dW_n = dw;
    if (a.rho_minus) s.M_rho_minus_n = mm;
    out.push_back(s);
    if (n == n_max || truncated) continue;
    next.clear();
    for (double v : gen) {
      model.sample_offspring(rng, kids);
      for (double d : kids) next.push_back(v + d);
      if (next.size() > max_population) {
        truncated = true;
        break;
      }
    }
    gen.swap(next);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Conditioned overshoot datasets.

struct YaglomSummary {
  std::uint64_t count = 0;
  /// sum_{u in H(t)} e^{rho (V(u) - t)}.
  double tilted_mass = 0.0;
  double min_overshoot = 0.0;
  std::vector<double> overshoots;
};

struct YaglomDataset {
  double t = 0.0;
  double rho = 0.0;
  EstimateWithCI survival;
  EstimateWithCI mean_H;
  std::vector<YaglomSummary> samples;
};

struct YaglomAccumulator {
  MeanAccumulator survival;
  MeanAccumulator count;
  std::vector<YaglomSummary> samples;
  void merge(const YaglomAccumulator& o) {
    survival.merge(o.survival);
    count.merge(o.count);
    samples.insert(samples.end(), o.samples.begin(), o.samples.end());
  }
};

/// Killed trees from x stopped at level t. Truncated trees are dropped and counted.
inline YaglomDataset yaglom_samples(const Model& model, double rho, double x, double t, const McConfig& cfg,
                                    const TreeCaps& caps = {}, bool keep_overshoots = false) {
  TreeOptions opt;
  opt.probe_levels = {t};
  opt.caps = caps;
  opt.collect_overshoots = true;
  auto acc = run_replicas<YaglomAccumulator>(cfg, [&](YaglomAccumulator& a, Rng& rng, std::uint64_t) {
    KilledTreeSimulator sim(model, opt);
    const auto& r = sim.run(x, rng);
    if (r.truncated) {
      a.survival.add_truncated();
      a.count.add_truncated();
      return;
    }
    a.survival.add(r.H[0] > 0 ? 1.0 : 0.0);
    a.count.add(static_cast<double>(r.H[0]));
    if (r.H[0] == 0) return;
    YaglomSummary s;
    s.count = r.H[0];
    s.min_overshoot = *std::min_element(r.overshoots[0].begin(), r.overshoots[0].end());
    s.tilted_mass = r.tilted_mass(0, rho);
    if (keep_overshoots) s.overshoots = r.overshoots[0];
    a.samples.push_back(std::move(s));
  });
  if (acc.samples.empty())
    throw Error("yaglom_samples: no tree reached t = " + std::to_string(t) +
                " (survival estimate 0 over " + std::to_string(acc.survival.count()) + " trees)");
  YaglomDataset d;
  d.t = t;
  d.rho = rho;
  d.survival = acc.survival.estimate();
  d.mean_H = acc.count.estimate();
  d.samples = std::move(acc.samples);
  return d;
}

/// Forward Monte Carlo estimate of E_x[H(t)].
inline EstimateWithCI forward_EH(const Model& model, double x, double t, const McConfig& cfg, const TreeCaps& caps = {}) {
  TreeOptions opt;
  opt.probe_levels = {t};
  opt.caps = caps;
  return run_replicas<MeanAccumulator>(cfg, [&](MeanAccumulator& a, Rng& rng, std::uint64_t) {
           KilledTreeSimulator sim(model, opt);
           const auto& r = sim.run(x, rng);
           if (r.truncated)
             a.add_truncated();
           else
             a.add(static_cast<double>(r.H[0]));
         }).estimate();
}

}  // namespace kbrw
