#pragma once

// Size-biased trees along a spine: the tilted reproduction law, many-to-one
// estimators, and importance-sampled estimators for the stopping line H(t).

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <vector>

#include "kbrw/brw.hpp"
#include "kbrw/error.hpp"
#include "kbrw/estimate.hpp"
#include "kbrw/model.hpp"
#include "kbrw/parallel.hpp"
#include "kbrw/walk.hpp"

namespace kbrw {

struct SpineStep {
  double spine_displacement = 0.0;
  std::vector<double> siblings;
};

/// Reproduction of a spine particle under the rho-tilted measure.
///
/// Iid case: nu~ size-biased, the spine child displaced by the tilted step
/// law, nu~ - 1 siblings iid from the displacement law. General finite
/// support: (pattern, spine child) drawn with probability
/// P(pattern) e^{rho v_i} / e^{psi(rho)}.
class SpineSampler {
 public:
  /// `unbiased_count` replaces nu~ by nu conditioned on nu >= 1; it exists only
  /// as a negative control.
  SpineSampler(const Model& model, double rho, bool unbiased_count = false)
      : model_(model), walk_(model, rho), rho_(rho), unbiased_(unbiased_count) {
    if (model.is_iid()) {
      const auto& nu = model.iid().nu;
      double acc = 0.0;
      for (unsigned k = 0; k <= nu.max_count(); ++k) {
        double p = unbiased_ ? (k >= 1 ? nu.pmf()[k] / (1.0 - nu.pmf()[0]) : 0.0) : nu.size_biased_prob(k);
        count_cdf_.push_back(acc += p);
      }
      count_cdf_.back() = 1.0;
    } else {
      const auto& atoms = std::get<GeneralFiniteSupport>(model.kind()).atoms;
      double total = 0.0;
      for (std::size_t a = 0; a < atoms.size(); ++a)
        for (std::size_t i = 0; i < atoms[a].pattern.size(); ++i) {
          const double w = atoms[a].probability * std::exp(rho * atoms[a].pattern[i]);
          choices_.push_back({a, i});
          total += w;
          choice_cdf_.push_back(total);
        }
      for (auto& c : choice_cdf_) c /= total;
      choice_cdf_.back() = 1.0;
    }
  }

  const TiltedWalk& walk() const { return walk_; }
  double rho() const { return rho_; }

  void sample(Rng& rng, SpineStep& out) const {
    out.siblings.clear();
    if (model_.is_iid()) {
      const double u = uniform01(rng);
      unsigned k = 0;
      while (u >= count_cdf_[k]) ++k;
      out.spine_displacement = walk_.sample_step(rng);
      for (unsigned i = 1; i < k; ++i) out.siblings.push_back(model_.sample_displacement(rng));
      return;
    }
    const auto& atoms = std::get<GeneralFiniteSupport>(model_.kind()).atoms;
    const double u = uniform01(rng);
    std::size_t c = 0;
    while (u >= choice_cdf_[c]) ++c;
    const auto [a, i] = choices_[c];
    out.spine_displacement = atoms[a].pattern[i];
    for (std::size_t j = 0; j < atoms[a].pattern.size(); ++j)
      if (j != i) out.siblings.push_back(atoms[a].pattern[j]);
  }

  /// Exact law of (spine displacement, sorted siblings) for finite supports.
  std::map<std::vector<double>, double> exact_step_law() const {
    std::map<std::vector<double>, double> law;
    if (model_.is_gaussian()) throw ModelError("exact spine step law needs a finitely supported model");
    if (model_.is_iid()) {
      const auto& steps = walk_.step_masses();
      const auto& disp = model_.displacement_masses();
      for (unsigned k = 1; k < count_cdf_.size(); ++k) {
        const double pk = count_cdf_[k] - count_cdf_[k - 1];
        if (pk <= 0.0) continue;
        std::vector<std::pair<std::vector<double>, double>> sibs{{{}, 1.0}};
        for (unsigned j = 1; j < k; ++j) {
          std::vector<std::pair<std::vector<double>, double>> next;
          for (const auto& [v, p] : sibs)
            for (const auto& d : disp) {
              auto w = v;
              w.push_back(d.value);
              next.push_back({w, p * d.weight});
            }
          sibs = std::move(next);
        }
        for (const auto& s : steps)
          for (const auto& [v, p] : sibs) {
            auto key = v;
            std::sort(key.begin(), key.end());
            key.insert(key.begin(), s.value);
            law[key] += pk * s.weight * p;
          }
      }
      if (count_cdf_[0] > 0.0) throw ModelError("size-biased count has an atom at 0");
      return law;
    }
    const auto& atoms = std::get<GeneralFiniteSupport>(model_.kind()).atoms;
    double prev = 0.0;
    for (std::size_t c = 0; c < choices_.size(); ++c) {
      const auto [a, i] = choices_[c];
      std::vector<double> key;
      for (std::size_t j = 0; j < atoms[a].pattern.size(); ++j)
        if (j != i) key.push_back(atoms[a].pattern[j]);
      std::sort(key.begin(), key.end());
      key.insert(key.begin(), atoms[a].pattern[i]);
      law[key] += choice_cdf_[c] - prev;
      prev = choice_cdf_[c];
    }
    return law;
  }

 private:
  Model model_;
  TiltedWalk walk_;
  double rho_;
  bool unbiased_;
  std::vector<double> count_cdf_;
  std::vector<std::pair<std::size_t, std::size_t>> choices_;
  std::vector<double> choice_cdf_;
};

/// One draw of the spine reproduction: (spine displacement, siblings).
inline SpineStep tilted_reproduction(const Model& model, double rho, Rng& rng) {
  SpineSampler s(model, rho);
  SpineStep out;
  s.sample(rng, out);
  return out;
}

// ---------------------------------------------------------------------------
// Many-to-one.

using PathFunctional = std::function<double(const std::vector<double>&)>;

/// e^{rho x} Q_x[e^{-rho S_n} F(S_0..S_n)] by Monte Carlo.
inline EstimateWithCI many_to_one_estimate(const Model& model, double rho, double x, std::size_t n,
                                           const PathFunctional& F, const McConfig& cfg) {
  const TiltedWalk walk(model, rho);
  return run_replicas<MeanAccumulator>(cfg, [&](MeanAccumulator& a, Rng& rng, std::uint64_t) {
           std::vector<double> path{x};
           for (std::size_t k = 0; k < n; ++k) path.push_back(path.back() + walk.sample_step(rng));
           a.add(std::exp(rho * (x - path.back())) * F(path));
         }).estimate();
}

/// Same expectation by summing over all tilted step sequences (finite support).
inline double many_to_one_exact(const Model& model, double rho, double x, std::size_t n, const PathFunctional& F) {
  const TiltedWalk walk(model, rho);
  const auto& steps = walk.step_masses();
  double total = 0.0;
  std::vector<double> path{x};
  std::function<void(double)> rec = [&](double p) {
    if (path.size() == n + 1) {
      total += p * std::exp(rho * (x - path.back())) * F(path);
      return;
    }
    for (const auto& s : steps) {
      path.push_back(path.back() + s.value);
      rec(p * s.weight);
      path.pop_back();
    }
  };
  rec(1.0);
  return total;
}

namespace functionals {

inline PathFunctional one() {
  return [](const std::vector<double>&) { return 1.0; };
}

/// 1{min_k S_k >= 0}: the particle is alive in the killed tree.
inline PathFunctional alive() {
  return [](const std::vector<double>& p) { return *std::min_element(p.begin(), p.end()) >= 0.0 ? 1.0 : 0.0; };
}

}  // namespace functionals

// ---------------------------------------------------------------------------
// Stopping-line estimators.

/// E_x[H(t)] = e^{rho x} Q_x[e^{-rho S_tau}; tau_t^+ < tau_0^-] with the regime tilt.
inline EstimateWithCI estimate_EH(const Model& model, const ModelAnalytics& a, double x, double t, const McConfig& cfg,
                                  std::uint64_t max_steps = 10'000'000) {
  if (x < 0.0) throw Error("estimate_EH: x must be >= 0");
  if (x > t) {
    EstimateWithCI e;
    e.value = 1.0;
    e.replicas = cfg.replicas;
    e.n_effective = static_cast<double>(cfg.replicas);
    return e;
  }
  const double rho = a.tilt();
  const TiltedWalk walk(model, rho);
  return run_replicas<MeanAccumulator>(cfg, [&](MeanAccumulator& acc, Rng& rng, std::uint64_t) {
           const auto p = first_passage(walk, x, t, 0.0, max_steps, rng);
           if (p.reason == StopReason::MaxSteps)
             acc.add_truncated();
           else
             acc.add(p.reason == StopReason::HitAbove ? std::exp(rho * (x - p.position)) : 0.0);
         }).estimate();
}

struct SpineEstimate {
  EstimateWithCI estimate;
  double effective_sample_size = 0.0;
  std::uint64_t truncated_count = 0;
  /// Fraction of replicas whose spine reached t.
  double hit_fraction = 0.0;
};

namespace detail {

// One spine replica from x: the spine follows the tilted walk and is stopped at
// tau_t^+ or at the first position below 0; `on_hit` receives the spine path
// and sibling start positions only when the spine crossed t.
struct SpineRun {
  std::vector<double> spine;
  std::vector<double> sibling_starts;
  bool hit = false;
  bool truncated = false;
};

inline void run_spine(const SpineSampler& sampler, double x, double t, std::uint64_t max_steps, Rng& rng,
                      SpineRun& run, SpineStep& step) {
  run.spine.assign(1, x);
  run.sibling_starts.clear();
  run.hit = false;
  run.truncated = false;
  double s = x;
  for (std::uint64_t k = 0;; ++k) {
    if (s > t) {
      run.hit = true;
      return;
    }
    if (s < 0.0) return;
    if (k == max_steps) {
      run.truncated = true;
      return;
    }
    sampler.sample(rng, step);
    for (double d : step.siblings) run.sibling_starts.push_back(s + d);
    s += step.spine_displacement;
    run.spine.push_back(s);
  }
}

}  // namespace detail

/// P_x(H(t) > 0) through the spine decomposition over the line H(t):
/// 1{H(t) > 0} = sum_{u in H(t)} R(V(u)) e^{rho V(u)} / sum_{v in H(t)} R(V(v)) e^{rho V(v)},
/// so the estimator is e^{rho x} R(S_tau) / sum_{v in H(t)} R(V(v)) e^{rho V(v)}
/// on {tau_t^+ < tau_0^-} under Q_x. Unbiased for any positive weight R; the
/// renewal function makes it nearly constant.
inline SpineEstimate estimate_survival_spine(const Model& model, const ModelAnalytics& a, double x, double t,
                                             const RenewalTable& R, const McConfig& cfg, const TreeCaps& caps = {},
                                             std::uint64_t max_steps = 10'000'000) {
  if (!(x >= 0.0 && x < t)) throw Error("estimate_survival_spine needs 0 <= x < t");
  const double rho = a.tilt();
  const SpineSampler sampler(model, rho);
  TreeOptions opt;
  opt.probe_levels = {t};
  opt.caps = caps;
  opt.collect_overshoots = true;
  struct Acc {
    WeightAccumulator w;
    MeanAccumulator hit;
    void merge(const Acc& o) {
      w.merge(o.w);
      hit.merge(o.hit);
    }
  };
  const auto acc = run_replicas<Acc>(cfg, [&](Acc& out, Rng& rng, std::uint64_t) {
    detail::SpineRun run;
    SpineStep step;
    detail::run_spine(sampler, x, t, max_steps, rng, run, step);
    if (run.truncated) {
      out.w.add_truncated();
      return;
    }
    out.hit.add(run.hit ? 1.0 : 0.0);
    if (!run.hit) {
      out.w.add(0.0);
      return;
    }
    const double s_tau = run.spine.back();
    double denom = R(s_tau) * std::exp(rho * (s_tau - t));
    KilledTreeSimulator sim(model, opt);
    for (double y : run.sibling_starts) {
      if (y < 0.0) continue;
      if (y > t) {
        denom += R(y) * std::exp(rho * (y - t));
        continue;
      }
      const auto& r = sim.run(y, rng);
      if (r.truncated) {
        out.w.add_truncated();
        return;
      }
      for (double o : r.overshoots[0]) denom += R(t + o) * std::exp(rho * o);
    }
    out.w.add(std::exp(rho * (x - t)) * R(s_tau) / denom);
  });
  SpineEstimate e;
  e.estimate = acc.w.estimate();
  e.effective_sample_size = acc.w.effective_sample_size();
  e.truncated_count = e.estimate.truncated_count;
  e.hit_fraction = acc.hit.mean();
  return e;
}

// ---------------------------------------------------------------------------
// Exact check of the spine path law.

struct SpineMarginalReport {
  std::size_t n = 0;
  double total_variation = 0.0;
  std::size_t support_size = 0;
};

/// Compares, at depth n, the law of the spine's reproduction sequence
/// ((spine displacement, sorted siblings) per generation) under the sampler with
/// the law obtained by choosing a generation-n particle of a P-tree with
/// probability proportional to e^{rho V(u)} (weighted by W_n, so that its
/// total mass is e^{n psi(rho)} = 1). Both sides are exact enumerations.
inline SpineMarginalReport spine_marginal_check(const Model& model, double rho, std::size_t n,
                                                bool mutate_sampler = false) {
  SpineMarginalReport rep;
  rep.n = n;
  if (n == 0) {
    rep.support_size = 1;
    return rep;
  }
  // P side: sum over outcome atoms and the chosen child index.
  std::map<std::vector<double>, double> one_step_p;
  for (const auto& atom : model.outcome_table())
    for (std::size_t i = 0; i < atom.pattern.size(); ++i) {
      std::vector<double> key;
      for (std::size_t j = 0; j < atom.pattern.size(); ++j)
        if (j != i) key.push_back(atom.pattern[j]);
      std::sort(key.begin(), key.end());
      key.insert(key.begin(), atom.pattern[i]);
      one_step_p[key] += atom.probability * std::exp(rho * atom.pattern[i]);
    }
  const auto one_step_q = SpineSampler(model, rho, mutate_sampler).exact_step_law();

  // Generations are independent on both sides, so the n-step law is a product;
  // +inf separates generations inside a key.
  auto power = [&](const std::map<std::vector<double>, double>& step) {
    std::map<std::vector<double>, double> law{{{}, 1.0}};
    for (std::size_t g = 0; g < n; ++g) {
      std::map<std::vector<double>, double> next;
      for (const auto& [k, p] : law)
        for (const auto& [s, q] : step) {
          auto key = k;
          key.push_back(std::numeric_limits<double>::infinity());
          key.insert(key.end(), s.begin(), s.end());
          next[key] += p * q;
        }
      law = std::move(next);
    }
    return law;
  };
  const auto lp = power(one_step_p);
  const auto lq = power(one_step_q);
  std::map<std::vector<double>, std::pair<double, double>> joint;
  for (const auto& [k, p] : lp) joint[k].first += p;
  for (const auto& [k, q] : lq) joint[k].second += q;
  double tv = 0.0;
  for (const auto& [k, pq] : joint) tv += std::abs(pq.first - pq.second);
  rep.total_variation = 0.5 * tv;
  rep.support_size = joint.size();
  return rep;
}

}  // namespace kbrw
