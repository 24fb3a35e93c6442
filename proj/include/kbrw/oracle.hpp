#pragma once

// Exact reference values for finitely supported models: enumeration over
// all trees of small depth and dynamic programming for lattice walks.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include "kbrw/error.hpp"
#include "kbrw/model.hpp"
#include "kbrw/walk.hpp"

namespace kbrw {

struct KahanSum {
  double sum = 0.0;
  double c = 0.0;
  void add(double v) {
    const double y = v - c;
    const double t = sum + y;
    c = (t - sum) - y;
    sum = t;
  }
};

inline constexpr std::uint64_t kOracleTermBudget = 100'000'000;

// ---------------------------------------------------------------------------
// Tree enumeration.

using GenerationFunctional = std::function<double(const std::vector<double>&)>;
using PathFunctional = std::function<double(const std::vector<double>&)>;

struct EnumerationResult {
  std::size_t depth = 0;
  std::map<std::string, double> expectations;
  std::uint64_t outcome_count = 0;
  double total_probability = 0.0;
};

/// Law of the (sorted) positions of generation `depth`, by expanding every
/// particle over every outcome atom. With `killed`, particles below 0 are
/// removed together with their descendants.
inline std::map<std::vector<double>, double> generation_law(const Model& model, double x, std::size_t depth,
                                                            bool killed = false,
                                                            std::uint64_t budget = kOracleTermBudget) {
  const auto atoms = model.outcome_table();
  std::map<std::vector<double>, double> law{{{x}, 1.0}};
  if (killed && x < 0.0) law = {{{}, 1.0}};
  std::uint64_t terms = 0;
  for (std::size_t g = 0; g < depth; ++g) {
    std::map<std::vector<double>, double> next;
    for (const auto& [config, p] : law) {
      const double combos = std::pow(static_cast<double>(atoms.size()), static_cast<double>(config.size()));
      if (static_cast<double>(terms) + combos > static_cast<double>(budget))
        throw CapError("tree enumeration exceeds the term budget at generation " + std::to_string(g + 1) +
                       "; feasible depth is " + std::to_string(g));
      terms += static_cast<std::uint64_t>(combos);
      std::vector<double> kids;
      std::function<void(std::size_t, double)> rec = [&](std::size_t i, double q) {
        if (i == config.size()) {
          auto key = kids;
          std::sort(key.begin(), key.end());
          next[key] += q;
          return;
        }
        for (const auto& a : atoms) {
          const std::size_t mark = kids.size();
          for (double d : a.pattern) {
            const double c = config[i] + d;
            if (!killed || c >= 0.0) kids.push_back(c);
          }
          rec(i + 1, q * a.probability);
          kids.resize(mark);
        }
      };
      rec(0, p);
    }
    law = std::move(next);
  }
  return law;
}

/// E_x[F(positions of generation depth)] by full enumeration.
inline EnumerationResult enumerate_tree_expectation(const Model& model, double x, std::size_t depth,
                                                    const std::map<std::string, GenerationFunctional>& functionals,
                                                    bool killed = false) {
  if (depth > 6) throw CapError("tree enumeration is limited to depth <= 6");
  const auto law = generation_law(model, x, depth, killed);
  EnumerationResult r;
  r.depth = depth;
  r.outcome_count = law.size();
  KahanSum total;
  std::map<std::string, KahanSum> sums;
  for (const auto& [config, p] : law) {
    total.add(p);
    for (const auto& [name, f] : functionals) sums[name].add(p * f(config));
  }
  r.total_probability = total.sum;
  for (const auto& [name, s] : sums) r.expectations[name] = s.sum;
  return r;
}

/// E_x[sum_{|u|=n} F(V(u_0), ..., V(u_n))] = sum over intensity paths.
inline double path_expectation(const Model& model, double x, std::size_t n, const PathFunctional& F,
                               std::uint64_t budget = kOracleTermBudget) {
  const auto I = model.intensity();
  if (!I) throw ModelError("path enumeration needs a finitely supported model");
  if (std::pow(static_cast<double>(I->size()), static_cast<double>(n)) > static_cast<double>(budget))
    throw CapError("path enumeration exceeds the term budget");
  KahanSum total;
  std::vector<double> path{x};
  std::function<void(double)> rec = [&](double w) {
    if (path.size() == n + 1) {
      total.add(w * F(path));
      return;
    }
    for (const auto& m : *I) {
      path.push_back(path.back() + m.value);
      rec(w * m.weight);
      path.pop_back();
    }
  };
  rec(1.0);
  return total.sum;
}

/// Expected number of leaves of the killed tree in generations 1..depth.
inline double leaves_up_to_depth(const Model& model, double x, std::size_t depth) {
  double total = 0.0;
  for (std::size_t n = 1; n <= depth; ++n)
    total += path_expectation(model, x, n, [](const std::vector<double>& p) {
      for (std::size_t k = 0; k + 1 < p.size(); ++k)
        if (p[k] < 0.0) return 0.0;
      return p.back() < 0.0 ? 1.0 : 0.0;
    });
  return total;
}

namespace generation_functionals {

inline GenerationFunctional count() {
  return [](const std::vector<double>& g) { return static_cast<double>(g.size()); };
}
inline GenerationFunctional additive(double rho) {
  return [rho](const std::vector<double>& g) {
    double s = 0.0;
    for (double v : g) s += std::exp(rho * v);
    return s;
  };
}
inline GenerationFunctional derivative(double rho) {
  return [rho](const std::vector<double>& g) {
    double s = 0.0;
    for (double v : g) s -= rho * v * std::exp(rho * v);
    return s;
  };
}
inline GenerationFunctional additive_squared(double rho) {
  return [rho](const std::vector<double>& g) {
    double s = 0.0;
    for (double v : g) s += std::exp(rho * v);
    return s * s;
  };
}

}  // namespace generation_functionals

// ---------------------------------------------------------------------------
// Lattice walk dynamic programming.

struct Bounded {
  double value = 0.0;
  double error_bound = 0.0;
};

namespace detail {

inline double walk_span(const TiltedWalk& walk) {
  if (walk.is_gaussian() || !walk.model().lattice_span()) throw ModelError("walk oracle needs a lattice step law");
  return *walk.model().lattice_span();
}

// Solves u(y) = sum_s p_s [u(y+s) if lo <= y+s <= hi else g(y+s)] on the
// lattice x + hZ intersected with [lo, hi]; returns u(x).
inline double solve_exit_problem(const TiltedWalk& walk, double x, double lo, double hi,
                                 const std::function<double(double)>& g) {
  if (x < lo || x > hi) return g(x);
  const double h = walk_span(walk);
  const long kmin = static_cast<long>(std::ceil((lo - x) / h - 1e-9));
  const long kmax = static_cast<long>(std::floor((hi - x) / h + 1e-9));
  const long n = kmax - kmin + 1;
  if (n > 2'000'000) throw CapError("walk oracle: state space exceeds 2e6 points");
  const auto& steps = walk.step_masses();
  std::vector<Eigen::Triplet<double>> trip;
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
  for (long i = 0; i < n; ++i) {
    const double y = x + static_cast<double>(kmin + i) * h;
    trip.emplace_back(i, i, 1.0);
    for (const auto& s : steps) {
      const long j = i + std::lround(s.value / h);
      if (j >= 0 && j < n)
        trip.emplace_back(i, j, -s.weight);
      else
        b[i] += s.weight * g(y + s.value);
    }
  }
  Eigen::SparseMatrix<double> A(n, n);
  A.setFromTriplets(trip.begin(), trip.end());
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  lu.compute(A);
  if (lu.info() != Eigen::Success) throw Error("walk oracle: singular exit system");
  const Eigen::VectorXd u = lu.solve(b);
  return u[-kmin];
}

}  // namespace detail

/// E_x[f(S_tau); tau_t^+ < tau_0^-], tau = tau_t^+ wedge tau_0^-.
inline double exact_expectation_at_passage(const TiltedWalk& walk, double x, double t,
                                           const std::function<double(double)>& f) {
  if (x > t) return f(x);
  if (x < 0.0) return 0.0;
  return detail::solve_exit_problem(walk, x, 0.0, t, [&](double y) { return y > t ? f(y) : 0.0; });
}

inline double exact_passage_probability(const TiltedWalk& walk, double x, double t) {
  return exact_expectation_at_passage(walk, x, t, [](double) { return 1.0; });
}

/// E_x[H(t)] = e^{rho x} Q_x[e^{-rho S_tau}; tau_t^+ < tau_0^-].
inline double exact_EH(const TiltedWalk& walk, double x, double t) {
  const double r = walk.rho();
  return std::exp(r * x) * exact_expectation_at_passage(walk, x, t, [&](double y) { return std::exp(-r * y); });
}

/// Q_x(tau_0^- = inf) for a positive-drift lattice walk, from the exit problem
/// on [0, H] with e^{-theta H} <= eps.
inline Bounded exact_escape_probability(const TiltedWalk& walk, double x, double eps = 1e-12) {
  const double H = escape_height(walk, eps);
  const double p = exact_passage_probability(walk, x, H);
  return {p, p * std::exp(-walk.lundberg_exponent() * H)};
}

/// E_0[f(-S_{tau_0^-})] on the exit problem [0, height]; the part of the
/// expectation carried by paths that first reach above `height` is bounded by
/// sup|f| times their probability.
inline Bounded exact_undershoot_expectation(const TiltedWalk& walk, const std::function<double(double)>& f,
                                            double height, double f_sup) {
  const double v = detail::solve_exit_problem(walk, 0.0, 0.0, height, [&](double y) { return y < 0.0 ? f(-y) : 0.0; });
  const double p_top = exact_passage_probability(walk, 0.0, height);
  return {v, f_sup * p_top};
}

/// E_0[f(-S_{tau_0^-}) | tau_0^- < tau_height^+]. For a recurrent walk this
/// converges to the unconditional expectation as height grows.
inline double exact_conditional_undershoot(const TiltedWalk& walk, const std::function<double(double)>& f,
                                           double height) {
  const double v = detail::solve_exit_problem(walk, 0.0, 0.0, height, [&](double y) { return y < 0.0 ? f(-y) : 0.0; });
  return v / (1.0 - exact_passage_probability(walk, 0.0, height));
}

/// Exact law of S_k from x.
inline std::map<long, double> exact_kstep_law(const TiltedWalk& walk, double x, std::size_t k) {
  const double h = detail::walk_span(walk);
  std::map<long, double> law{{0, 1.0}};
  for (std::size_t i = 0; i < k; ++i) {
    std::map<long, double> next;
    for (const auto& [j, p] : law)
      for (const auto& s : walk.step_masses()) next[j + std::lround(s.value / h)] += p * s.weight;
    law = std::move(next);
  }
  (void)x;
  return law;
}

/// Exact law of X_k for the h-transform chain from y (keys: lattice offsets
/// from y in units of the span; positions y + key * span).
inline std::map<long, double> exact_conditioned_law(const TiltedWalk& walk, const RenewalTable& R, double y,
                                                    std::size_t k) {
  const double h = detail::walk_span(walk);
  std::map<long, double> law{{0, 1.0}};
  for (std::size_t i = 0; i < k; ++i) {
    std::map<long, double> next;
    for (const auto& [j, p] : law) {
      const double pos = y + static_cast<double>(j) * h;
      double M = 0.0;
      for (const auto& s : walk.step_masses()) M += s.weight * R(pos + s.value);
      for (const auto& s : walk.step_masses()) {
        const double w = s.weight * R(pos + s.value);
        if (w > 0.0) next[j + std::lround(s.value / h)] += p * w / M;
      }
    }
    law = std::move(next);
  }
  return law;
}

}  // namespace kbrw
