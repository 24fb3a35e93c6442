#pragma once

// Offspring point-process models and their log-Laplace transform.
//
// A model is either the iid case (nu children, displacements iid and
// independent of nu) or a finite list of possible offspring patterns. The
// log-Laplace transform psi(t) = log E[sum_{|u|=1} exp(t V(u))] and its first
// two derivatives are closed form for every built-in law.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "kbrw/error.hpp"
#include "kbrw/rng.hpp"

namespace kbrw {

/// Atom of a discrete measure (not necessarily a probability).
struct PointMass {
  double value = 0.0;
  double weight = 0.0;
};

/// Law of the number of children, a p.m.f. on {0, 1, ..., K}.
class OffspringLaw {
 public:
  OffspringLaw() = default;

  static OffspringLaw deterministic(unsigned k) {
    std::vector<double> p(k + 1, 0.0);
    p[k] = 1.0;
    return OffspringLaw(std::move(p));
  }

  static OffspringLaw from_pmf(std::vector<double> probs) { return OffspringLaw(std::move(probs)); }

  const std::vector<double>& pmf() const { return probs_; }
  unsigned max_count() const { return static_cast<unsigned>(probs_.size() - 1); }
  double mean() const { return mean_; }
  bool is_deterministic() const { return deterministic_.has_value(); }
  std::optional<unsigned> deterministic_value() const { return deterministic_; }

  unsigned sample(Rng& rng) const {
    if (deterministic_) return *deterministic_;
    const double u = uniform01(rng);
    for (std::size_t k = 0; k + 1 < cumulative_.size(); ++k)
      if (u < cumulative_[k]) return static_cast<unsigned>(k);
    return max_count();
  }

  /// P(size-biased count = k) = k P(nu = k) / E[nu].
  double size_biased_prob(unsigned k) const {
    return k < probs_.size() ? static_cast<double>(k) * probs_[k] / mean_ : 0.0;
  }

  unsigned sample_size_biased(Rng& rng) const {
    if (deterministic_) return *deterministic_;
    const double u = uniform01(rng);
    double acc = 0.0;
    for (unsigned k = 1; k <= max_count(); ++k) {
      acc += size_biased_prob(k);
      if (u < acc) return k;
    }
    return max_count();
  }

 private:
  explicit OffspringLaw(std::vector<double> probs) : probs_(std::move(probs)) {
    if (probs_.empty()) throw ModelError("offspring law: empty p.m.f.");
    double total = 0.0;
    for (double p : probs_) {
      if (!(p >= 0.0) || p > 1.0) throw ModelError("offspring law: probabilities must lie in [0,1]");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-12) throw ModelError("offspring law: probabilities must sum to 1");
    while (probs_.size() > 1 && probs_.back() == 0.0) probs_.pop_back();
    cumulative_.resize(probs_.size());
    std::partial_sum(probs_.begin(), probs_.end(), cumulative_.begin());
    mean_ = 0.0;
    for (std::size_t k = 0; k < probs_.size(); ++k) mean_ += static_cast<double>(k) * probs_[k];
    for (std::size_t k = 0; k < probs_.size(); ++k)
      if (probs_[k] == 1.0) deterministic_ = static_cast<unsigned>(k);
  }

  std::vector<double> probs_{1.0};
  std::vector<double> cumulative_{1.0};
  double mean_ = 0.0;
  std::optional<unsigned> deterministic_;
};

/// X = up with probability p_up, down otherwise.
struct TwoPointLaw {
  double up = 1.0;
  double p_up = 0.5;
  double down = -1.0;
};

/// Finitely supported displacement law.
struct DiscreteLaw {
  std::vector<double> values;
  std::vector<double> probs;
};

struct GaussianLaw {
  double mean = 0.0;
  double sd = 1.0;
};

using DisplacementLaw = std::variant<TwoPointLaw, DiscreteLaw, GaussianLaw>;

/// L = sum_{i<=nu} delta_{X_i}, (X_i) iid and independent of nu.
struct IidCase {
  OffspringLaw nu;
  DisplacementLaw displacement;
};

/// One possible realization of the offspring point process.
struct OutcomeAtom {
  double probability = 0.0;
  std::vector<double> pattern;
};

/// L takes finitely many values, listed with their probabilities.
struct GeneralFiniteSupport {
  std::vector<OutcomeAtom> atoms;
};

using ModelKind = std::variant<IidCase, GeneralFiniteSupport>;

/// psi and its first two derivatives at one point.
struct PsiValue {
  double value = 0.0;
  double d1 = 0.0;
  double d2 = 0.0;
};

namespace detail {

// log sum_i w_i exp(t x_i) and the mean / variance of x under the tilted weights.
inline PsiValue log_sum_exp_moments(const std::vector<PointMass>& masses, double t) {
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& m : masses)
    if (m.weight > 0.0) mx = std::max(mx, t * m.value);
  double s = 0.0, s1 = 0.0, s2 = 0.0;
  for (const auto& m : masses) {
    if (m.weight <= 0.0) continue;
    const double w = m.weight * std::exp(t * m.value - mx);
    s += w;
    s1 += w * m.value;
    s2 += w * m.value * m.value;
  }
  const double mean = s1 / s;
  return {mx + std::log(s), mean, std::max(0.0, s2 / s - mean * mean)};
}

inline double float_gcd(double a, double b, double tol) {
  a = std::abs(a);
  b = std::abs(b);
  while (b > tol) {
    double r = std::fmod(a, b);
    if (b - r < tol) r = 0.0;
    a = b;
    b = r;
  }
  return a;
}

inline std::vector<PointMass> merge_masses(std::vector<PointMass> masses) {
  std::sort(masses.begin(), masses.end(), [](const PointMass& a, const PointMass& b) { return a.value < b.value; });
  std::vector<PointMass> out;
  for (const auto& m : masses) {
    if (m.weight <= 0.0) continue;
    if (!out.empty() && std::abs(out.back().value - m.value) < 1e-12)
      out.back().weight += m.weight;
    else
      out.push_back(m);
  }
  return out;
}

inline std::vector<PointMass> displacement_masses(const DisplacementLaw& law) {
  if (const auto* tp = std::get_if<TwoPointLaw>(&law))
    return merge_masses({{tp->up, tp->p_up}, {tp->down, 1.0 - tp->p_up}});
  if (const auto* d = std::get_if<DiscreteLaw>(&law)) {
    std::vector<PointMass> m;
    for (std::size_t i = 0; i < d->values.size(); ++i) m.push_back({d->values[i], d->probs[i]});
    return merge_masses(std::move(m));
  }
  return {};
}

}  // namespace detail

/// Offspring point-process model. Immutable after construction.
class Model {
 public:
  Model(OffspringLaw nu, DisplacementLaw displacement) : kind_(IidCase{std::move(nu), std::move(displacement)}) {
    compile();
  }
  explicit Model(GeneralFiniteSupport general) : kind_(std::move(general)) { compile(); }
  explicit Model(ModelKind kind) : kind_(std::move(kind)) { compile(); }

  const ModelKind& kind() const { return kind_; }
  bool is_iid() const { return std::holds_alternative<IidCase>(kind_); }
  const IidCase& iid() const { return std::get<IidCase>(kind_); }
  bool is_gaussian() const { return gaussian_.has_value(); }
  const GaussianLaw& gaussian() const { return *gaussian_; }

  double mean_offspring() const { return mean_offspring_; }

  PsiValue psi_all(double t) const {
    PsiValue r;
    if (gaussian_) {
      const double s2 = gaussian_->sd * gaussian_->sd;
      r = {std::log(mean_offspring_) + gaussian_->mean * t + 0.5 * s2 * t * t, gaussian_->mean + s2 * t, s2};
    } else {
      r = detail::log_sum_exp_moments(intensity_, t);
    }
    if (!std::isfinite(r.value)) throw ModelError("log-Laplace transform diverges at t = " + std::to_string(t));
    return r;
  }
  double psi(double t) const { return psi_all(t).value; }

  /// psi in extended precision, for minimizations where double rounding
  /// dominates the resolution.
  long double psi_extended(long double t) const {
    if (gaussian_) {
      const long double m = gaussian_->mean, s = gaussian_->sd;
      return std::log(static_cast<long double>(mean_offspring_)) + m * t + 0.5L * s * s * t * t;
    }
    long double mx = -std::numeric_limits<long double>::infinity();
    for (const auto& m : intensity_) mx = std::max(mx, t * static_cast<long double>(m.value));
    long double sum = 0.0L;
    for (const auto& m : intensity_)
      sum += static_cast<long double>(m.weight) * std::exp(t * static_cast<long double>(m.value) - mx);
    return mx + std::log(sum);
  }
  double psi_prime(double t) const { return psi_all(t).d1; }
  double psi_second(double t) const { return psi_all(t).d2; }

  /// First-moment measure E[L({v})] for finitely supported models.
  std::optional<std::vector<PointMass>> intensity() const {
    if (gaussian_) return std::nullopt;
    return intensity_;
  }

  bool has_finite_support() const { return !gaussian_.has_value(); }

  /// Support contained in a + hZ for some h > 0.
  bool is_lattice() const { return lattice_; }

  /// Largest h with every displacement an integer multiple of h.
  std::optional<double> lattice_span() const { return span_; }

  /// Every possible realization of L as an ordered point pattern. For the iid
  /// case the patterns are all ordered tuples, so the table grows like
  /// |support|^K; `max_atoms` bounds it.
  std::vector<OutcomeAtom> outcome_table(std::size_t max_atoms = 1u << 20) const {
    if (const auto* g = std::get_if<GeneralFiniteSupport>(&kind_)) return g->atoms;
    if (gaussian_) throw ModelError("outcome table needs a finitely supported displacement law");
    const auto& nu = iid().nu;
    std::vector<OutcomeAtom> out;
    for (unsigned k = 0; k <= nu.max_count(); ++k) {
      const double pk = nu.pmf()[k];
      if (pk == 0.0) continue;
      std::vector<OutcomeAtom> level{{pk, {}}};
      for (unsigned i = 0; i < k; ++i) {
        std::vector<OutcomeAtom> next;
        for (const auto& a : level)
          for (const auto& m : displacement_masses_) {
            OutcomeAtom b = a;
            b.probability *= m.weight;
            b.pattern.push_back(m.value);
            next.push_back(std::move(b));
          }
        level = std::move(next);
        if (out.size() + level.size() > max_atoms) throw CapError("outcome table exceeds the atom budget");
      }
      out.insert(out.end(), level.begin(), level.end());
    }
    return out;
  }

  /// One realization of L: the displacements of the children of a particle.
  void sample_offspring(Rng& rng, std::vector<double>& out) const {
    out.clear();
    if (const auto* g = std::get_if<GeneralFiniteSupport>(&kind_)) {
      const double u = uniform01(rng);
      std::size_t a = 0;
      while (a + 1 < atom_cumulative_.size() && u >= atom_cumulative_[a]) ++a;
      out = g->atoms[a].pattern;
      return;
    }
    const unsigned k = iid().nu.sample(rng);
    for (unsigned i = 0; i < k; ++i) out.push_back(sample_displacement(rng));
  }

  /// One displacement from the iid-case law.
  double sample_displacement(Rng& rng) const {
    if (gaussian_) return gaussian_->mean + gaussian_->sd * rng.normal();
    if (two_point_) return uniform01(rng) < two_point_->p_up ? two_point_->up : two_point_->down;
    const double u = uniform01(rng);
    for (std::size_t i = 0; i + 1 < displacement_cumulative_.size(); ++i)
      if (u < displacement_cumulative_[i]) return displacement_masses_[i].value;
    return displacement_masses_.back().value;
  }

  /// Displacement law atoms (iid case with finite support).
  const std::vector<PointMass>& displacement_masses() const { return displacement_masses_; }

 private:
  void compile() {
    if (auto* c = std::get_if<IidCase>(&kind_)) {
      mean_offspring_ = c->nu.mean();
      if (const auto* g = std::get_if<GaussianLaw>(&c->displacement)) {
        if (!(g->sd > 0.0) || !std::isfinite(g->mean)) throw ModelError("gaussian law needs finite mean and sd > 0");
        gaussian_ = *g;
      } else {
        if (const auto* tp = std::get_if<TwoPointLaw>(&c->displacement)) {
          if (!(tp->p_up >= 0.0 && tp->p_up <= 1.0)) throw ModelError("two-point law: p_up must lie in [0,1]");
          two_point_ = *tp;
        }
        if (const auto* d = std::get_if<DiscreteLaw>(&c->displacement)) {
          if (d->values.size() != d->probs.size() || d->values.empty())
            throw ModelError("discrete law: values and probs must be non-empty and of equal length");
          double total = 0.0;
          for (double p : d->probs) {
            if (!(p >= 0.0)) throw ModelError("discrete law: negative probability");
            total += p;
          }
          if (std::abs(total - 1.0) > 1e-12) throw ModelError("discrete law: probabilities must sum to 1");
        }
        displacement_masses_ = detail::displacement_masses(c->displacement);
        displacement_cumulative_.clear();
        double acc = 0.0;
        for (const auto& m : displacement_masses_) displacement_cumulative_.push_back(acc += m.weight);
        std::vector<PointMass> inten;
        for (const auto& m : displacement_masses_) inten.push_back({m.value, mean_offspring_ * m.weight});
        intensity_ = detail::merge_masses(std::move(inten));
      }
    } else {
      auto& g = std::get<GeneralFiniteSupport>(kind_);
      if (g.atoms.empty()) throw ModelError("general model: no atoms");
      double total = 0.0;
      std::vector<PointMass> inten;
      mean_offspring_ = 0.0;
      for (const auto& a : g.atoms) {
        if (!(a.probability >= 0.0 && a.probability <= 1.0)) throw ModelError("general model: atom probability outside [0,1]");
        total += a.probability;
        mean_offspring_ += a.probability * static_cast<double>(a.pattern.size());
        for (double v : a.pattern) inten.push_back({v, a.probability});
        atom_cumulative_.push_back(total);
      }
      if (std::abs(total - 1.0) > 1e-12) throw ModelError("general model: atom probabilities must sum to 1 within 1e-12");
      intensity_ = detail::merge_masses(std::move(inten));
    }

    if (!(mean_offspring_ > 1.0)) throw ModelError("E[nu] must exceed 1 (supercritical Galton-Watson tree)");

    bool positive = gaussian_.has_value();
    for (const auto& m : intensity_)
      if (m.value > 0.0 && m.weight > 0.0) positive = true;
    if (!positive) throw ModelError("displacement support must meet (0, inf)");

    if (!gaussian_) {
      const double tol = 1e-9;
      double h = 0.0;
      for (std::size_t i = 1; i < intensity_.size(); ++i)
        h = detail::float_gcd(h, intensity_[i].value - intensity_[0].value, tol);
      lattice_ = intensity_.size() == 1 || h > 1e-6;
      double span = 0.0;
      for (const auto& m : intensity_) span = detail::float_gcd(span, m.value, tol);
      if (span > 1e-6) span_ = span;
    }
  }

  ModelKind kind_;
  double mean_offspring_ = 0.0;
  std::optional<GaussianLaw> gaussian_;
  std::optional<TwoPointLaw> two_point_;
  std::vector<PointMass> displacement_masses_;
  std::vector<double> displacement_cumulative_;
  std::vector<double> atom_cumulative_;
  std::vector<PointMass> intensity_;
  bool lattice_ = false;
  std::optional<double> span_;
};

// ---------------------------------------------------------------------------
// Characteristic exponents and regime.

enum class Regime { Critical, Subcritical, OutOfScope };

inline const char* to_string(Regime r) {
  switch (r) {
    case Regime::Critical: return "critical";
    case Regime::Subcritical: return "subcritical";
    default: return "out_of_scope";
  }
}

inline constexpr double kRegimeTolerance = 1e-9;

struct ModelAnalytics {
  double rho_star = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> rho_minus;
  std::optional<double> rho_plus;
  double psi_at_rho_star = std::numeric_limits<double>::quiet_NaN();
  double psi_prime_at_rho_star = std::numeric_limits<double>::quiet_NaN();
  Regime regime = Regime::OutOfScope;
  bool lattice = false;
  double mean_offspring = 0.0;
  /// rho* by golden-section minimization of psi(t)/t (cross-check value).
  double rho_star_golden = std::numeric_limits<double>::quiet_NaN();

  /// Tilt of the spine walk Q: rho* (critical) or rho+ (subcritical).
  double tilt() const {
    if (regime == Regime::Critical) return rho_star;
    if (regime == Regime::Subcritical) return *rho_plus;
    throw RegimeError("no spine tilt: model is out of scope (rightmost particle has non-negative speed)");
  }
};

namespace detail {

template <class F>
double bisect(F&& f, double lo, double hi, int iterations = 200) {
  double flo = f(lo);
  for (int i = 0; i < iterations; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    const double fm = f(mid);
    if ((fm < 0.0) == (flo < 0.0)) {
      lo = mid;
      flo = fm;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

/// Result of the two independent searches for rho*.
struct RhoStarSearch {
  double bisection = 0.0;
  double golden = 0.0;
};

/// rho* > 0 with psi(rho*) = rho* psi'(rho*): the minimizer of psi(t)/t.
/// Throws RegimeError when no interior minimizer exists in the search range.
inline RhoStarSearch find_rho_star_both(const Model& model) {
  constexpr double lo = 1e-6;
  constexpr double cap = 1e6;
  auto ratio = [&](double t) { return model.psi(t) / t; };
  double T = 1.0;
  while (ratio(2.0 * T) <= ratio(T)) {
    T *= 2.0;
    if (T > cap) throw RegimeError("psi(t)/t has no interior minimizer on (0, 1e6]");
  }
  const double hi = 2.0 * T;

  // Golden-section minimization of psi(t)/t.
  auto ratio_ext = [&](long double t) { return model.psi_extended(t) / t; };
  const long double inv_phi = (std::sqrt(5.0L) - 1.0L) / 2.0L;
  long double a = lo, b = hi;
  long double c = b - inv_phi * (b - a), d = a + inv_phi * (b - a);
  long double fc = ratio_ext(c), fd = ratio_ext(d);
  for (int i = 0; i < 300 && b - a > 1e-15L * (1.0L + a); ++i) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = ratio_ext(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = ratio_ext(d);
    }
  }
  const double golden = static_cast<double>(0.5L * (a + b));

  // g(t) = t psi'(t) - psi(t) is non-decreasing with g(0+) = -log E[nu] < 0.
  auto g = [&](double t) {
    const auto p = model.psi_all(t);
    return t * p.d1 - p.value;
  };
  if (!(g(hi) > 0.0)) throw RegimeError("t psi'(t) - psi(t) has no sign change in the search bracket");
  const double bis = detail::bisect(g, lo, hi);
  return {bis, golden};
}

inline double find_rho_star(const Model& model) { return find_rho_star_both(model).bisection; }

/// The two zeros rho- < rho* < rho+ of psi in the subcritical regime.
inline std::pair<double, double> find_rho_pm(const Model& model) {
  const double rs = find_rho_star(model);
  const auto at = model.psi_all(rs);
  if (std::abs(at.d1) <= kRegimeTolerance) throw RegimeError("critical regime: roots coincide at rho*");
  if (at.d1 > 0.0) throw RegimeError("psi'(rho*) > 0: model is out of scope, psi has no positive zeros");
  auto psi = [&](double t) { return model.psi(t); };
  const double rm = detail::bisect(psi, 0.0, rs);
  double U = 2.0 * rs;
  while (!(model.psi(U) > 0.0)) {
    U *= 2.0;
    if (U > 1e6) throw RegimeError("no upper zero of psi found below 1e6");
  }
  const double rp = detail::bisect(psi, rs, U);
  return {rm, rp};
}

inline ModelAnalytics classify_regime(const Model& model) {
  ModelAnalytics a;
  a.mean_offspring = model.mean_offspring();
  a.lattice = model.is_lattice();
  RhoStarSearch rs;
  try {
    rs = find_rho_star_both(model);
  } catch (const RegimeError&) {
    a.regime = Regime::OutOfScope;
    return a;
  }
  a.rho_star = rs.bisection;
  a.rho_star_golden = rs.golden;
  const auto p = model.psi_all(a.rho_star);
  a.psi_at_rho_star = p.value;
  a.psi_prime_at_rho_star = p.d1;
  if (std::abs(p.d1) <= kRegimeTolerance) {
    a.regime = Regime::Critical;
  } else if (p.d1 < 0.0) {
    a.regime = Regime::Subcritical;
    const auto [rm, rp] = find_rho_pm(model);
    a.rho_minus = rm;
    a.rho_plus = rp;
  } else {
    a.regime = Regime::OutOfScope;
  }
  return a;
}

// ---------------------------------------------------------------------------
// Reference models used throughout the tests and the acceptance suite.

namespace models {

/// nu = 2, X = +1 w.p. p, -1 otherwise. Subcritical for p = 0.05.
inline Model two_point(double p_up = 0.05) {
  return Model(OffspringLaw::deterministic(2), TwoPointLaw{1.0, p_up, -1.0});
}

/// nu = 2, X = +/-1 with P(+1) = (2 - sqrt 3)/4: critical, rho* = log(2 + sqrt 3),
/// and the rho*-tilted step is the simple symmetric random walk.
inline Model lattice_critical() { return two_point((2.0 - std::sqrt(3.0)) / 4.0); }

/// nu = 2, X ~ Normal(mu, sd^2).
inline Model binary_gaussian(double mu, double sd = 1.0) {
  return Model(OffspringLaw::deterministic(2), GaussianLaw{mu, sd});
}

/// Critical binary Gaussian model, mu = -sqrt(2 log 2), rho* = sqrt(2 log 2).
inline Model critical_binary_gaussian() { return binary_gaussian(-std::sqrt(2.0 * std::log(2.0))); }

/// nu in {0,1,2} with probabilities (0.2, 0.4, 0.4), Gaussian displacements
/// with mean -sqrt(2 log 1.2): critical with E[nu] = 1.2, so generation sizes
/// stay small enough to follow the non-killed walk for 20+ generations.
inline Model sparse_critical_gaussian() {
  return Model(OffspringLaw::from_pmf({0.2, 0.4, 0.4}), GaussianLaw{-std::sqrt(2.0 * std::log(1.2)), 1.0});
}

}  // namespace models

}  // namespace kbrw
