// Acceptance suite: one PASS/FAIL line per criterion, 1..12.
// Usage: acceptance [criterion ...]   (default: all)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "kbrw/experiment.hpp"

using namespace kbrw;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

unsigned workers() { return resolve_workers(std::max(1u, std::thread::hardware_concurrency())); }

McConfig cfg(std::uint64_t n, std::uint64_t seed) { return {n, seed, workers()}; }

const double kRhoC = std::log(2.0 + std::sqrt(3.0));
// e^{rho-+} are the roots of 0.1 y^2 - y + 1.9.
const double kYPlus = (1.0 + std::sqrt(0.24)) / 0.2;
const double kYMinus = (1.0 - std::sqrt(0.24)) / 0.2;
const double kRhoPlus = std::log(kYPlus);
const double kRhoMinus = std::log(kYMinus);
// The rho+ walk steps up with probability q; it ever goes below 0 with
// probability r = (1 - q)/q.
const double kQ = 0.05 * kYPlus / 0.5;
const double kR = (1.0 - kQ) / kQ;
const double kEscape = 1.0 - kR;

TiltedWalk ssrw() { return TiltedWalk(models::lattice_critical(), kRhoC); }
TiltedWalk plus_walk() { return TiltedWalk(models::two_point(), kRhoPlus); }
TiltedWalk gaussian_walk() { return TiltedWalk(models::critical_binary_gaussian(), std::sqrt(2.0 * std::log(2.0))); }

// 1. Exploration identity.
Outcome exploration() {
  struct Acc {
    std::uint64_t ok = 0, bad = 0, truncated = 0;
    void merge(const Acc& o) {
      ok += o.ok;
      bad += o.bad;
      truncated += o.truncated;
    }
  };
  std::string d;
  bool pass = true;
  int salt = 0;
  for (const auto& [name, m] : {std::pair{"lattice critical", models::lattice_critical()}, {"two-point", models::two_point()}}) {
    TreeOptions opt;
    opt.record_nu = true;
    const auto acc = run_replicas<Acc>(cfg(1'000'000, 100 + salt++), [&](Acc& a, Rng& rng, std::uint64_t) {
      KilledTreeSimulator sim(m, opt);
      const auto& r = sim.run(1.0, rng);
      if (r.truncated) {
        ++a.truncated;
        return;
      }
      (exploration_check(r) == Verdict::True ? a.ok : a.bad) += 1;
    });
    pass = pass && acc.bad == 0 && acc.ok + acc.truncated == 1'000'000 && acc.ok > 990'000;
    d += fmt("%s: %llu/%llu decided trees satisfy Y_Z = #L[0] (%llu truncated); ", name,
             static_cast<unsigned long long>(acc.ok), static_cast<unsigned long long>(acc.ok + acc.bad),
             static_cast<unsigned long long>(acc.truncated));
  }
  d.resize(d.size() - 2);
  return {pass, d};
}

// 2. Oracle matrix.
Outcome oracle_matrix() {
  struct Pair {
    std::string name;
    double exact;
    std::function<EstimateWithCI(const McConfig&)> mc;
  };
  const std::uint64_t n = 1'000'000;
  const auto s = ssrw();
  const auto p = plus_walk();
  const auto lc = models::lattice_critical();
  const auto tp = models::two_point();
  const auto ac = classify_regime(lc), at = classify_regime(tp);
  std::vector<Pair> pairs;
  for (auto [x, t] : std::vector<std::pair<double, double>>{{0, 3}, {2, 5}, {1, 10}})
    pairs.push_back({fmt("ssrw P_%g(tau_%g+ < tau_0-)", x, t), exact_passage_probability(s, x, t),
                     [=, &s](const McConfig& c) { return passage_probability(s, x, t, c); }});
  for (auto [x, t] : std::vector<std::pair<double, double>>{{0, 3}, {1, 5}, {0, 10}})
    pairs.push_back({fmt("rho+ walk P_%g(tau_%g+ < tau_0-)", x, t), exact_passage_probability(p, x, t),
                     [=, &p](const McConfig& c) { return passage_probability(p, x, t, c); }});
  pairs.push_back({"rho+ walk escape", exact_escape_probability(p, 0.0).value,
                   [&p](const McConfig& c) { return escape_probability(p, c); }});
  for (auto [x, t] : std::vector<std::pair<double, double>>{{1, 4}, {2, 4}}) {
    pairs.push_back({fmt("lattice E_%g[H(%g)] spine", x, t), exact_EH(s, x, t),
                     [=, &lc, &ac](const McConfig& c) { return estimate_EH(lc, ac, x, t, c); }});
    pairs.push_back({fmt("lattice E_%g[H(%g)] trees", x, t), exact_EH(s, x, t),
                     [=, &lc](const McConfig& c) { return forward_EH(lc, x, t, c); }});
  }
  pairs.push_back({"two-point E_1[H(4)] spine", exact_EH(p, 1.0, 4.0),
                   [&](const McConfig& c) { return estimate_EH(tp, at, 1.0, 4.0, c); }});
  pairs.push_back({"two-point E_1[H(4)] trees", exact_EH(p, 1.0, 4.0),
                   [&](const McConfig& c) { return forward_EH(tp, 1.0, 4.0, c); }});
  pairs.push_back({"lattice E_1[#{|u|=3 alive}]",
                   enumerate_tree_expectation(lc, 1.0, 3, {{"n", generation_functionals::count()}}, true).expectations.at("n"),
                   [&](const McConfig& c) { return many_to_one_estimate(lc, kRhoC, 1.0, 3, functionals::alive(), c); }});
  double max_z = 0.0;
  std::string worst;
  std::uint64_t salt = 200;
  for (const auto& pr : pairs) {
    const double z = z_score(pr.mc(cfg(n, salt++)), pr.exact);
    if (z >= max_z) {
      max_z = z;
      worst = pr.name;
    }
  }
  return {pairs.size() >= 12 && max_z <= 4.0,
          fmt("%zu pairs at 1e6 replicas, max z = %.2f (%s), bound 4", pairs.size(), max_z, worst.c_str())};
}

// 3. Many-to-one.
Outcome many_to_one() {
  double max_z = 0.0, exact_err = 0.0;
  std::uint64_t salt = 300;
  for (const auto& [m, rho] : {std::pair{models::lattice_critical(), kRhoC}, {models::two_point(), kRhoPlus}}) {
    exact_err = std::max(exact_err, std::abs(many_to_one_exact(m, rho, 1.0, 1, functionals::one()) - 2.0));
    for (std::size_t n = 1; n <= 3; ++n)
      for (const auto& F : {functionals::one(), functionals::alive()}) {
        const double exact = path_expectation(m, 1.0, n, F);
        max_z = std::max(max_z, z_score(many_to_one_estimate(m, rho, 1.0, n, F, cfg(1'000'000, salt++)), exact));
      }
  }
  return {max_z <= 4.0 && exact_err <= 1e-12,
          fmt("12 cases, max z = %.2f (bound 4); n=1, F=1 tilted sum vs E[nu]: error %.1e (bound 1e-12)", max_z, exact_err)};
}

// 4. Martingale means.
Outcome martingales() {
  const auto m = models::sparse_critical_gaussian();
  const auto a = classify_regime(m);
  const std::vector<std::size_t> gens{1, 5, 20};
  struct Acc {
    std::vector<MeanAccumulator> w{3}, dw{3};
    void merge(const Acc& o) {
      for (std::size_t i = 0; i < 3; ++i) {
        w[i].merge(o.w[i]);
        dw[i].merge(o.dw[i]);
      }
    }
  };
  const auto acc = run_replicas<Acc>(cfg(400'000, 400), [&](Acc& s, Rng& rng, std::uint64_t) {
    const auto traj = martingale_trajectory(m, a, 0.0, 20, rng);
    for (std::size_t i = 0; i < 3; ++i) {
      const auto& t = traj[gens[i]];
      if (t.truncated) {
        s.w[i].add_truncated();
        s.dw[i].add_truncated();
        continue;
      }
      s.w[i].add(t.additive_W_n);
      s.dw[i].add(t.derivative_dW_n);
    }
  });
  double max_z = 0.0;
  for (std::size_t i = 0; i < 3; ++i)
    max_z = std::max({max_z, z_score(acc.w[i].estimate(), 1.0), z_score(acc.dw[i].estimate(), 0.0)});
  // Enumeration: E[W_n] = e^{rho x}, E[dW_n] = -rho x e^{rho x} on the lattice model.
  double err = 0.0;
  const auto lc = models::lattice_critical();
  for (double x : {0.0, 1.0})
    for (std::size_t n = 1; n <= 3; ++n) {
      const auto e = enumerate_tree_expectation(lc, x, n,
                                                {{"W", generation_functionals::additive(kRhoC)},
                                                 {"dW", generation_functionals::derivative(kRhoC)}});
      err = std::max({err, std::abs(e.expectations.at("W") - std::exp(kRhoC * x)),
                      std::abs(e.expectations.at("dW") + kRhoC * x * std::exp(kRhoC * x))});
    }
  return {max_z <= 4.0 && err <= 1e-9,
          fmt("sparse critical Gaussian, x=0, n in {1,5,20}, 4e5 replicas: max z = %.2f (bound 4); "
              "enumeration n<=3: max error %.1e (bound 1e-9)",
              max_z, err)};
}

// 5. Renewal machinery.
Outcome renewal() {
  std::vector<double> grid;
  for (int i = 0; i < 10; ++i) grid.push_back(0.5 * i);
  const auto g = gaussian_walk();
  const auto v = renewal_function(g, grid, RenewalMethod::VisitCount, cfg(1'000'000, 500));
  const auto l = renewal_function(g, grid, RenewalMethod::LadderDuality, cfg(1'000'000, 501));
  double max_z = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i) max_z = std::max(max_z, pooled_z(v.r_values[i], l.r_values[i]));

  // Closed forms: x + 1 for the simple walk, sum_{n <= x} r^n for the rho+ walk.
  std::vector<double> lat{0, 1, 2, 3, 5, 8};
  double max_rel = 0.0;
  std::uint64_t salt = 502;
  for (auto method : {RenewalMethod::VisitCount, RenewalMethod::LadderDuality}) {
    const auto rs = renewal_function(ssrw(), lat, method, cfg(1'000'000, salt++));
    const auto rp = renewal_function(plus_walk(), lat, method, cfg(1'000'000, salt++));
    for (std::size_t i = 0; i < lat.size(); ++i) {
      double geo = 0.0;
      for (int n = 0; n <= static_cast<int>(lat[i]); ++n) geo += std::pow(kR, n);
      max_rel = std::max({max_rel, std::abs(rs.r_values[i].value / (lat[i] + 1.0) - 1.0),
                          std::abs(rp.r_values[i].value / geo - 1.0)});
    }
  }
  const auto cs = estimate_C_R(ssrw(), cfg(1'000'000, 510));
  const auto cp = estimate_C_R(plus_walk(), cfg(1'000'000, 511));
  const double cr_rel = std::max(std::abs(cs.c_r.value - 1.0), std::abs(cp.c_r.value * kEscape - 1.0));
  return {max_z <= 4.0 && max_rel <= 0.01 && cr_rel <= 0.02,
          fmt("Gaussian duality max pooled z = %.2f (bound 4); closed forms max rel error %.4f (bound 0.01); "
              "C_R = %.4f, %.4f vs 1, %.6f: max rel error %.4f (bound 0.02)",
              max_z, max_rel, cs.c_r.value, cp.c_r.value, 1.0 / kEscape, cr_rel)};
}

// 6. First-passage asymptotics.
Outcome first_passage_asymptotics() {
  const auto cs = estimate_C_R(ssrw(), cfg(1'000'000, 600), {50.0});
  const auto cp = estimate_C_R(plus_walk(), cfg(1'000'000, 601), {20.0});
  const bool pass = cs.consistency >= 0.9 && cs.consistency <= 1.1 && cp.consistency >= 0.9 && cp.consistency <= 1.1;
  return {pass, fmt("critical C_R t P(t=50) = %.4f (exact 50/52 = %.4f); subcritical C_R P(t=20) = %.4f; band [0.9, 1.1]",
                    cs.consistency, 50.0 / 52.0, cp.consistency)};
}

// 7. Conditioned walks.
Outcome conditioned_walks() {
  const std::size_t k = 10;
  const std::uint64_t n = 100'000;
  const auto w = ssrw();
  const auto R = *closed_form_renewal(w);
  struct Acc {
    std::vector<double> end;
    std::uint64_t paths = 0, positive = 0, truncated = 0;
    MeanAccumulator weight;
    void merge(const Acc& o) {
      end.insert(end.end(), o.end.begin(), o.end.end());
      paths += o.paths;
      positive += o.positive;
      truncated += o.truncated;
      weight.merge(o.weight);
    }
  };
  auto tanaka = [&](const TiltedWalk& walk, double mean_h, std::uint64_t seed) {
    const HatSSampler hs(walk, mean_h);
    return run_replicas<Acc>(cfg(n, seed), [&](Acc& a, Rng& rng, std::uint64_t) {
      const auto s = hs.sample(k, rng);
      if (s.truncated) {
        ++a.truncated;
        a.weight.add_truncated();
        return;
      }
      ++a.paths;
      bool pos = true;
      for (std::size_t j = 1; j < s.path.positions.size(); ++j) pos = pos && s.path.positions[j] > 0.0;
      a.positive += pos;
      a.end.push_back(s.path.positions[k]);
      a.weight.add(s.weight);
    });
  };
  const auto ts = tanaka(w, 1.0, 700);
  // zeta_k = 1 + X_{k-1}, X the h-transform chain from 0.
  const auto hc = run_replicas<Acc>(cfg(n, 701), [&](Acc& a, Rng& rng, std::uint64_t) {
    a.end.push_back(1.0 + conditioned_chain(w, R, 0.0, k - 1, rng).back());
  });
  const auto ks = ks_two_sample(ts.end, hc.end);
  // Symmetric unit-variance steps: E[H_1] = 1/sqrt 2.
  const auto tg = tanaka(gaussian_walk(), 1.0 / std::sqrt(2.0), 702);
  const auto tp = tanaka(plus_walk(), 1.0, 703);
  const auto wt = tg.weight.estimate();
  const double zw = z_score(wt, 1.0);
  const std::uint64_t paths = ts.paths + tg.paths + tp.paths;
  const std::uint64_t positive = ts.positive + tg.positive + tp.positive;
  const bool pass = ks.p_value > 0.01 && positive == paths && paths > 0 && zw <= 3.0;
  return {pass, fmt("KS Tanaka vs h-transform at k=10, 1e5 each: p = %.3f (bound > 0.01); positivity %llu/%llu paths "
                    "(%llu truncated); Gaussian hat-S mean weight %.4f, z = %.2f (bound 3)",
                    ks.p_value, static_cast<unsigned long long>(positive), static_cast<unsigned long long>(paths),
                    static_cast<unsigned long long>(ts.truncated + tg.truncated + tp.truncated), wt.value, zw)};
}

// 8. Survival asymptotics.
Outcome survival() {
  struct Case {
    const char* name;
    Model m;
    double t1, t2;
  };
  bool pass = true;
  std::string d;
  std::uint64_t salt = 800;
  for (const auto& c : {Case{"critical Gaussian", models::critical_binary_gaussian(), 4.0, 8.0},
                        Case{"subcritical Gaussian mu=-1.5", models::binary_gaussian(-1.5), 3.0, 6.0}}) {
    const auto a = classify_regime(c.m);
    const bool critical = a.regime == Regime::Critical;
    const TiltedWalk w(c.m, a.tilt());
    // Any positive weight is unbiased; the table only needs to be rough.
    const auto R = detail::regime_renewal(w, c.t2 + 10.0, cfg(200'000, salt++));
    const auto e1 = estimate_survival_spine(c.m, a, 0.0, c.t1, R, cfg(1'000'000, salt++));
    const auto e2 = estimate_survival_spine(c.m, a, 0.0, c.t2, R, cfg(1'000'000, salt++));
    TreeOptions opt;
    opt.probe_levels = {c.t1};
    const auto naive = run_replicas<MeanAccumulator>(cfg(2'000'000, salt++), [&](MeanAccumulator& acc, Rng& rng,
                                                                                  std::uint64_t) {
                         KilledTreeSimulator sim(c.m, opt);
                         const auto& r = sim.run(0.0, rng);
                         if (r.truncated)
                           acc.add_truncated();
                         else
                           acc.add(r.H[0] > 0 ? 1.0 : 0.0);
                       }).estimate();
    const double z = pooled_z(e1.estimate, naive);
    auto norm = [&](double t, double p) { return (critical ? t : 1.0) * std::exp(a.tilt() * t) * p; };
    const double ratio = norm(c.t1, e1.estimate.value) / norm(c.t2, e2.estimate.value);
    const bool ok = z <= 4.0 && (critical ? (ratio >= 1.0 / 1.5 && ratio <= 1.5) : std::abs(ratio - 1.0) <= 0.25);
    pass = pass && ok;
    d += fmt("%s: normalized ratio t=%g/%g = %.3f (%s), spine vs naive z = %.2f (bound 4); ", c.name, c.t1, c.t2, ratio,
             critical ? "band [1/1.5, 1.5]" : "|ratio-1| <= 0.25", z);
  }
  d.resize(d.size() - 2);
  return {pass, d};
}

// 9. Subcritical tail exponent.
Outcome subcritical_tail() {
  const auto m = models::two_point();
  const auto a = classify_regime(m);
  const auto grid = geometric_grid(100.0, 10000.0, std::pow(10.0, 0.25));
  SplitTailOptions o;
  o.t = 4.0;
  o.naive = cfg(5'000'000, 900);
  o.spine = cfg(5'000'000, 901);
  const auto tail = progeny_tail_split(m, a, 0.0, grid, *closed_form_renewal(plus_walk()), o);
  const double ref = -kRhoPlus / kRhoMinus;
  const auto fit = tail_fit(tail.progeny, TailMode::SubcriticalSlope, -ref);
  const double rel = std::abs(fit.fitted.value / ref - 1.0);
  return {rel <= 0.15, fmt("two-point slope of P(Z>n) over [1e2, 1e4], 5e6 + 5e6 replicas: %.4f +- %.4f vs %.5f, "
                           "rel error %.3f (bound 0.15)",
                           fit.fitted.value, fit.fitted.std_error, ref, rel)};
}

// 10. Critical tail plateau.
Outcome critical_tail() {
  const auto m = models::critical_binary_gaussian();
  const auto a = classify_regime(m);
  const auto grid = geometric_grid(100.0, 1000.0, std::pow(10.0, 0.25));
  const auto tail = progeny_tail_naive(m, 0.0, grid, cfg(10'000'000, 1000));
  const auto fit = tail_fit(tail.progeny, TailMode::CriticalPlateau);
  ConstantsBudget b;
  b.mc = cfg(1'000'000, 1001);
  const auto c = estimate_constants(m, a, Regime::Critical, b).at("c_crit");
  // x = 0: R(0) e^{0} = 1.
  const double ratio = fit.fitted.value / c.value;
  return {fit.goodness_of_fit <= 2.0 && ratio >= 0.5 && ratio <= 2.0,
          fmt("critical Gaussian, 1e7 trees: spread over [1e2, 1e3] = %.3f (bound 2); plateau %.4f vs c_crit %.4f, "
              "ratio %.3f (band [0.5, 2])",
              fit.goodness_of_fit, fit.fitted.value, c.value, ratio)};
}

// 11. Tail of a random sum of Pareto terms.
Outcome convolution() {
  struct Conf {
    unsigned xi;
    double p;
  };
  bool pass = true;
  std::string d;
  std::uint64_t salt = 1100;
  for (const auto& c : {Conf{1, 2.0}, Conf{2, 2.0}, Conf{1, 1.0}}) {
    const auto r = convolution_tail_check(OffspringLaw::deterministic(c.xi), DiscreteLaw{{1.0}, {1.0}}, c.p, 1.0,
                                          cfg(10'000'000, salt++), {10, 30, 100});
    const double rel = std::abs(r.scaled_tail.back().value / r.limit - 1.0);
    pass = pass && rel <= 0.10;
    d += fmt("xi=%u p=%g: t^p P(t=100) = %.4f vs %.4g (rel %.3f); ", c.xi, c.p, r.scaled_tail.back().value, r.limit, rel);
  }
  return {pass, d + "bound 0.10"};
}

// 12. Reproducibility.
Outcome reproducibility() {
  const auto dir = std::filesystem::temp_directory_path() / ("kbrw_accept_" + std::to_string(::getpid()));
  auto summary = [&](unsigned w, const std::string& sub) {
    ExperimentConfig c;
    c.model = to_json(models::two_point());
    c.command = "spine";
    c.flags = {{"op", "survival"}, {"x", 1.0}, {"t", 4.0}, {"replicas", 200000}, {"naive_replicas", 200000}};
    c.seed = 12;
    c.workers = w;
    c.output_dir = dir / sub;
    const auto out = run(c);
    std::ifstream in(c.output_dir / "summary.json");
    std::stringstream ss;
    ss << in.rdbuf();
    return std::pair{out.summary.dump(), ss.str()};
  };
  const auto a = summary(1, "w1");
  const auto b = summary(8, "w8");
  std::filesystem::remove_all(dir);
  const bool pass = a.first == b.first && a.second == b.second && !a.second.empty();
  return {pass, fmt("spine survival run at 1 and 8 workers: summary.json %s (%zu bytes)",
                    a.second == b.second ? "byte-identical" : "differs", a.second.size())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<Outcome()>> criteria{
      exploration,  oracle_matrix, many_to_one,      martingales,      renewal,     first_passage_asymptotics,
      conditioned_walks, survival, subcritical_tail, critical_tail,    convolution, reproducibility};
  std::set<int> pick;
  for (int i = 1; i < argc; ++i) pick.insert(std::atoi(argv[i]));
  int failed = 0;
  for (int i = 1; i <= 12; ++i) {
    if (!pick.empty() && !pick.count(i)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i - 1]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %2d: %s  %s [%.1fs]\n", i, o.pass ? "PASS" : "FAIL", o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed ? 1 : 0;
}
