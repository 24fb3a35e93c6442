#include <cmath>
#include <functional>
#include <string>

#include <gtest/gtest.h>

#include "kbrw/brw.hpp"
#include "kbrw/oracle.hpp"
#include "kbrw/parallel.hpp"
#include "kbrw/spine.hpp"

using namespace kbrw;

namespace {

double rho_c() { return std::log(2.0 + std::sqrt(3.0)); }
double q_c() { return (2.0 - std::sqrt(3.0)) / 4.0; }
double y_plus() { return (1.0 + std::sqrt(1.0 - 0.76)) / 0.2; }

TiltedWalk ssrw() { return TiltedWalk(models::lattice_critical(), rho_c()); }
TiltedWalk plus_walk() { return TiltedWalk(models::two_point(), std::log(y_plus())); }

McConfig cfg(std::uint64_t n, std::uint64_t seed) {
  McConfig c;
  c.replicas = n;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Enumeration, ProbabilitiesSumToOne) {
  for (std::size_t d : {0, 1, 2, 3}) {
    const auto r = enumerate_tree_expectation(models::two_point(), 0.0, d, {});
    EXPECT_NEAR(r.total_probability, 1.0, 1e-14) << d;
  }
  const auto k = enumerate_tree_expectation(models::lattice_critical(), 1.0, 3, {}, true);
  EXPECT_NEAR(k.total_probability, 1.0, 1e-14);
}

TEST(Enumeration, GenerationCounts) {
  using namespace generation_functionals;
  const auto r = enumerate_tree_expectation(models::lattice_critical(), 0.0, 3, {{"n", count()}});
  EXPECT_NEAR(r.expectations.at("n"), 8.0, 1e-12);
  // From 1, a particle is killed only by -1, -1; two particles per step.
  const auto k = enumerate_tree_expectation(models::lattice_critical(), 1.0, 2, {{"n", count()}}, true);
  const double q = q_c();
  EXPECT_NEAR(k.expectations.at("n"), 4.0 * (1.0 - (1.0 - q) * (1.0 - q)), 1e-12);
  const auto dead = generation_law(models::lattice_critical(), -1.0, 2, true);
  ASSERT_EQ(dead.size(), 1u);
  EXPECT_TRUE(dead.begin()->first.empty());
}

TEST(Enumeration, AdditiveMartingaleMeans) {
  using namespace generation_functionals;
  struct Case {
    Model m;
    double rho;
  };
  const double y_minus = 19.0 / y_plus();
  for (const auto& c : {Case{models::lattice_critical(), rho_c()}, Case{models::two_point(), std::log(y_plus())},
                        Case{models::two_point(), std::log(y_minus)}})
    for (double x : {0.0, 0.7})
      for (std::size_t n : {1, 2, 3}) {
        const auto r = enumerate_tree_expectation(c.m, x, n, {{"W", additive(c.rho)}, {"D", derivative(c.rho)}});
        EXPECT_NEAR(r.expectations.at("W"), std::exp(c.rho * x), 1e-10 * std::exp(c.rho * x));
        // E[-sum rho V e^{rho V}] = -rho (x + n psi'(rho)) e^{rho x}.
        const double dpsi = c.m.psi_all(c.rho).d1;
        EXPECT_NEAR(r.expectations.at("D"), -c.rho * (x + n * dpsi) * std::exp(c.rho * x), 1e-9) << n << " " << x;
      }
}

TEST(Enumeration, DepthLimits) {
  EXPECT_THROW(enumerate_tree_expectation(models::two_point(), 0.0, 7, {}), CapError);
  EXPECT_THROW(generation_law(models::two_point(), 0.0, 6, false, 1000), CapError);
}

TEST(Enumeration, LeavesByDepth) {
  // Depth 1 from 0: each of the two children is a leaf with probability 1 - q.
  EXPECT_NEAR(leaves_up_to_depth(models::lattice_critical(), 0.0, 1), 2.0 * (1.0 - q_c()), 1e-14);
  // Leaves from 0 sit in odd generations only.
  double prev = 0.0;
  for (std::size_t d = 1; d <= 9; d += 2) {
    const double v = leaves_up_to_depth(models::lattice_critical(), 0.0, d);
    EXPECT_GT(v, prev);
    EXPECT_EQ(leaves_up_to_depth(models::lattice_critical(), 0.0, d + 1), v);
    EXPECT_LT(v, 2.0 + std::sqrt(3.0));
    prev = v;
  }
}

TEST(WalkDp, GamblersRuin) {
  const auto w = ssrw();
  for (double t : {3.0, 10.0, 50.0})
    for (double x : {0.0, 1.0, 2.0})
      EXPECT_NEAR(exact_passage_probability(w, x, t), (x + 1.0) / (t + 2.0), 1e-12) << x << " " << t;
  EXPECT_EQ(exact_passage_probability(w, 11.0, 10.0), 1.0);
  EXPECT_EQ(exact_passage_probability(w, -1.0, 10.0), 0.0);
}

TEST(WalkDp, EscapeProbability) {
  const auto e = exact_escape_probability(plus_walk(), 0.0);
  EXPECT_NEAR(e.value, 0.6576261804, 1e-9);
  EXPECT_LT(e.error_bound, 1e-11);
  // Gambler's ruin: the walk from 0 ever reaches -1 with probability (1 - q)/q.
  const double q = 0.05 * y_plus() / 0.5;
  EXPECT_NEAR(e.value, 1.0 - (1.0 - q) / q, 1e-10);
}

TEST(WalkDp, UndershootAndRenewalConstant) {
  const auto w = ssrw();
  const auto u = exact_undershoot_expectation(w, [](double y) { return std::exp(rho_c() * y); }, 200.0, std::exp(rho_c()));
  // Recurrent walk: the undershoot is 1 and the top is reached with probability 1/202.
  EXPECT_NEAR(u.value, std::exp(rho_c()) * (1.0 - 1.0 / 202.0), 1e-10);
  EXPECT_NEAR(u.error_bound, std::exp(rho_c()) / 202.0, 1e-12);
  EXPECT_NEAR(exact_conditional_undershoot(w, [](double y) { return std::exp(rho_c() * y); }, 50.0), std::exp(rho_c()),
              1e-12);
  const double mean = exact_conditional_undershoot(w, [](double y) { return y; }, 50.0);
  EXPECT_NEAR(1.0 / mean, 1.0, 1e-12);
}

TEST(WalkDp, StoppingLineMean) {
  const auto w = ssrw();
  for (double t : {2.0, 5.0, 9.0})
    EXPECT_NEAR(exact_EH(w, 0.0, t), std::exp(-rho_c() * (t + 1.0)) / (t + 2.0), 1e-14);
  EXPECT_NEAR(exact_EH(w, 7.0, 5.0), 1.0, 1e-15);
}

TEST(WalkDp, KStepLaw) {
  const auto w = plus_walk();
  const auto law = exact_kstep_law(w, 0.0, 6);
  double total = 0.0, mean = 0.0;
  for (const auto& [j, p] : law) {
    total += p;
    mean += static_cast<double>(j) * p;
  }
  EXPECT_NEAR(total, 1.0, 1e-14);
  EXPECT_NEAR(mean, 6.0 * w.drift(), 1e-12);
  EXPECT_THROW(exact_kstep_law(TiltedWalk(models::critical_binary_gaussian(), std::sqrt(2.0 * std::log(2.0))), 0.0, 1),
               ModelError);
}

TEST(WalkDp, ConditionedChain) {
  const auto R = *closed_form_renewal(ssrw());
  const auto one = exact_conditioned_law(ssrw(), R, 0.0, 1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one.begin()->first, 1);
  const auto from1 = exact_conditioned_law(ssrw(), R, 1.0, 1);
  EXPECT_NEAR(from1.at(1), 0.75, 1e-14);
  EXPECT_NEAR(from1.at(-1), 0.25, 1e-14);
}

// Every exact value above has a Monte Carlo counterpart; this test runs them
// side by side.
TEST(OracleVsMonteCarlo, Pairs) {
  struct Pair {
    std::string name;
    double exact;
    std::function<EstimateWithCI()> mc;
  };
  std::vector<Pair> pairs;
  std::uint64_t seed = 100;
  const auto s = ssrw();
  const auto p = plus_walk();
  for (const auto& xt : {std::pair{0.0, 3.0}, {2.0, 5.0}, {1.0, 10.0}})
    pairs.push_back({"ssrw passage " + std::to_string(xt.first) + " " + std::to_string(xt.second), exact_passage_probability(s, xt.first, xt.second),
                     [&, x = xt.first, t = xt.second, sd = seed++] { return passage_probability(s, x, t, cfg(100000, sd)); }});
  for (const auto& xt : {std::pair{0.0, 3.0}, {1.0, 5.0}, {0.0, 10.0}})
    pairs.push_back({"plus passage " + std::to_string(xt.first) + " " + std::to_string(xt.second), exact_passage_probability(p, xt.first, xt.second),
                     [&, x = xt.first, t = xt.second, sd = seed++] { return passage_probability(p, x, t, cfg(100000, sd)); }});
  pairs.push_back({"plus escape", exact_escape_probability(p, 0.0).value,
                   [&, sd = seed++] { return escape_probability(p, cfg(100000, sd)); }});
  const auto mc = models::lattice_critical();
  const auto tp = models::two_point();
  const auto ac = classify_regime(mc), at = classify_regime(tp);
  for (const auto& xt : {std::pair{1.0, 4.0}, {2.0, 4.0}}) {
    pairs.push_back({"lattice critical EH spine", exact_EH(s, xt.first, xt.second),
                     [&, x = xt.first, t = xt.second, sd = seed++] { return estimate_EH(mc, ac, x, t, cfg(100000, sd)); }});
    pairs.push_back({"lattice critical EH forward", exact_EH(s, xt.first, xt.second),
                     [&, x = xt.first, t = xt.second, sd = seed++] { return forward_EH(mc, x, t, cfg(100000, sd)); }});
  }
  pairs.push_back({"two-point EH spine", exact_EH(p, 1.0, 4.0),
                   [&, sd = seed++] { return estimate_EH(tp, at, 1.0, 4.0, cfg(100000, sd)); }});
  pairs.push_back({"two-point EH forward", exact_EH(p, 1.0, 4.0),
                   [&, sd = seed++] { return forward_EH(tp, 1.0, 4.0, cfg(100000, sd)); }});
  pairs.push_back({"lattice critical alive n=3 from 1",
                   enumerate_tree_expectation(mc, 1.0, 3, {{"n", generation_functionals::count()}}, true)
                       .expectations.at("n"),
                   [&, sd = seed++] {
                     return many_to_one_estimate(mc, rho_c(), 1.0, 3, functionals::alive(), cfg(100000, sd));
                   }});
  ASSERT_GE(pairs.size(), 12u);
  for (const auto& pr : pairs) {
    const auto e = pr.mc();
    EXPECT_LT(z_score(e, pr.exact), 4.0) << pr.name << ": " << e.value << " vs " << pr.exact;
  }
}
