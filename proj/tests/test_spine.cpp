#include <cmath>

#include <gtest/gtest.h>

#include "kbrw/brw.hpp"
#include "kbrw/model_json.hpp"
#include "kbrw/oracle.hpp"
#include "kbrw/parallel.hpp"
#include "kbrw/spine.hpp"

using namespace kbrw;

namespace {

double rho_c() { return std::log(2.0 + std::sqrt(3.0)); }
double y_plus() { return (1.0 + std::sqrt(1.0 - 0.76)) / 0.2; }
double q_up() { return 0.05 * y_plus() / 0.5; }

// nu in {0,1,2} with +/-1 steps; nu is random so the size bias matters.
Model sparse_lattice() { return Model(OffspringLaw::from_pmf({0.2, 0.4, 0.4}), TwoPointLaw{1.0, 0.05, -1.0}); }

McConfig cfg(std::uint64_t n, std::uint64_t seed) {
  McConfig c;
  c.replicas = n;
  c.seed = seed;
  return c;
}

// P_x(H(t) > 0) by plain simulation of killed trees.
EstimateWithCI naive_survival(const Model& m, double x, double t, const McConfig& c) {
  TreeOptions opt;
  opt.probe_levels = {t};
  return run_replicas<MeanAccumulator>(c, [&](MeanAccumulator& a, Rng& rng, std::uint64_t) {
           KilledTreeSimulator sim(m, opt);
           const auto& r = sim.run(x, rng);
           if (r.truncated)
             a.add_truncated();
           else
             a.add(r.H[0] > 0 ? 1.0 : 0.0);
         }).estimate();
}

}  // namespace

TEST(SpineStep, BinaryModelHasOneSibling) {
  const SpineSampler s(models::lattice_critical(), rho_c());
  Rng rng = stream_for(1, 0);
  SpineStep st;
  for (int i = 0; i < 1000; ++i) {
    s.sample(rng, st);
    ASSERT_EQ(st.siblings.size(), 1u);
    ASSERT_TRUE(st.spine_displacement == 1.0 || st.spine_displacement == -1.0);
  }
}

TEST(SpineStep, TwoPointSpineUsesTiltedStep) {
  const auto m = models::two_point();
  const SpineSampler s(m, std::log(y_plus()));
  Rng rng = stream_for(2, 0);
  SpineStep st;
  const int n = 400000;
  int up = 0, sib_up = 0;
  for (int i = 0; i < n; ++i) {
    s.sample(rng, st);
    up += st.spine_displacement > 0;
    sib_up += st.siblings[0] > 0;
  }
  const double p = static_cast<double>(up) / n;
  EXPECT_NEAR(q_up(), 0.744949, 1e-6);
  EXPECT_LT(std::abs(p - q_up()) / std::sqrt(q_up() * (1 - q_up()) / n), 4.0);
  // Siblings keep the untilted displacement law.
  const double ps = static_cast<double>(sib_up) / n;
  EXPECT_LT(std::abs(ps - 0.05) / std::sqrt(0.05 * 0.95 / n), 4.0);
}

TEST(SpineStep, ExactLawMarginals) {
  const auto m = models::two_point();
  const SpineSampler s(m, std::log(y_plus()));
  const auto law = s.exact_step_law();
  double total = 0.0, up = 0.0, sib_up = 0.0;
  for (const auto& [k, p] : law) {
    ASSERT_EQ(k.size(), 2u);
    total += p;
    if (k[0] > 0) up += p;
    if (k[1] > 0) sib_up += p;
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_NEAR(up, q_up(), 1e-12);
  EXPECT_NEAR(sib_up, 0.05, 1e-12);
}

TEST(SpineStep, SizeBiasedCount) {
  const auto m = sparse_lattice();
  const double rho = classify_regime(m).tilt();
  const SpineSampler s(m, rho);
  double p1 = 0.0, p2 = 0.0;
  for (const auto& [k, p] : s.exact_step_law()) (k.size() == 1 ? p1 : p2) += p;
  // P(nu~ = k) = k p_k / E[nu].
  EXPECT_NEAR(p1, 0.4 / 1.2, 1e-12);
  EXPECT_NEAR(p2, 0.8 / 1.2, 1e-12);
}

TEST(SpineMarginal, ExactAgreement) {
  for (std::size_t n : {1, 2, 3})
    EXPECT_LT(spine_marginal_check(models::lattice_critical(), rho_c(), n).total_variation, 1e-12) << n;
  EXPECT_LT(spine_marginal_check(models::two_point(), std::log(y_plus()), 2).total_variation, 1e-12);
  const auto g = model_from_json_text(R"({"kind":"general","atoms":[{"p":0.6,"pattern":[-1.0,-1.0]},
    {"p":0.35,"pattern":[-1.0,-2.0,0.0]},{"p":0.05,"pattern":[1.0,-1.0]}]})");
  const auto a = classify_regime(g);
  ASSERT_NE(a.regime, Regime::OutOfScope);
  const auto rep = spine_marginal_check(g, a.tilt(), 2);
  EXPECT_LT(rep.total_variation, 1e-12);
  EXPECT_GT(rep.support_size, 10u);
  const auto s = sparse_lattice();
  EXPECT_LT(spine_marginal_check(s, classify_regime(s).tilt(), 2).total_variation, 1e-12);
}

TEST(SpineMarginal, UnbiasedCountIsDetected) {
  const auto s = sparse_lattice();
  const auto rep = spine_marginal_check(s, classify_regime(s).tilt(), 2, true);
  EXPECT_GT(rep.total_variation, 0.05);
}

TEST(ManyToOne, OneGenerationCount) {
  // e^{-rho X} under the simple walk is e^{-+rho} with equal odds: mean (e^rho + e^-rho)/2 = 2.
  const auto m = models::lattice_critical();
  EXPECT_NEAR(many_to_one_exact(m, rho_c(), 0.0, 1, functionals::one()), 2.0, 1e-12);
  const auto e = many_to_one_estimate(m, rho_c(), 0.0, 1, functionals::one(), cfg(100000, 3));
  EXPECT_LT(z_score(e, 2.0), 4.0);
  EXPECT_NEAR(e.std_error, std::sqrt(3.0 / 100000.0), 1e-3 * std::sqrt(3.0 / 100000.0) + 1e-4);
}

TEST(ManyToOne, ExactSumsMatchPathEnumeration) {
  const auto m = models::lattice_critical();
  EXPECT_NEAR(many_to_one_exact(m, rho_c(), 0.0, 3, functionals::one()), 8.0, 1e-10);
  EXPECT_NEAR(path_expectation(m, 0.0, 3, functionals::one()), 8.0, 1e-12);
  for (std::size_t n : {1, 2, 3})
    for (double x : {0.0, 1.0, 2.0})
      EXPECT_NEAR(many_to_one_exact(m, rho_c(), x, n, functionals::alive()),
                  path_expectation(m, x, n, functionals::alive()), 1e-10)
          << n << " " << x;
  const auto tp = models::two_point();
  const double rp = std::log(y_plus());
  for (std::size_t n : {1, 2, 3})
    EXPECT_NEAR(many_to_one_exact(tp, rp, 1.0, n, functionals::alive()), path_expectation(tp, 1.0, n, functionals::alive()),
                1e-10);
}

TEST(ManyToOne, MonteCarloAgreesWithEnumeration) {
  const auto m = models::lattice_critical();
  const double exact = path_expectation(m, 1.0, 2, functionals::alive());
  // From 1: paths staying >= 0 over two +/-1 steps, weights (q, 1-q) times 2 children each.
  const double q = (2.0 - std::sqrt(3.0)) / 4.0;
  EXPECT_NEAR(exact, 4.0 * (1.0 - (1.0 - q) * (1.0 - q)), 1e-12);
  const auto e = many_to_one_estimate(m, rho_c(), 1.0, 2, functionals::alive(), cfg(200000, 4));
  EXPECT_LT(z_score(e, exact), 4.0);
  const auto f = many_to_one_estimate(m, rho_c(), 0.0, 3, functionals::one(), cfg(200000, 5));
  EXPECT_LT(z_score(f, 8.0), 4.0);
}

TEST(StoppingLine, AboveLevelIsOne) {
  const auto m = models::lattice_critical();
  const auto e = estimate_EH(m, classify_regime(m), 5.0, 4.0, cfg(10, 1));
  EXPECT_EQ(e.value, 1.0);
  EXPECT_THROW(estimate_EH(m, classify_regime(m), -1.0, 4.0, cfg(10, 1)), Error);
}

TEST(StoppingLine, SimpleSymmetricClosedForm) {
  const auto m = models::lattice_critical();
  const auto a = classify_regime(m);
  for (double t : {2.0, 6.0}) {
    const double exact = std::exp(-rho_c() * (t + 1.0)) / (t + 2.0);
    EXPECT_NEAR(exact_EH(TiltedWalk(m, rho_c()), 0.0, t), exact, 1e-12 * exact + 1e-15);
    const auto e = estimate_EH(m, a, 0.0, t, cfg(200000, 6));
    EXPECT_LT(z_score(e, exact), 4.0) << t;
  }
}

TEST(StoppingLine, SpineAgreesWithForwardTrees) {
  for (const auto& m : {models::lattice_critical(), models::two_point(), models::critical_binary_gaussian()}) {
    const auto a = classify_regime(m);
    const auto s = estimate_EH(m, a, 1.0, 3.0, cfg(200000, 7));
    const auto f = forward_EH(m, 1.0, 3.0, cfg(200000, 8));
    EXPECT_LT(pooled_z(s, f), 4.0) << s.value << " vs " << f.value;
  }
}

TEST(SpineSurvival, AgreesWithNaive) {
  struct Case {
    Model m;
    double x, t;
  };
  for (const auto& c : {Case{models::lattice_critical(), 0.0, 6.0}, Case{models::two_point(), 1.0, 4.0}}) {
    const auto a = classify_regime(c.m);
    const auto R = closed_form_renewal(regime_walk(c.m, a));
    ASSERT_TRUE(R.has_value());
    const auto s = estimate_survival_spine(c.m, a, c.x, c.t, *R, cfg(100000, 9));
    const auto n = naive_survival(c.m, c.x, c.t, cfg(400000, 10));
    EXPECT_EQ(s.truncated_count, 0u);
    EXPECT_LT(pooled_z(s.estimate, n), 4.0) << s.estimate.value << " vs " << n.value;
  }
}

TEST(SpineSurvival, UnbiasedForAnyPositiveWeight) {
  // A crude weight 1 + x still gives an unbiased estimate, only noisier.
  const auto m = models::critical_binary_gaussian();
  const auto a = classify_regime(m);
  const auto R = RenewalTable::interpolated({0.0, 10.0}, {1.0, 11.0}, true);
  const auto s = estimate_survival_spine(m, a, 0.5, 3.0, R, cfg(100000, 11));
  const auto n = naive_survival(m, 0.5, 3.0, cfg(400000, 12));
  EXPECT_LT(pooled_z(s.estimate, n), 4.0) << s.estimate.value << " vs " << n.value;
  EXPECT_GT(s.hit_fraction, 0.0);
  EXPECT_THROW(estimate_survival_spine(m, a, 3.0, 3.0, R, cfg(10, 1)), Error);
}
