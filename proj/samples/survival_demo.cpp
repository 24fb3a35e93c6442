// Survival probability P_x(H(t) > 0) of the killed walk: plain Monte Carlo
// against the spine estimator, for a few levels t.
//
//   survival_demo [model.json] [x] [replicas]

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "kbrw/experiment.hpp"

int main(int argc, char** argv) {
  using namespace kbrw;
  Model model = models::critical_binary_gaussian();
  if (argc > 1) {
    std::ifstream in(argv[1]);
    std::stringstream ss;
    ss << in.rdbuf();
    model = model_from_json_text(ss.str());
  }
  const double x = argc > 2 ? std::atof(argv[2]) : 0.0;
  const std::uint64_t replicas = argc > 3 ? std::strtoull(argv[3], nullptr, 10) : 200000;

  const auto a = classify_regime(model);
  std::printf("regime %s  rho* %.6f  tilt %.6f\n", to_string(a.regime), a.rho_star, a.tilt());
  if (a.regime == Regime::OutOfScope) return 1;

  const TiltedWalk walk(model, a.tilt());
  const auto R = detail::regime_renewal(walk, 20.0, {20000, 11, 1});
  const bool critical = a.regime == Regime::Critical;

  std::printf("%6s %14s %10s %14s %10s %12s\n", "t", "naive", "se", "spine", "se", "normalized");
  for (double t : {2.0, 4.0, 6.0, 8.0}) {
    TreeOptions opt;
    opt.probe_levels = {t};
    const auto naive = run_replicas<MeanAccumulator>({replicas, 1, 1}, [&](MeanAccumulator& m, Rng& rng, std::uint64_t) {
                         KilledTreeSimulator sim(model, opt);
                         m.add(sim.run(x, rng).H[0] > 0 ? 1.0 : 0.0);
                       }).estimate();
    const auto sp = estimate_survival_spine(model, a, x, t, R, {replicas / 10, 2, 1});
    const double norm = (critical ? t : 1.0) * std::exp(a.tilt() * t) * sp.estimate.value;
    std::printf("%6.1f %14.6e %10.2e %14.6e %10.2e %12.5f\n", t, naive.value, naive.std_error, sp.estimate.value,
                sp.estimate.std_error, norm);
  }
  return 0;
}
