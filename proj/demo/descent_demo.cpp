// Side-by-side run of the Euclidean and spectral steps on one realizable
// random-features instance. Prints the criterion trace every 30 steps so the
// nr(G) >= st(A) call and the loss gap are visible at a glance.
#include <cstdio>

#include "spectralrank/nets.hpp"

using namespace spectralrank;

int main() {
  const RFInstance inst = gen_realizable(50, 100, 100, 400, 1);
  const double st_a = spectral_summary(inst.A).stable_rank;
  std::printf("realizable features: d=50 k=100 n=400, st(A) = %.2f\n\n", st_a);

  const Matrix w0 = Matrix::Zero(100, 100);
  OptimizerConfig gd_cfg;
  gd_cfg.kind = OptimizerKind::GD;
  OptimizerConfig sp_cfg;
  sp_cfg.kind = OptimizerKind::SpecGD;
  const auto tg = train_rf(inst, w0, gd_cfg, 301);
  const auto ts = train_rf(inst, w0, sp_cfg, 301);

  std::printf("%6s  %12s  %12s  %8s  %8s\n", "step", "loss_gd", "loss_spec", "nr_gd",
              "nr_spec");
  for (int t = 0; t <= 300; t += 30) {
    std::printf("%6d  %12.4e  %12.4e  %8.2f  %8.2f\n", t, tg[t].loss, ts[t].loss,
                tg[t].nr[0], ts[t].nr[0]);
  }
  std::printf("\nnr(G) stays well above st(A) = %.2f, and the spectral run finishes\n"
              "%.0fx lower. On gated features the same comparison flips; see the\n"
              "rf_gated experiment in the CLI.\n",
              st_a, tg.back().loss / ts.back().loss);
  return 0;
}
