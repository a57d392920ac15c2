"""Small Monte Carlo comparison of the GMM estimator with least squares,
interactive fixed effects and synthetic control.

Run with ``python3 demos/compare_estimators.py`` (about a minute).
"""

from itegmm import DgpConfig, run_comparison

cfg = DgpConfig(n1=100, n0=100, t0=1, outer_draws=2)
reps = run_comparison(cfg, ("gmm2", "lcm"), "fixed-split", inner_draws=100, seed=0, p=2)
print("effects on everyone, N=100/100")
for name, r in reps.items():
    print(f"  {name:5s} ATE bias {r.ate_bias:.3f}  ITE bias {r.ite_bias:.3f}  ITE SD {r.ite_sd:.3f}")

cfg = DgpConfig(n1=5, n0=100, t0=1, outer_draws=2)
reps = run_comparison(cfg, ("gmm2", "ife", "scm"), "fixed-split", inner_draws=100, seed=0,
                      p=2, effect="itt")
print("effects on the treated, N1=5, N0=100")
for name, r in reps.items():
    print(f"  {name:5s} ATT bias {r.ate_bias:.3f}  ATT SD {r.ate_sd:.3f}")
