"""Simulate a panel, select regressor cells, estimate individual effects
with bootstrap intervals and compare the characteristics of the
significance groups.

Run with ``python3 demos/quickstart.py``.
"""

import numpy as np
import pandas as pd

from itegmm import (
    DgpConfig,
    bootstrap_effects,
    fit_all_cells,
    generate,
    select_model,
)
from itegmm.report import group_report, labels_from_effects

SEED = 7

sim = generate(DgpConfig(n1=150, n0=150, t0=1, k=5), (SEED, 0), (SEED, 0, 0))
data, layout = sim.data, sim.layout
target = (2, 5)

sel = select_model(data, layout, target, rng=np.random.default_rng(SEED))
print(f"selected P={sel.best_p}: regressor cells {[str(c) for c in sel.best_split.regressor_cells]}")

fitted = fit_all_cells(data, layout, {target: sel.best_split}, rng=np.random.default_rng(SEED))
res = bootstrap_effects(data, layout, target, sel.best_split, b=300, rng=SEED, fitted=fitted)
truth = sim.truth[:, target[1] - 1]
print(f"ATE {res.ate:.3f} (truth {truth.mean():.3f}), 95% CI [{res.ci_ate[0]:.3f}, {res.ci_ate[1]:.3f}]")
print(f"ITE RMSE {np.sqrt(np.mean((res.tau_hat - truth) ** 2)):.3f}; corr with truth "
      f"{np.corrcoef(res.tau_hat, truth)[0, 1]:.2f}")

effects = pd.DataFrame(res.to_rows(), columns=["id", "tau_hat", "se", "ci_lo", "ci_hi", "significance"])
labels = labels_from_effects(effects)
chars = pd.DataFrame({"id": effects["id"], "x1": data.covariates[:, 0, 0], "mu1": sim.mu[:, 0]})
print(group_report(labels, chars).to_markdown())
