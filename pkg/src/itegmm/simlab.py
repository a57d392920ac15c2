"""Monte Carlo lab: data generating processes, scenario runner and table
reproduction.

Structural objects (covariates, latent characteristics, outcome and
effect coefficients) are drawn from an *outer* seed and held fixed while
the idiosyncratic shocks are redrawn from *inner* seeds, so bias and SD are
conditional on the covariates and the latent characteristics.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .panel import PanelDataset, TreatmentLayout

logger = logging.getLogger(__name__)

MU_DISTS = ("normal", "uniform", "shifted-normal")
ERROR_STRUCTURES = ("iid", "ar1-common")


def _rng(*key) -> np.random.Generator:
    flat = []
    for k in key:
        flat.extend(k if isinstance(k, (tuple, list)) else (k,))
    return np.random.default_rng(np.random.SeedSequence([int(v) for v in flat]))


@dataclass(frozen=True)
class DgpConfig:
    """One simulation design.

    ``f`` counts the latent characteristics; each individual additionally
    carries a constant 1 in its characteristic vector. ``x_innov_sd`` is
    the standard deviation of the covariate AR(1) innovation, which keeps
    the covariate variance at 1.
    """

    n1: int = 100
    n0: int = 100
    t0: int = 1
    t1: int = 1
    k: int = 5
    r: int = 2
    f: int = 2
    ar_coef: float = 0.9
    mu_dist: str = "normal"
    treated_mu_shift: float = 1.0
    coef_mean_loc: float = 1.0
    coef_mean_sd: float = 1.0
    coef_sd: float = 1.0
    effect_coef_mean: float = 0.5
    effect_coef_sd: float = 0.5
    error_structure: str = "iid"
    error_rho: float = 0.1
    common_share: float = 0.5
    noise_scale: float = 1.0
    x_constant_over_time: bool = False
    beta_constant_over_time: bool = False
    outer_draws: int = 5
    inner_draws: int = 1000

    def __post_init__(self):
        for name in ("n1", "n0", "t0", "t1", "k", "outer_draws", "inner_draws"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.r < 0 or self.f < 0:
            raise ValueError("r and f must be non-negative")
        if self.mu_dist not in MU_DISTS:
            raise ValueError(f"mu_dist must be one of {MU_DISTS}")
        if self.error_structure not in ERROR_STRUCTURES:
            raise ValueError(f"error_structure must be one of {ERROR_STRUCTURES}")
        if not -1 < self.error_rho < 1:
            raise ValueError("error_rho must lie in (-1, 1)")
        if not 0 <= self.common_share <= 1:
            raise ValueError("common_share must lie in [0, 1]")
        if self.coef_sd < 0 or self.effect_coef_sd < 0 or self.noise_scale < 0:
            raise ValueError("scale parameters must be non-negative")

    @property
    def n(self) -> int:
        return self.n1 + self.n0

    @property
    def t(self) -> int:
        return self.t0 + self.t1

    @property
    def x_innov_sd(self) -> float:
        return float(np.sqrt(1.0 - self.ar_coef**2))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        return cls(**d)


@dataclass
class Structure:
    """Everything held fixed across inner draws for one outer draw."""

    config: DgpConfig
    x: np.ndarray  # (N, T, r)
    mu: np.ndarray  # (N, f + 1), last column is the constant
    beta: np.ndarray  # (T, K, r)
    lam: np.ndarray  # (T, K, f + 1)
    effect_coef: np.ndarray  # (T1, K, r + f + 1)
    omega: np.ndarray  # (K,)

    @property
    def systematic0(self) -> np.ndarray:
        """Untreated outcome net of shocks, (N, T, K)."""
        return np.einsum("itr,tkr->itk", self.x, self.beta) + np.einsum(
            "if,tkf->itk", self.mu, self.lam
        )

    @property
    def tau(self) -> np.ndarray:
        """True individual effects for the posttreatment periods, (N, T1, K)."""
        cfg = self.config
        post_x = self.x[:, cfg.t0 :, :]
        h = np.concatenate(
            [post_x, np.broadcast_to(self.mu[:, None, :], (cfg.n, cfg.t1, self.mu.shape[1]))],
            axis=2,
        )
        return np.einsum("ith,tkh->itk", h, self.effect_coef)

    @property
    def treatment(self) -> np.ndarray:
        cfg = self.config
        d = np.zeros((cfg.n, cfg.t), dtype=np.int8)
        d[: cfg.n1, cfg.t0 :] = 1
        return d

    @property
    def layout(self) -> TreatmentLayout:
        cfg = self.config
        return TreatmentLayout(
            cfg.t0, np.arange(cfg.n1), np.arange(cfg.n1, cfg.n), n_periods=cfg.t
        )

    def shocks(self, inner_seed):
        """Untreated and treated shocks, each (N, T, K)."""
        cfg = self.config
        rng = _rng(inner_seed, 1)
        n, t, k = cfg.n, cfg.t, cfg.k
        if cfg.error_structure == "iid":
            e0 = rng.standard_normal((n, t, k))
            e1 = rng.standard_normal((n, t, k))
        else:
            rho, share = cfg.error_rho, cfg.common_share
            scale = np.sqrt(1.0 - rho**2)

            def innov():
                common = rng.standard_normal((n, 1))
                own = rng.standard_normal((n, k))
                return np.sqrt(share) * common + np.sqrt(1.0 - share) * own

            e0 = np.empty((n, t, k))
            e0[:, 0] = innov()
            for s in range(1, t):
                e0[:, s] = rho * e0[:, s - 1] + scale * innov()
            # treated shocks continue the untreated path from the previous period
            e1 = np.empty((n, t, k))
            e1[:, 0] = innov()
            for s in range(1, t):
                e1[:, s] = rho * e0[:, s - 1] + scale * innov()
        return cfg.noise_scale * e0, cfg.noise_scale * e1

    def outcomes(self, inner_seed) -> np.ndarray:
        """Observed outcome tensor (N, T, K) for one inner draw."""
        cfg = self.config
        e0, e1 = self.shocks(inner_seed)
        base = self.systematic0
        y = base + e0
        post = slice(cfg.t0, cfg.t)
        y[: cfg.n1, post] = base[: cfg.n1, post] + self.tau[: cfg.n1] + e1[: cfg.n1, post]
        return y

    def panel(self, outcomes) -> PanelDataset:
        return PanelDataset(outcomes, self.x, self.treatment)


def draw_structure(config: DgpConfig, outer_seed) -> Structure:
    cfg = config
    rng = _rng(outer_seed, 0)
    n, t, k, r, f = cfg.n, cfg.t, cfg.k, cfg.r, cfg.f
    x = np.empty((n, t, r))
    x[:, 0] = rng.standard_normal((n, r))
    for s in range(1, t):
        if cfg.x_constant_over_time:
            x[:, s] = x[:, 0]
        else:
            x[:, s] = cfg.ar_coef * x[:, s - 1] + cfg.x_innov_sd * rng.standard_normal((n, r))
    if cfg.mu_dist == "uniform":
        latent = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=(n, f))
    else:
        latent = rng.standard_normal((n, f))
        if cfg.mu_dist == "shifted-normal":
            latent[: cfg.n1] += cfg.treated_mu_shift
    mu = np.concatenate([latent, np.ones((n, 1))], axis=1)
    # coefficients get their own stream so they do not depend on N
    rng = _rng(outer_seed, 4)
    omega = cfg.coef_mean_loc + cfg.coef_mean_sd * rng.standard_normal(k)
    beta = omega[None, :, None] + cfg.coef_sd * rng.standard_normal((t, k, r))
    if cfg.beta_constant_over_time:
        beta[:] = beta[0]
    lam = omega[None, :, None] + cfg.coef_sd * rng.standard_normal((t, k, f + 1))
    effect_coef = cfg.effect_coef_mean + cfg.effect_coef_sd * rng.standard_normal(
        (cfg.t1, k, r + f + 1)
    )
    return Structure(cfg, x, mu, beta, lam, effect_coef, omega)


@dataclass
class SimDraw:
    data: PanelDataset
    layout: TreatmentLayout
    truth: np.ndarray  # (N, K) effects in the first posttreatment period
    mu: np.ndarray
    h: np.ndarray  # (N, T, r + f + 1) observed covariates and characteristics
    structure: Structure


def generate(config: DgpConfig, outer_seed, inner_seed) -> SimDraw:
    """One simulated panel plus the true individual effects."""
    st = draw_structure(config, outer_seed)
    y = st.outcomes(inner_seed)
    h = np.concatenate(
        [st.x, np.broadcast_to(st.mu[:, None, :], (config.n, config.t, st.mu.shape[1]))], axis=2
    )
    return SimDraw(st.panel(y), st.layout, st.tau[:, 0, :], st.mu, h, st)


# ---------------------------------------------------------------------------
# scenario runner

ESTIMATORS = ("gmm", "gmm2", "lcm", "ife", "scm")
SELECTIONS = ("fixed-split", "cv")
BATCH = 250


class ScenarioError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class MetricReport:
    """Conditional bias and SD, averaged over individuals and outer draws.

    For each outer draw the bias of an individual estimate is the absolute
    gap between its mean across inner draws and the true effect, and its
    SD is the population standard deviation across inner draws; both are
    averaged over individuals, then over outer draws. The average effect
    is scored the same way.
    """

    estimator: str
    effect: str  # "ite" (all individuals) or "itt" (treated only)
    ite_bias: float
    ite_sd: float
    ate_bias: float
    ate_sd: float
    coverage_ite: float | None = None
    coverage_ate: float | None = None
    p_selected: float | None = None
    n_draws: int = 0
    failures: int = 0
    per_outer: list = field(default_factory=list)
    draws: list | None = None  # per outer draw: (estimates (S, n), truth (n,))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("draws")
        return d


def _score(est, truth):
    """Bias and SD of the individual and average estimates for one outer draw."""
    m = est.mean(axis=0)
    sd = np.sqrt(np.mean((est - m) ** 2, axis=0))
    ate = est.mean(axis=1)
    return {
        "ite_bias": float(np.mean(np.abs(m - truth))),
        "ite_sd": float(np.mean(sd)),
        "ate_bias": float(abs(ate.mean() - truth.mean())),
        "ate_sd": float(np.sqrt(np.mean((ate - ate.mean()) ** 2))),
    }


def default_p(t0: int) -> int:
    """Regressor cells used when the size is fixed: 2 for one pretreatment
    period, 3 otherwise."""
    return 2 if t0 == 1 else 3


def _select(data, layout, target, p, mode, groups, rng, subsample, max_splits):
    from .select import select_model

    return select_model(
        data, layout, target, p_range=None if p is None else [p], max_splits=max_splits,
        mode=mode, subsample=subsample, rng=rng, groups=groups,
    )


def _estimate_batch(name, ys, st, plan, effect, step_for, ife_factors, ife_covariates, target):
    from .comparators import ife_itt_batch, scm_itt_batch
    from .gmm import ite_batch, itt_batch
    from .lcm import cate_batch

    layout, x = st.layout, st.x
    if name in ("gmm", "gmm2"):
        step = step_for[name]
        if effect == "itt":
            return itt_batch(plan, ys, x, layout, step)
        return ite_batch(plan, ys, x, layout, step)
    if name == "lcm":
        est, ok = cate_batch(plan, ys, x, layout)
        return (est[:, layout.treated_ids], ok) if effect == "itt" else (est, ok)
    # a solver that hits its iteration cap still returns its last feasible
    # iterate, so only non-finite output counts as a failure for these two
    if name == "ife":
        est, _ = ife_itt_batch(ys, x, layout, ife_factors, target, covariates_mode=ife_covariates)
        return est, np.ones(est.shape[0], dtype=bool)
    if name == "scm":
        est, _ = scm_itt_batch(ys, layout, target)
        return est, np.ones(est.shape[0], dtype=bool)
    raise ValueError(f"unknown estimator {name!r}")


def _coverage_draws(st, splits, target, seeds, b, alpha, step, effect):
    from .bootstrap import bootstrap_effects, fit_all_cells

    truth = st.tau[:, 0, target[1] - 1]
    cov_i, cov_a = [], []
    for seed in seeds:
        data = st.panel(st.outcomes(seed))
        fp = fit_all_cells(data, st.layout, splits, step)
        res = bootstrap_effects(
            data, st.layout, target, splits[target], b=b, alpha=alpha,
            rng=int(_rng(seed, 3).integers(2**62)),
            step=step, fitted=fp,
        )
        lo, hi = res.ci_ite[:, 0], res.ci_ite[:, 1]
        cov_i.append(np.mean((lo <= truth) & (truth <= hi)))
        cov_a.append(res.ci_ate[0] <= truth.mean() <= res.ci_ate[1])
    return float(np.mean(cov_i)), float(np.mean(cov_a))


def run_comparison(
    config: DgpConfig,
    estimators=("gmm2",),
    selection: str = "fixed-split",
    inner_draws: int | None = None,
    seed: int = 0,
    p: int | None = None,
    mode: str = "best-set",
    effect: str = "ite",
    bootstrap_b: int = 0,
    coverage_draws: int | None = None,
    alpha: float = 0.05,
    ife_factors: int | None = None,
    ife_covariates="auto",
    loo_subsample: int = 100,
    max_splits: int = 50,
    keep_draws: bool = False,
    max_fail_share: float = 0.05,
) -> dict:
    """Run several estimators on the same simulated draws.

    The split (regressor cells for the target) is chosen by leave-one-out
    selection, either once per outer draw on its first inner draw
    (``"fixed-split"``) or afresh on every inner draw (``"cv"``). ``p``
    fixes the number of regressor cells; ``None`` lets selection choose it.
    ``effect="itt"`` scores effects on the treated only, with the GMM
    estimators imputing the untreated outcome from control coefficients.

    Returns a dict of :class:`MetricReport` keyed by estimator name.
    """
    from .design import CellIndex, DesignPlan

    estimators = tuple(estimators)
    for name in estimators:
        if name not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {name!r}")
    if selection not in SELECTIONS:
        raise ValueError(f"selection must be one of {SELECTIONS}")
    if effect not in ("ite", "itt"):
        raise ValueError("effect must be 'ite' or 'itt'")
    if effect == "ite" and any(e in ("ife", "scm") for e in estimators):
        raise ValueError("ife and scm only estimate effects on the treated; use effect='itt'")
    cfg = config
    inner = int(inner_draws or cfg.inner_draws)
    target = CellIndex(cfg.t0 + 1, cfg.k)
    groups = ("control",) if effect == "itt" else ("treated", "control")
    step_for = {"gmm": "one", "gmm2": "two"}
    sel_step = "one" if estimators == ("gmm",) else "two"
    needs_split = any(e in ("gmm", "gmm2", "lcm") for e in estimators)
    ife_f = cfg.f if ife_factors is None else ife_factors

    ests = {e: [] for e in estimators}
    per_outer = {e: [] for e in estimators}
    fails = {e: 0 for e in estimators}
    p_sel, cov = [], {e: [] for e in estimators}
    for d in range(cfg.outer_draws):
        st = draw_structure(cfg, (seed, d))
        truth_all = st.tau[:, 0, cfg.k - 1]
        truth = truth_all[st.layout.treated_ids] if effect == "itt" else truth_all
        inner_seeds = [(seed, d, s) for s in range(inner)]
        sel_rng = _rng(seed, d, 2)
        plan = split = None
        if needs_split and selection == "fixed-split":
            first = st.panel(st.outcomes(inner_seeds[0]))
            rep = _select(first, st.layout, target, p, mode, groups, sel_rng, loo_subsample, max_splits)
            split = rep.best_split
            plan = DesignPlan.compile(first, st.layout, split)
            p_sel.append(rep.best_p)
        outer_est = {e: [] for e in estimators}
        outer_ok = {e: [] for e in estimators}
        for lo in range(0, inner, BATCH):
            chunk = inner_seeds[lo : lo + BATCH]
            ys = np.stack([st.outcomes(s) for s in chunk])
            for e in estimators:
                if e in ("gmm", "gmm2", "lcm") and selection == "cv":
                    est, ok = _cv_chunk(e, ys, st, target, p, mode, groups, sel_rng,
                                        loo_subsample, max_splits, effect, step_for,
                                        p_sel if e == estimators[0] else None)
                else:
                    est, ok = _estimate_batch(e, ys, st, plan, effect, step_for, ife_f,
                                              ife_covariates, target)
                outer_est[e].append(est)
                outer_ok[e].append(np.asarray(ok, dtype=bool))
        for e in estimators:
            est = np.concatenate(outer_est[e])
            ok = np.concatenate(outer_ok[e]) & np.all(np.isfinite(est), axis=1)
            n_fail = int((~ok).sum())
            if n_fail > max_fail_share * inner:
                raise ScenarioError(
                    f"{e}: {n_fail} of {inner} inner draws failed in outer draw {d}",
                    {"estimator": e, "outer_draw": d, "failed": n_fail, "inner_draws": inner},
                )
            fails[e] += n_fail
            est = est[ok]
            rec = _score(est, truth)
            rec["outer_draw"] = d
            if split is not None:
                rec["split"] = split.to_dict()
            per_outer[e].append(rec)
            if keep_draws:
                ests[e].append((est, truth))
        if bootstrap_b:
            if split is None:
                raise ValueError("coverage needs the fixed-split selection")
            ncov = inner if coverage_draws is None else min(coverage_draws, inner)
            splits = _all_cell_splits(first, st.layout, target, split, groups, sel_rng,
                                      loo_subsample, max_splits)
            for e in estimators:
                if e in ("gmm", "gmm2"):
                    cov[e].append(_coverage_draws(st, splits, target, inner_seeds[:ncov],
                                                  bootstrap_b, alpha, step_for[e], effect))

    out = {}
    for e in estimators:
        recs = per_outer[e]
        agg = {k: float(np.mean([r[k] for r in recs])) for k in ("ite_bias", "ite_sd", "ate_bias", "ate_sd")}
        c_i = c_a = None
        if cov[e]:
            c_i = float(np.mean([c[0] for c in cov[e]]))
            c_a = float(np.mean([c[1] for c in cov[e]]))
        out[e] = MetricReport(
            e, effect, **agg, coverage_ite=c_i, coverage_ate=c_a,
            p_selected=float(np.mean(p_sel)) if p_sel else None,
            n_draws=inner * cfg.outer_draws, failures=fails[e], per_outer=recs,
            draws=ests[e] if keep_draws else None,
        )
    return out


def _all_cell_splits(data, layout, target, split, groups, rng, subsample, max_splits):
    """Splits for every cell, chosen once: the target keeps ``split``,
    posttreatment cells use the same number of regressor cells, and
    pretreatment cells let selection choose."""
    from .design import CellIndex

    splits = {target: split}
    for s in range(1, data.n_periods + 1):
        for q in range(1, data.n_outcomes + 1):
            cell = CellIndex(s, q)
            if cell in splits:
                continue
            p = split.p if s > layout.t0 else None
            splits[cell] = _select(data, layout, cell, p, "best-set",
                                   ("treated", "control"), rng, subsample, max_splits).best_split
    return splits


def _cv_chunk(name, ys, st, target, p, mode, groups, rng, subsample, max_splits, effect,
              step_for, p_sink):
    """Select a split on every draw, then estimate with it."""
    from .design import DesignPlan

    est, ok = [], []
    for y in ys:
        data = st.panel(y)
        rep = _select(data, st.layout, target, p, mode, groups, rng, subsample, max_splits)
        if p_sink is not None:
            p_sink.append(rep.best_p)
        if mode == "averaging":
            members = rep.per_p[rep.best_p]["splits"]
        else:
            members = [rep.best_split]
        vals, good = [], True
        for s in members:
            plan = DesignPlan.compile(data, st.layout, s)
            v, k = _estimate_batch(name, y[None], st, plan, effect, step_for, None, None, target)
            vals.append(v[0])
            good &= bool(k[0])
        est.append(np.mean(vals, axis=0))
        ok.append(good)
    return np.array(est), np.array(ok)


def run_scenario(config: DgpConfig, estimator: str = "gmm2", selection: str = "fixed-split",
                 inner_draws: int | None = None, seed: int = 0, **kw) -> MetricReport:
    """Bias, SD and optionally coverage for one estimator; see
    :func:`run_comparison` for the keyword arguments."""
    return run_comparison(config, (estimator,), selection, inner_draws, seed, **kw)[estimator]


# ---------------------------------------------------------------------------
# table reproduction

# Published reference values per table row, keyed by (panel, n1, n0, t0).
# Tuples follow the column order of each table's estimators.
REFERENCE = {
    1: {  # best set: P, ite bias, ite sd, ate bias, ate sd | averaging: same
        ("", 50, 50, 1): (2.2, 0.151, 1.225, 0.082, 0.384, 2.3, 0.231, 1.163, 0.120, 0.336),
        ("", 100, 100, 1): (2.2, 0.076, 0.764, 0.032, 0.212, 2.4, 0.065, 0.836, 0.024, 0.205),
        ("", 200, 200, 1): (2.1, 0.038, 0.476, 0.004, 0.127, 2.6, 0.046, 0.712, 0.011, 0.133),
        ("", 50, 50, 2): (2.6, 0.062, 0.875, 0.014, 0.253, 2.9, 0.150, 0.758, 0.040, 0.232),
        ("", 100, 100, 2): (2.7, 0.035, 0.685, 0.003, 0.165, 2.9, 0.073, 0.563, 0.014, 0.159),
        ("", 200, 200, 2): (3.2, 0.038, 0.729, 0.003, 0.137, 4.0, 0.031, 0.702, 0.003, 0.131),
    },
    2: {  # ite bias, ite sd, ite coverage, ate bias, ate sd, ate coverage
        ("A", 50, 50, 1): (0.096, 1.422, 0.997, 0.040, 0.443, 0.995),
        ("A", 100, 100, 1): (0.043, 0.856, 0.992, 0.005, 0.226, 0.984),
        ("A", 50, 50, 2): (0.043, 1.163, 0.973, 0.011, 0.288, 0.959),
        ("A", 100, 100, 2): (0.025, 0.900, 0.953, 0.005, 0.181, 0.956),
        ("B", 50, 50, 1): (0.134, 1.419, 0.996, 0.045, 0.431, 0.993),
        ("B", 100, 100, 1): (0.065, 0.851, 0.991, 0.018, 0.230, 0.982),
        ("B", 50, 50, 2): (0.063, 1.162, 0.976, 0.008, 0.294, 0.961),
        ("B", 100, 100, 2): (0.037, 0.906, 0.964, 0.009, 0.183, 0.967),
    },
    3: {  # comparator ite bias, sd, ate bias, sd | gmm ite bias, sd, ate bias, sd
        ("A", 100, 100, 1): (0.099, 0.622, 0.041, 0.186, 0.113, 1.297, 0.086, 0.257),
        ("A", 200, 200, 1): (0.059, 0.415, 0.015, 0.119, 0.011, 0.430, 0.003, 0.129),
        ("A", 100, 100, 2): (0.046, 0.677, 0.012, 0.158, 0.026, 0.901, 0.003, 0.179),
        ("A", 200, 200, 2): (0.064, 0.547, 0.012, 0.121, 0.028, 0.937, 0.003, 0.142),
        ("B", 100, 100, 1): (0.097, 0.687, 0.057, 0.199, 0.025, 0.806, 0.011, 0.244),
        ("B", 200, 200, 1): (0.140, 0.456, 0.040, 0.122, 0.016, 0.552, 0.003, 0.149),
        ("B", 100, 100, 2): (0.077, 0.734, 0.015, 0.173, 0.115, 1.118, 0.007, 0.213),
        ("B", 200, 200, 2): (0.093, 0.551, 0.004, 0.116, 0.025, 0.910, 0.003, 0.142),
    },
    4: {
        ("A", 5, 100, 1): (1.203, 1.357, 0.657, 0.610, 0.047, 1.499, 0.016, 0.687),
        ("A", 5, 200, 1): (1.264, 1.229, 0.492, 0.548, 0.089, 1.624, 0.023, 0.730),
        ("A", 5, 100, 2): (0.922, 1.140, 0.263, 0.518, 0.034, 1.265, 0.015, 0.585),
        ("A", 5, 200, 2): (0.982, 1.147, 0.378, 0.520, 0.040, 1.387, 0.018, 0.634),
        ("B", 5, 100, 1): (1.289, 1.220, 0.773, 0.579, 0.029, 1.349, 0.016, 0.616),
        ("B", 5, 200, 1): (1.681, 1.370, 0.836, 0.620, 0.034, 1.563, 0.020, 0.713),
        ("B", 5, 100, 2): (0.930, 1.070, 0.440, 0.486, 0.026, 1.261, 0.017, 0.577),
        ("B", 5, 200, 2): (1.417, 1.083, 1.015, 0.489, 0.031, 1.250, 0.011, 0.564),
    },
    5: {
        ("A", 5, 100, 1): (0.376, 1.247, 0.245, 0.577, 0.029, 1.349, 0.016, 0.617),
        ("A", 5, 200, 1): (0.883, 1.376, 0.698, 0.628, 0.035, 1.563, 0.020, 0.713),
        ("A", 5, 100, 2): (0.930, 1.191, 0.526, 0.547, 0.023, 1.243, 0.014, 0.565),
        ("A", 5, 200, 2): (0.469, 1.186, 0.126, 0.531, 0.031, 1.250, 0.012, 0.564),
        ("B", 5, 100, 1): (0.763, 1.253, 0.634, 0.605, 0.036, 1.368, 0.022, 0.658),
        ("B", 5, 200, 1): (1.412, 1.413, 1.269, 0.656, 0.037, 1.573, 0.024, 0.735),
        ("B", 5, 100, 2): (0.982, 1.204, 0.513, 0.558, 0.027, 1.249, 0.020, 0.578),
        ("B", 5, 200, 2): (0.781, 1.203, 0.613, 0.551, 0.032, 1.256, 0.014, 0.577),
    },
}

# panel -> DgpConfig overrides
PANELS = {
    2: {"A": {}, "B": {"error_structure": "ar1-common"}},
    3: {"A": {}, "B": {"mu_dist": "uniform"}},
    4: {"A": {"x_constant_over_time": True}, "B": {"beta_constant_over_time": True}},
    5: {"A": {}, "B": {"mu_dist": "shifted-normal"}},
}
COMPARATOR = {3: "lcm", 4: "ife", 5: "scm"}
METRICS = ("ite_bias", "ite_sd", "ate_bias", "ate_sd")


@dataclass
class TableResult:
    table_id: int
    columns: list
    rows: list  # list of dicts
    inner_draws: int
    seed: int

    def to_csv(self, path) -> Path:
        import pandas as pd

        path = Path(path)
        pd.DataFrame(self.rows, columns=self.columns).to_csv(path, index=False)
        return path

    def to_markdown(self) -> str:
        def fmt(v):
            if v is None or (isinstance(v, float) and np.isnan(v)):
                return ""
            return f"{v:.3f}" if isinstance(v, float) else str(v)

        lines = [
            f"Table {self.table_id} ({self.inner_draws} inner draws per outer draw, seed {self.seed})",
            "",
            "| " + " | ".join(self.columns) + " |",
            "|" + "---|" * len(self.columns),
        ]
        lines += ["| " + " | ".join(fmt(r.get(c)) for c in self.columns) + " |" for r in self.rows]
        return "\n".join(lines) + "\n"


def table_rows(table_id: int) -> list:
    """Row keys ``(panel, n1, n0, t0)`` of a table."""
    if table_id not in REFERENCE:
        raise ValueError("table_id must be 1..5")
    return list(REFERENCE[table_id])


def scenario_config(table_id: int, row, inner_draws: int, outer_draws: int = 5) -> DgpConfig:
    panel, n1, n0, t0 = row
    extra = PANELS.get(table_id, {}).get(panel, {})
    return DgpConfig(n1=n1, n0=n0, t0=t0, inner_draws=inner_draws, outer_draws=outer_draws, **extra)


def reproduce_table(
    table_id: int,
    scale: float = 0.2,
    out_path=None,
    seed: int = 0,
    rows=None,
    outer_draws: int = 5,
    bootstrap_b: int = 600,
    coverage_draws: int | None = None,
    selection_draws: int | None = None,
) -> TableResult:
    """Run a table's grid of scenarios and put the results next to the
    published reference values.

    Each row uses ``max(100, round(1000 * scale))`` inner draws. Coverage
    (table 2) bootstraps ``coverage_draws`` of them per outer draw
    (default ``max(10, round(60 * scale))``); the selection study (table
    1) reselects on ``selection_draws`` per outer draw (default
    ``max(20, round(100 * scale))``). ``out_path`` without a suffix
    receives ``.csv`` and ``.md`` files.
    """
    inner = max(100, int(round(1000 * scale)))
    keys = table_rows(table_id) if rows is None else [tuple(r) for r in rows]
    refs = REFERENCE[table_id]
    out_rows = []
    if table_id == 1:
        sel = selection_draws or max(20, int(round(100 * scale)))
        columns = ["n1", "n0", "t0"]
        for mode, tag in (("best-set", "best"), ("averaging", "avg")):
            columns += [f"{tag}_p", *(f"{tag}_{m}" for m in METRICS)]
        columns += [f"ref_{c}" for c in columns[3:]]
        for key in keys:
            cfg = scenario_config(1, key, sel, outer_draws)
            rec = {"n1": key[1], "n0": key[2], "t0": key[3]}
            for mode, tag in (("best-set", "best"), ("averaging", "avg")):
                rep = run_scenario(cfg, "gmm2", "cv", sel, seed, mode=mode)
                rec[f"{tag}_p"] = rep.p_selected
                rec.update({f"{tag}_{m}": getattr(rep, m) for m in METRICS})
            for c, v in zip(columns[3:13], refs.get(key, (None,) * 10)):
                rec[f"ref_{c}"] = v
            out_rows.append(rec)
            logger.info("table 1 row %s done", key)
        inner = sel
    elif table_id == 2:
        ncov = coverage_draws or max(10, int(round(60 * scale)))
        names = ["ite_bias", "ite_sd", "coverage_ite", "ate_bias", "ate_sd", "coverage_ate"]
        columns = ["panel", "n1", "n0", "t0", *names, *(f"ref_{c}" for c in names)]
        for key in keys:
            cfg = scenario_config(2, key, inner, outer_draws)
            rep = run_scenario(cfg, "gmm2", "fixed-split", inner, seed, p=default_p(key[3]),
                               bootstrap_b=bootstrap_b, coverage_draws=ncov)
            rec = dict(zip(("panel", "n1", "n0", "t0"), key))
            rec.update({c: getattr(rep, c) for c in names})
            rec.update({f"ref_{c}": v for c, v in zip(names, refs.get(key, (None,) * 6))})
            out_rows.append(rec)
            logger.info("table 2 row %s done", key)
    else:
        comp = COMPARATOR[table_id]
        effect = "ite" if table_id == 3 else "itt"
        names = [f"{comp}_{m}" for m in METRICS] + [f"gmm_{m}" for m in METRICS]
        columns = ["panel", "n1", "n0", "t0", *names, *(f"ref_{c}" for c in names)]
        for key in keys:
            cfg = scenario_config(table_id, key, inner, outer_draws)
            reps = run_comparison(cfg, (comp, "gmm2"), "fixed-split", inner, seed,
                                  p=default_p(key[3]), effect=effect)
            rec = dict(zip(("panel", "n1", "n0", "t0"), key))
            for m in METRICS:
                rec[f"{comp}_{m}"] = getattr(reps[comp], m)
                rec[f"gmm_{m}"] = getattr(reps["gmm2"], m)
            rec.update({f"ref_{c}": v for c, v in zip(names, refs.get(key, (None,) * 8))})
            out_rows.append(rec)
            logger.info("table %d row %s done", table_id, key)
    result = TableResult(table_id, columns, out_rows, inner, seed)
    if out_path is not None:
        base = Path(out_path)
        base = base.with_suffix("") if base.suffix in (".csv", ".md") else base
        base.parent.mkdir(parents=True, exist_ok=True)
        result.to_csv(base.with_suffix(".csv"))
        base.with_suffix(".md").write_text(result.to_markdown(), encoding="utf-8")
    return result
