"""Shared fixtures: small panels built directly or from the simulation DGP."""

import numpy as np
import pytest

from itegmm.panel import PanelDataset, derive_layout
from itegmm.simlab import DgpConfig, generate


def make_panel(y, x=None, d=None, t0=1, n1=None):
    """Panel from raw arrays; the first ``n1`` rows are treated after ``t0``."""
    y = np.asarray(y, float)
    n, t, _ = y.shape
    if x is None:
        x = np.zeros((n, t, 0))
    if d is None:
        d = np.zeros((n, t), dtype=int)
        d[: (n // 2 if n1 is None else n1), t0:] = 1
    return PanelDataset(y, x, d)


def sim(n1=40, n0=40, t0=1, k=5, seed=0, inner=0, **kw):
    cfg = DgpConfig(n1=n1, n0=n0, t0=t0, k=k, **kw)
    return generate(cfg, (seed, 0), (seed, 0, inner))


def noise_free(n1=30, n0=30, t0=1, k=5, seed=0, **kw):
    """DGP draw with every shock switched off."""
    return sim(n1, n0, t0, k, seed, noise_scale=0.0, **kw)


@pytest.fixture
def baseline():
    s = sim(60, 60, seed=3)
    return s.data, s.layout


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def layout_of(data):
    return derive_layout(data)


# one line per acceptance criterion, printed after the test session
ACCEPTANCE = []


def acceptance_line(tag, ok, detail):
    line = f"{tag:<4} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
