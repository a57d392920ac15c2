"""Command-line front end.

Commands: ``simulate``, ``select``, ``estimate``, ``bootstrap``,
``report`` and ``reproduce``. Every command writes ``manifest.json`` to
its output directory with the arguments, seed, input file hashes and
library versions needed to replay the run.

Options can also be set through environment variables named
``ITEGMM_<OPTION>`` (for example ``ITEGMM_SEED=7`` or
``ITEGMM_THREADS=4``); explicit flags win.

Exit codes: 0 success, 1 estimation failure, 2 configuration or input
error. Failures print a JSON object with ``error``, ``message`` and
``exit_code`` to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .bootstrap import BootstrapError, bootstrap_effects
from .design import DesignError, SplitSpec, _cell, split_from_cells
from .gmm import GmmError, estimate_effects
from .panel import PanelError, default_schema, derive_layout, load_panel, load_schema, write_panel
from .report import ReportError, group_report, labels_from_effects
from .select import estimate_averaged, select_model
from .simlab import DgpConfig, ScenarioError, generate, reproduce_table

logger = logging.getLogger("itegmm")

ENV_PREFIX = "ITEGMM_"
EXIT_OK, EXIT_ESTIMATION, EXIT_CONFIG = 0, 1, 2
ESTIMATION_ERRORS = (GmmError, BootstrapError, ScenarioError, np.linalg.LinAlgError)
CONFIG_ERRORS = (PanelError, DesignError, ReportError, ValueError, KeyError, FileNotFoundError)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_manifest(out_dir: Path, args: argparse.Namespace, inputs: dict, outputs: list) -> Path:
    config = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k != "func"}
    blob = json.dumps(config, sort_keys=True).encode()
    manifest = {
        "command": args.command,
        "seed": getattr(args, "seed", None),
        "config": config,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)} for name, p in inputs.items() if p},
        "outputs": [str(p) for p in outputs],
        "versions": {
            "itegmm": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
            "python": platform.python_version(),
        },
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    if not Path(args.data).exists():
        raise FileNotFoundError(f"data file not found: {args.data}")
    if args.schema is None:
        raise ConfigError("--schema is required")
    schema = load_schema(args.schema)
    data = load_panel(args.data, schema)
    return data, derive_layout(data)


def _split_from_args(args, target):
    if args.split:
        text = Path(args.split).read_text(encoding="utf-8") if Path(args.split).exists() else args.split
        split = SplitSpec.from_json(text)
        if split.target != target:
            raise ConfigError(f"split targets {split.target}, not {target}")
        return split
    if args.cells:
        return split_from_cells([c for c in args.cells.split(",") if c], target,
                                exclude_same_period=args.exclude_same_period)
    return None


def _require_seed(args):
    if args.seed is None:
        raise ConfigError(f"--seed is required for {args.command}")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    _require_seed(args)
    if args.config:
        path = Path(args.config)
        text = path.read_text(encoding="utf-8")
        if path.suffix.lower() == ".toml":
            from .panel import tomllib

            raw = tomllib.loads(text)
        else:
            raw = json.loads(text)
        cfg = DgpConfig.from_dict(raw)
    else:
        cfg = DgpConfig(n1=args.n1, n0=args.n0, t0=args.t0, k=args.k)
    out = _out_dir(args)
    sim = generate(cfg, (args.seed, args.outer), (args.seed, args.outer, args.inner))
    panel_path = write_panel(sim.data, out / "panel.csv")
    schema_path = out / "schema.json"
    schema_path.write_text(json.dumps(default_schema(sim.data).to_dict(), indent=2), encoding="utf-8")
    truth = pd.DataFrame(sim.truth, columns=[f"tau_{q + 1}" for q in range(cfg.k)])
    truth.insert(0, "id", list(sim.data.ids))
    truth.insert(1, "treated", sim.layout.is_treated.astype(int))
    truth_path = out / "truth.csv"
    truth.to_csv(truth_path, index=False, float_format="%.17g")
    (out / "dgp.json").write_text(json.dumps(cfg.to_dict(), indent=2), encoding="utf-8")
    write_manifest(out, args, {"config": args.config}, [panel_path, schema_path, truth_path])
    print(json.dumps({"panel": str(panel_path), "n": cfg.n, "t": cfg.t, "k": cfg.k}))
    return EXIT_OK


def _run_selection(args, data, layout, target):
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    p_range = [args.p] if args.p else None
    return select_model(
        data, layout, target, p_range=p_range, max_splits=args.max_splits, mode=args.mode,
        step=args.step, subsample=args.loo_subsample, rng=rng,
        exclude_same_period=args.exclude_same_period,
    )


def _holdout_halves(layout, seed):
    """Random halves of each group: (selection rows, estimation rows)."""
    rng = np.random.default_rng([0 if seed is None else seed, 1])
    sel, est = [], []
    for rows in (layout.treated_ids, layout.control_ids):
        perm = rng.permutation(rows)
        cut = perm.size // 2
        sel.append(perm[:cut])
        est.append(perm[cut:])
    return np.sort(np.concatenate(sel)), np.sort(np.concatenate(est))


def cmd_select(args) -> int:
    data, layout = _load(args)
    target = _cell(args.target)
    out = _out_dir(args)
    rep = _run_selection(args, data, layout, target)
    path = out / "selection.json"
    path.write_text(rep.to_json(indent=2), encoding="utf-8")
    write_manifest(out, args, {"data": args.data, "schema": args.schema}, [path])
    print(json.dumps({"best_p": rep.best_p, "best_split": rep.best_split.to_dict(),
                      "criterion": rep.criterion}))
    return EXIT_OK


def cmd_estimate(args) -> int:
    data, layout = _load(args)
    target = _cell(args.target)
    if target.period <= layout.t0:
        raise ConfigError(f"target {target} is not a posttreatment cell (t0={layout.t0})")
    if args.b and args.seed is None:
        raise ConfigError("--seed is required when --b > 0")
    out = _out_dir(args)
    outputs = []
    split = _split_from_args(args, target)
    if split is None:
        sel_data, sel_layout = data, layout
        if args.selection_holdout:
            sel_rows, est_rows = _holdout_halves(layout, args.seed)
            sel_data = data.subset(sel_rows)
            sel_layout = derive_layout(sel_data)
            data = data.subset(est_rows)
            layout = derive_layout(data)
        rep = _run_selection(args, sel_data, sel_layout, target)
        sel_path = out / "selection.json"
        sel_path.write_text(rep.to_json(indent=2), encoding="utf-8")
        outputs.append(sel_path)
        split = rep.best_split
        if args.mode == "averaging":
            members = rep.per_p[rep.best_p]["splits"]
            est = estimate_averaged(data, layout, target, step=args.step, splits=members)
        else:
            est = estimate_effects(data, layout, split, args.step)
    else:
        est = estimate_effects(data, layout, split, args.step)
    eff_path = out / "effects.csv"
    if args.b:
        res = bootstrap_effects(
            data, layout, target, split, b=args.b, ci_mode=args.ci_mode, alpha=args.alpha,
            rng=args.seed, step=args.step, workers=args.threads,
        )
        res.to_csv(eff_path)
        boot_path = out / "bootstrap.json"
        boot_path.write_text(res.to_json(keep_draws=args.keep_draws), encoding="utf-8")
        outputs.append(boot_path)
        summary = {"ate": res.ate, "se_ate": res.se_ate, "ci_ate": list(res.ci_ate),
                   "significance": {g: int(np.sum(res.significance == g))
                                    for g in ("negative", "none", "positive")}}
    else:
        est.to_csv(eff_path)
        summary = {"ate": est.ate}
    outputs.append(eff_path)
    fit_path = out / "estimate.json"
    fit_path.write_text(est.to_json(), encoding="utf-8")
    outputs.append(fit_path)
    write_manifest(out, args, {"data": args.data, "schema": args.schema}, outputs)
    summary.update({"estimator": est.estimator, "split": split.to_dict(), "effects": str(eff_path)})
    print(json.dumps(summary))
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    _require_seed(args)
    if not args.b:
        raise ConfigError("--b must be positive for bootstrap")
    return cmd_estimate(args)


def cmd_report(args) -> int:
    effects = pd.read_csv(args.effects, dtype={"id": str})
    chars = pd.read_csv(args.characteristics, dtype={args.id_column: str})
    labels = labels_from_effects(effects, args.alpha)
    rep = group_report(labels, chars.rename(columns={args.id_column: "id"}))
    out = _out_dir(args)
    md = out / "report.md"
    md.write_text(rep.to_markdown(), encoding="utf-8")
    csv_path = rep.to_csv(out / "report.csv")
    write_manifest(out, args, {"effects": args.effects, "characteristics": args.characteristics},
                   [md, csv_path])
    print(rep.to_markdown())
    return EXIT_OK


def cmd_reproduce(args) -> int:
    out = _out_dir(args)
    res = reproduce_table(
        args.table, args.scale, out / f"table{args.table}", seed=args.seed or 0,
        outer_draws=args.outer_draws, bootstrap_b=args.bootstrap_b,
    )
    write_manifest(out, args, {}, [out / f"table{args.table}.csv", out / f"table{args.table}.md"])
    print(res.to_markdown())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common_estimation(p):
    p.add_argument("--data", required=True, help="long-format panel CSV")
    p.add_argument("--schema", help="JSON or TOML column-role mapping")
    p.add_argument("--target", required=True, help="target cell as period:outcome, e.g. 2:1")
    p.add_argument("--p", type=int, help="number of regressor cells (default: selected)")
    p.add_argument("--mode", choices=("best-set", "averaging"), default="best-set")
    p.add_argument("--step", choices=("one", "two"), default="two")
    p.add_argument("--max-splits", type=int, default=50)
    p.add_argument("--loo-subsample", type=int, default=100,
                   help="individuals left out per group during selection (0 = all)")
    p.add_argument("--exclude-same-period", action="store_true",
                   help="drop outcome cells of the target period from the instruments")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=".")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="itegmm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write one simulated panel with its true effects")
    p.add_argument("--config", help="DGP settings (JSON or TOML)")
    p.add_argument("--n1", type=int, default=100)
    p.add_argument("--n0", type=int, default=100)
    p.add_argument("--t0", type=int, default=1)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--outer", type=int, default=0, help="structure draw index")
    p.add_argument("--inner", type=int, default=0, help="shock draw index")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("select", help="leave-one-out selection of regressor cells")
    _common_estimation(p)
    p.set_defaults(func=cmd_select)

    for name, func, b_default in (("estimate", cmd_estimate, 0), ("bootstrap", cmd_bootstrap, 600)):
        p = sub.add_parser(name, help="individual effects" + (" with bootstrap inference" if b_default else ""))
        _common_estimation(p)
        p.add_argument("--split", help="SplitSpec JSON (file or literal)")
        p.add_argument("--cells", help="regressor cells, e.g. 1:1,1:3")
        p.add_argument("--b", type=int, default=b_default, help="bootstrap replicates (0 = none)")
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--ci-mode", choices=("percentile", "normal"), default="percentile")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--keep-draws", action="store_true")
        p.add_argument("--selection-holdout", action="store_true",
                       help="select on a random half of each group, estimate on the other")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="compare characteristics across significance groups")
    p.add_argument("--effects", required=True, help="effects CSV with ci_lo/ci_hi or se")
    p.add_argument("--characteristics", required=True)
    p.add_argument("--id-column", default="id")
    p.add_argument("--alpha", type=float, default=0.10)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("reproduce", help="rerun a simulation table at reduced scale")
    p.add_argument("--table", type=int, required=True, choices=range(1, 6))
    p.add_argument("--scale", type=float, default=0.2)
    p.add_argument("--outer-draws", type=int, default=5)
    p.add_argument("--bootstrap-b", type=int, default=600)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_reproduce)
    return parser


def _apply_env(parser, argv):
    """Fill unset options from ITEGMM_* variables for the chosen command."""
    env = {k[len(ENV_PREFIX):].lower(): v for k, v in os.environ.items() if k.startswith(ENV_PREFIX)}
    if not env:
        return parser.parse_args(argv)
    args = parser.parse_args(argv)
    sub = next(a for a in parser._subparsers._group_actions if isinstance(a, argparse._SubParsersAction))
    sp = sub.choices[args.command]
    flags = {tok.split("=", 1)[0] for tok in argv}
    given = {a.dest for a in sp._actions if flags.intersection(a.option_strings)}
    for action in sp._actions:
        if action.dest in env and action.dest not in given and action.option_strings:
            value = env[action.dest]
            if action.type is not None:
                value = action.type(value)
            elif isinstance(action, argparse._StoreTrueAction):
                value = value.lower() in ("1", "true", "yes")
            setattr(args, action.dest, value)
    return args


def _fail(exc, code) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    diag = getattr(exc, "diagnostics", None)
    if diag:
        payload["diagnostics"] = {k: _jsonable(v) for k, v in diag.items()}
    print(json.dumps(payload, default=str), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = _apply_env(parser, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ESTIMATION_ERRORS as exc:
        return _fail(exc, EXIT_ESTIMATION)
    except CONFIG_ERRORS as exc:
        return _fail(exc, EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
