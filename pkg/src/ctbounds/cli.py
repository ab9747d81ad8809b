"""Command-line interface: ``ctbounds {estimate,conditional,check-monotonicity,simulate}``.

Options may also come from a flat ``key = value`` file passed with
``--config``; command-line flags win.  Results are written as JSON (the
canonical format, reals at 12 significant digits) or as a CSV view.

Exit codes: 0 success, 2 invalid input or usage, 3 estimation failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from .dataset import Schema, load_csv
from .errors import CTBError, CTBWarning, ConfigError, DimensionMismatch, EstimationError
from .estimator import (
    EstimatorConfig,
    classify_monotonicity,
    estimate_aggregated,
    estimate_basic_tb,
    estimate_conditional,
    ipw_ate,
    ols_ate,
)
from .forest import ForestConfig

EXIT_OK, EXIT_INVALID, EXIT_ESTIMATION = 0, 2, 3
PROPENSITY_FLAGS = "--propensity REAL, --propensity-col COL, --estimate-propensity, --selected-only"

# options that can be set from a config file, with their parsers
_FILE_KEYS = {
    "data": str, "outcome": str, "treat": str, "response": str, "covariates": str,
    "propensity": float, "propensity_col": str, "estimate_propensity": "bool",
    "selected_only": float, "folds": int, "trees": int, "min_leaf": int, "mtry": int,
    "mode": str, "alpha": float, "seed": int, "binary": "bool", "bootstrap_reps": int,
    "output": str, "format": str, "threads": int, "eval_points": str, "sweep": str,
    "quantiles": str, "histogram_csv": str, "variant": str, "n_grid": str, "reps": int,
    "output_dir": str, "oracle_draws": int,
}
# execution-only settings left out of the embedded run configuration
_NOT_EMBEDDED = {"threads", "output", "output_dir", "histogram_csv", "config", "command"}
_DEFAULTS = {"folds": 5, "mode": "positive", "alpha": 0.05, "seed": 0, "format": "json",
             "bootstrap_reps": 500, "binary": False, "estimate_propensity": False}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config file and argument plumbing


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment.  Unknown keys are errors."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FILE_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown option {key!r}")
        kind = _FILE_KEYS[key]
        try:
            out[key] = _parse_bool(value) if kind == "bool" else kind(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    return out


def _add_data_flags(p: argparse.ArgumentParser):
    p.add_argument("--data", help="input CSV")
    p.add_argument("--outcome", help="outcome column")
    p.add_argument("--treat", help="treatment column (0/1)")
    p.add_argument("--response", help="response column (0/1)")
    p.add_argument("--covariates", help="comma-separated covariate columns")
    p.add_argument("--propensity", type=float, help="known constant propensity")
    p.add_argument("--propensity-col", help="column holding known propensities")
    p.add_argument("--estimate-propensity", action="store_true", default=None,
                   help="estimate p(x) with a probability forest on a held-out fold")
    p.add_argument("--selected-only", type=float, nargs="?", const=0.5, default=None,
                   metavar="P", help="q(x) from responders only; optional design "
                   "propensity (default 0.5)")
    _add_fit_flags(p)
    p.add_argument("--binary", action="store_true", default=None,
                   help="outcome is 0/1; use closed-form binary trimming")
    p.add_argument("--output", help="output file (default: standard output)")
    p.add_argument("--format", choices=("json", "csv"))


def _add_fit_flags(p):
    p.add_argument("--folds", type=int)
    p.add_argument("--trees", type=int)
    p.add_argument("--min-leaf", type=int)
    p.add_argument("--mtry", type=int)
    p.add_argument("--mode", choices=("auto", "positive", "negative", "conditional"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--bootstrap-reps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctbounds", description="Covariate-tightened trimming bounds for "
        "treatment effects under endogenous attrition.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value option file")
    common.add_argument("--threads", type=int,
                        help="worker threads (default: CTB_THREADS or all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", parents=[common], help="aggregated bounds plus baselines")
    _add_data_flags(p)

    p = sub.add_parser("conditional", parents=[common], help="bounds at evaluation points")
    _add_data_flags(p)
    p.add_argument("--eval-points", help="CSV of evaluation points")
    p.add_argument("--sweep", help="covariate to sweep over its quantiles")
    p.add_argument("--quantiles", help="start:stop:step for --sweep (default 0.05:0.95:0.05)")

    p = sub.add_parser("check-monotonicity", parents=[common],
                       help="estimate where treatment lowers response")
    _add_data_flags(p)
    p.add_argument("--histogram-csv", help="write q(x) histogram as tidy CSV")

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo study")
    p.add_argument("--variant", choices=("paper", "flip", "null", "binary"))
    p.add_argument("--n-grid", help="comma-separated sample sizes (default 500,1000,2000)")
    p.add_argument("--reps", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--oracle-draws", type=int)
    _add_fit_flags(p)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge config-file values under command-line flags, then fill defaults."""
    opts = {k: v for k, v in vars(args).items() if k != "config"}
    if args.config:
        for k, v in read_config_file(args.config).items():
            if k not in opts:
                raise ConfigError(f"option {k!r} does not apply to {args.command}")
            if opts[k] is None:
                opts[k] = v
    defaults = {"seed": 0} if args.command == "simulate" else _DEFAULTS
    for k, v in defaults.items():
        if k in opts and opts[k] is None:
            opts[k] = v
    return opts


def _set_threads(opts):
    n = opts.get("threads")
    if n is None and os.environ.get("CTB_THREADS"):
        try:
            n = int(os.environ["CTB_THREADS"])
        except ValueError as exc:
            raise ConfigError("CTB_THREADS must be an integer") from exc
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _estimator_config(opts, n_covariates=None, trees_default=500, mtry_default=None):
    chosen = [name for name, on in (
        ("known_constant", opts.get("propensity") is not None),
        ("known_column", opts.get("propensity_col") is not None),
        ("estimate", bool(opts.get("estimate_propensity"))),
        ("selected_only", opts.get("selected_only") is not None)) if on]
    if len(chosen) != 1:
        raise UsageError(f"give exactly one of {PROPENSITY_FLAGS}")
    mode = chosen[0]
    prop = opts.get("propensity") if mode == "known_constant" else opts.get("selected_only")
    forest = ForestConfig(
        num_trees=opts.get("trees") or trees_default,
        min_leaf=opts.get("min_leaf") or 5,
        mtry=opts.get("mtry") or mtry_default,
        seed=opts["seed"])
    return EstimatorConfig(
        k_folds=opts["folds"], forest=forest, alpha=opts["alpha"],
        monotonicity_mode=opts["mode"], propensity_mode=mode, propensity=prop,
        bootstrap_reps=opts["bootstrap_reps"], seed=opts["seed"], binary=bool(opts["binary"]))


def _load(opts):
    missing = [f"--{k}" for k in ("data", "outcome", "treat", "response") if not opts.get(k)]
    if missing:
        raise UsageError(f"missing required options: {', '.join(missing)}")
    covs = tuple(c.strip() for c in (opts.get("covariates") or "").split(",") if c.strip())
    schema = Schema(opts["outcome"], opts["response"], opts["treat"], covs,
                    opts.get("propensity_col"))
    return load_csv(opts["data"], schema)


# --------------------------------------------------------------------------
# serialization


def _clean(obj):
    """Round reals to 12 significant digits and make the tree JSON-safe."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return None
        return float(f"{x:.12g}")
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2) + "\n"


def _embedded(opts) -> dict:
    return {k: opts[k] for k in sorted(opts) if k not in _NOT_EMBEDDED}


def _csv_text(rows: list[dict], fields: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else
                        (f"{r[k]:.12g}" if isinstance(r.get(k), float) else r[k]))
                    for k in fields})
    return buf.getvalue()


def _emit(text: str, path):
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# commands


def cmd_estimate(opts) -> dict:
    data = _load(opts)
    cfg = _estimator_config(opts)
    ctb = estimate_aggregated(data, cfg)
    tb_cfg = cfg
    if cfg.binary:
        tb_cfg = EstimatorConfig(**{**cfg.__dict__, "binary": False})
    tb = estimate_basic_tb(data, tb_cfg)
    results = {"ctb": ctb.to_dict(), "tb": tb.to_dict()}
    for name, fn in (("ols", ols_ate), ("ipw", ipw_ate)):
        try:
            results[name] = fn(data, cfg).to_dict()
        except CTBError as exc:
            results[name] = {"method": name, "error": f"{type(exc).__name__}: {exc}"}
    out = {"tool": "ctbounds", "command": "estimate", "seed": opts["seed"],
           "config": _embedded(opts), "results": results}
    if opts["format"] == "csv":
        rows = []
        for name, r in results.items():
            row = dict(r)
            for key in ("ci_lower", "ci_upper", "ci"):
                if key in row:
                    row[key + "_lo"], row[key + "_hi"] = row.pop(key)
            rows.append(row)
        fields = ["method", "lower", "upper", "se_lower", "se_upper", "ci_lower_lo",
                  "ci_lower_hi", "ci_upper_lo", "ci_upper_hi", "estimate", "se", "ci_lo",
                  "ci_hi", "q0_hat", "n_total", "n_responders", "clip_rate", "mode"]
        return {"_csv": _csv_text(rows, fields), **out}
    return out


def _parse_quantiles(spec: str) -> np.ndarray:
    try:
        a, b, step = (float(v) for v in spec.split(":"))
    except ValueError as exc:
        raise UsageError(f"--quantiles expects start:stop:step, got {spec!r}") from exc
    if step <= 0 or not 0 <= a <= b <= 1:
        raise UsageError("--quantiles needs 0 <= start <= stop <= 1 and step > 0")
    k = int(math.floor((b - a) / step + 1e-9)) + 1
    return np.round(a + step * np.arange(k), 12)


def _eval_points(opts, data):
    names = list(data.covariate_names)
    notes = []
    if opts.get("eval_points") and opts.get("sweep"):
        raise UsageError("give either --eval-points or --sweep, not both")
    if opts.get("eval_points"):
        df = pd.read_csv(opts["eval_points"])
        if set(names) <= set(df.columns):
            df = df[names]
        if df.shape[1] != len(names):
            raise DimensionMismatch(
                f"evaluation points have {df.shape[1]} columns, expected {len(names)}")
        pts = df.to_numpy(dtype=float)
    elif opts.get("sweep"):
        col = opts["sweep"]
        if col not in names:
            raise UsageError(f"--sweep column {col!r} is not a covariate")
        j = names.index(col)
        qs = _parse_quantiles(opts.get("quantiles") or "0.05:0.95:0.05")
        grid = np.quantile(data.X[:, j], qs)
        pts = np.tile(data.X.mean(axis=0), (len(grid), 1))
        pts[:, j] = grid
    else:
        raise UsageError("give --eval-points PATH or --sweep COL")
    if len(pts) == 0:
        raise UsageError("no evaluation points")
    _, first = np.unique(pts, axis=0, return_index=True)
    if len(first) < len(pts):
        notes.append(f"{len(pts) - len(first)} duplicate evaluation points dropped")
        warnings.warn(notes[-1], CTBWarning, stacklevel=2)
        pts = pts[np.sort(first)]
    return pts, notes


def cmd_conditional(opts) -> dict:
    data = _load(opts)
    cfg = _estimator_config(opts)
    pts, _ = _eval_points(opts, data)
    res = estimate_conditional(data, pts, cfg)
    names = list(data.covariate_names)
    rows = []
    for r in res.rows():
        x = r.pop("x")
        rows.append({"x": dict(zip(names, x)), **r})
    out = {"tool": "ctbounds", "command": "conditional", "seed": opts["seed"],
           "config": _embedded(opts), "points": rows}
    if opts["format"] == "csv":
        flat = []
        for r in rows:
            row = {**r["x"], **{k: v for k, v in r.items() if k != "x"}}
            for key in ("ci_lower", "ci_upper"):
                v = row.pop(key)
                row[key + "_lo"], row[key + "_hi"] = (v if v is not None else (None, None))
            flat.append(row)
        fields = names + ["lower", "upper", "se_lower", "se_upper", "ci_lower_lo",
                          "ci_lower_hi", "ci_upper_lo", "ci_upper_hi", "q_hat", "direction"]
        return {"_csv": _csv_text(flat, fields), **out}
    return out


def cmd_check_monotonicity(opts) -> dict:
    data = _load(opts)
    cfg = _estimator_config(opts)
    part = classify_monotonicity(data, cfg)
    lo, hi, counts = part.histogram()
    hist = [{"q_left": float(a), "q_right": float(b), "count": int(c)}
            for a, b, c in zip(lo, hi, counts)]
    if opts.get("histogram_csv"):
        Path(opts["histogram_csv"]).write_text(
            _csv_text(hist, ["q_left", "q_right", "count"]))
    sys.stderr.write(f"recommendation: {part.recommendation}\n")
    if part.uninformative:
        sys.stderr.write("note: q(x) is 1 almost everywhere, the diagnostic is uninformative\n")
    out = {"tool": "ctbounds", "command": "check-monotonicity", "seed": opts["seed"],
           "config": _embedded(opts), "share_negative": part.share_negative,
           "recommendation": part.recommendation, "uninformative": part.uninformative,
           "q_hat_quantiles": {f"{p:g}": float(np.quantile(part.q_hat, p))
                               for p in (0.05, 0.25, 0.5, 0.75, 0.95)},
           "histogram": hist}
    if opts["format"] == "csv":
        return {"_csv": _csv_text(hist, ["q_left", "q_right", "count"]), **out}
    return out


def cmd_simulate(opts) -> dict:
    from .simulation import canonical_variant, default_config, run_monte_carlo

    variant = canonical_variant(opts.get("variant") or "paper")
    try:
        grid = [int(v) for v in (opts.get("n_grid") or "500,1000,2000").split(",")]
    except ValueError as exc:
        raise UsageError("--n-grid expects comma-separated integers") from exc
    reps = opts.get("reps") or 200
    mode = opts.get("mode")
    base = default_config(variant)
    forest = ForestConfig(num_trees=opts.get("trees") or 200, min_leaf=opts.get("min_leaf") or 5,
                          mtry=opts.get("mtry") or base.forest.mtry)
    overrides = {"forest": forest, "k_folds": opts.get("folds") or 5,
                 "alpha": opts.get("alpha") or 0.05,
                 "bootstrap_reps": opts.get("bootstrap_reps") or 500}
    if mode:
        overrides["monotonicity_mode"] = mode
    cfg = default_config(variant, **overrides)
    seed = opts.get("seed") or 0
    report = run_monte_carlo(variant, grid, reps, cfg, seed=seed,
                             oracle_draws=opts.get("oracle_draws") or 10 ** 7)
    sys.stderr.write(f"simulation finished in {report.runtime:.1f} s\n")
    body = report.to_dict()
    body.pop("runtime")
    out = {"tool": "ctbounds", "command": "simulate", "seed": seed,
           "config": _embedded(opts), **body}
    outdir = Path(opts.get("output_dir") or ".")
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "report.json").write_text(dumps(out))
    (outdir / "report.csv").write_text(_csv_text(report.rows, list(report.ROW_FIELDS)))
    out["_written"] = True
    return out


_COMMANDS = {"estimate": cmd_estimate, "conditional": cmd_conditional,
             "check-monotonicity": cmd_check_monotonicity, "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", CTBWarning)
            opts = resolve(args)
            _set_threads(opts)
            out = _COMMANDS[args.command](opts)
        notes = []
        for w in caught:
            if issubclass(w.category, CTBWarning):
                msg = str(w.message)
                if msg not in notes:
                    notes.append(msg)
                    sys.stderr.write(f"warning: {msg}\n")
    except (UsageError, ConfigError) as exc:
        sys.stderr.write(f"ctbounds: error: {exc}\n")
        return EXIT_INVALID
    except CTBError as exc:
        code = EXIT_ESTIMATION if isinstance(exc, EstimationError) else EXIT_INVALID
        sys.stderr.write(f"ctbounds: {type(exc).__name__}: {exc}\n")
        return code
    except (FileNotFoundError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        sys.stderr.write(f"ctbounds: error: {exc}\n")
        return EXIT_INVALID
    if out.pop("_written", False):
        return EXIT_OK
    out["warnings"] = notes
    csv_text = out.pop("_csv", None)
    _emit(csv_text if csv_text is not None else dumps(out), opts.get("output"))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
