"""Synthetic experiments with endogenous attrition, oracle truths and Monte Carlo studies.

The data-generating process has ten uniform covariates of which only the
first matters, a uniform latent factor ``U`` that drives both response and
outcomes, and a treatment that raises response for everyone::

    Y(0) = 1.5 - 0.6 U^2 + 4 X1 + eps
    Y(1) = Y(0) + 2.5 U + 3 sin(-0.7 + 2 X1)
    S(d) = 1{1 - 0.2 X1 - 1.6 U + d (0.4 + 0.1 X1 + 2 U) + nu > 0}

with ``eps, nu ~ N(0, 1)`` and ``D ~ Bernoulli(0.5)``.  Variants flip the
sign of the treatment's response effect with ``X2`` (``flip_monotonicity``),
drop the treatment effect (``null_effect``) or dichotomize the outcome
(``binary_outcome``).
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import Dataset
from .errors import ConfigError, CTBError
from .estimator import (
    EstimatorConfig,
    estimate_aggregated,
    estimate_basic_tb,
    ipw_ate,
    ols_ate,
)
from .forest import ForestConfig, derive_seed

VARIANTS = ("paper", "flip_monotonicity", "null_effect", "binary_outcome")
_ALIASES = {"flip": "flip_monotonicity", "null": "null_effect", "binary": "binary_outcome"}
DESIGN_PROPENSITY = 0.5


def canonical_variant(variant: str) -> str:
    v = _ALIASES.get(variant, variant)
    if v not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    return v


@dataclass(frozen=True)
class DgpSpec:
    n: int
    p_covariates: int = 10
    variant: str = "paper"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        need = 2 if self.variant == "flip_monotonicity" else 1
        if self.p_covariates < need:
            raise ConfigError(f"variant {self.variant} needs at least {need} covariates")


def potential_outcomes(variant: str, x1, x2, u, eps, nu):
    """Both potential outcomes and responses; ``x2`` only matters for the flip variant."""
    variant = canonical_variant(variant)
    y0 = 1.5 - 0.6 * u ** 2 + 4 * x1 + eps
    if variant == "null_effect":
        y1 = y0.copy()
    else:
        y1 = y0 + 2.5 * u + 3 * np.sin(-0.7 + 2 * x1)
    base = 1 - 0.2 * x1 - 1.6 * u + nu
    push = 0.4 + 0.1 * x1 + 2 * u
    if variant == "flip_monotonicity":
        push = np.sign(x2 - 0.5) * push
    s0 = base > 0
    s1 = base + push > 0
    if variant == "binary_outcome":
        # threshold at E[Y(0) | X1], which sits close to its conditional median
        cut = 1.3 + 4 * x1
        y0 = (y0 > cut).astype(float)
        y1 = (y1 > cut).astype(float)
    return y0, y1, s0, s1


def generate(spec: DgpSpec) -> Dataset:
    """Draw one experiment of size ``spec.n`` with known propensity 0.5."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    X = rng.uniform(size=(n, spec.p_covariates))
    u = rng.uniform(size=n)
    eps = rng.standard_normal(n)
    nu = rng.standard_normal(n)
    d = (rng.uniform(size=n) < DESIGN_PROPENSITY).astype(float)
    x2 = X[:, 1] if spec.p_covariates > 1 else np.zeros(n)
    y0, y1, s0, s1 = potential_outcomes(spec.variant, X[:, 0], x2, u, eps, nu)
    s = np.where(d == 1, s1, s0).astype(float)
    y = np.where(s == 1, np.where(d == 1, y1, y0), np.nan)
    names = [f"x{j + 1}" for j in range(spec.p_covariates)]
    return Dataset.from_arrays(y, s, d, X, np.full(n, DESIGN_PROPENSITY), names)


# --------------------------------------------------------------------------
# oracle truths


@dataclass
class OracleTruths:
    """Population targets computed with access to the latent variables.

    ``curves`` holds conditional bounds per X1 bin (and, for the flip
    variant, per side of X2 = 0.5): keys ``x1``, ``negative``, ``lower``,
    ``upper``, ``q``.
    """

    variant: str
    ate: float
    ate_always_responders: float
    tb_lower: float
    tb_upper: float
    ctb_lower: float
    ctb_upper: float
    q: float
    draws: int
    curves: dict = field(default_factory=dict, repr=False)

    def chain_holds(self) -> bool:
        return (self.tb_lower <= self.ctb_lower <= self.ate_always_responders
                <= self.ctb_upper <= self.tb_upper)

    def scalars(self) -> dict:
        d = asdict(self)
        d.pop("curves")
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in d.items()}


def _cell_trim(cell, y, n_cells, keep):
    """Sum of the ``keep[c]`` smallest and largest y within each cell (exact counts)."""
    order = np.lexsort((y, cell))
    ys = y[order]
    counts = np.bincount(cell, minlength=n_cells)
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    cs = np.concatenate([[0.0], np.cumsum(ys)])
    low = cs[start + keep] - cs[start]
    high = cs[start + counts] - cs[start + counts - keep]
    return low, high


def oracle_truths(variant: str = "paper", draws: int = 10 ** 7, seed: int = 0,
                  bins: int = 400, chunk: int = 10 ** 6) -> OracleTruths:
    """Brute-force Monte Carlo evaluation of the population bounds.

    Draws ``(X1, X2, U, eps, nu)`` and both potential outcomes/responses,
    so principal strata are known.  Conditional trimming uses exact-count
    trimming within ``bins`` equal-width X1 bins (times the X2 side for the
    flip variant); the conditional bounds are aggregated with always-
    responder counts.
    """
    variant = canonical_variant(variant)
    if draws < 10 ** 4:
        raise ConfigError("draws must be >= 10^4")
    flip = variant == "flip_monotonicity"
    n_cells = bins * (2 if flip else 1)
    rng = np.random.default_rng(seed)

    n_cell = np.zeros(n_cells)
    n0 = np.zeros(n_cells)
    n1 = np.zeros(n_cells)
    n_ar = np.zeros(n_cells)
    sum_y0 = np.zeros(n_cells)
    sum_y1 = np.zeros(n_cells)
    tau_sum = 0.0
    tau_ar_sum = 0.0
    ar_total = 0
    trim_cells, trim_y = [], []  # outcomes in the arm that gets trimmed, per cell
    left = draws
    while left > 0:
        m = min(chunk, left)
        left -= m
        x1 = rng.uniform(size=m)
        x2 = rng.uniform(size=m)
        u = rng.uniform(size=m)
        eps = rng.standard_normal(m)
        nu = rng.standard_normal(m)
        y0, y1, s0, s1 = potential_outcomes(variant, x1, x2, u, eps, nu)
        b = np.minimum((x1 * bins).astype(np.int64), bins - 1)
        neg = (x2 < 0.5) if flip else np.zeros(m, dtype=bool)
        cell = b + bins * neg if flip else b
        ar = s0 & s1
        tau = y1 - y0
        tau_sum += tau.sum()
        tau_ar_sum += tau[ar].sum()
        ar_total += int(ar.sum())
        n_cell += np.bincount(cell, minlength=n_cells)
        n0 += np.bincount(cell, weights=s0, minlength=n_cells)
        n1 += np.bincount(cell, weights=s1, minlength=n_cells)
        n_ar += np.bincount(cell, weights=ar, minlength=n_cells)
        sum_y0 += np.bincount(cell[s0], weights=y0[s0], minlength=n_cells)
        sum_y1 += np.bincount(cell[s1], weights=y1[s1], minlength=n_cells)
        # positive cells trim treated responders, negative cells trim control responders
        take = np.where(neg, s0, s1)
        trim_cells.append(cell[take])
        trim_y.append(np.where(neg, y0, y1)[take])
    cell_t = np.concatenate(trim_cells)
    y_t = np.concatenate(trim_y)
    del trim_cells, trim_y

    negative = np.zeros(n_cells, dtype=bool)
    if flip:
        negative[bins:] = True
    q_cell = n0 / n1
    n_trim = np.where(negative, n0, n1)
    share = np.where(negative, n1 / n0, q_cell)
    keep = np.maximum(np.rint(share * n_trim).astype(np.int64), 1)
    low, high = _cell_trim(cell_t, y_t, n_cells, keep)
    mean_lo, mean_hi = low / keep, high / keep
    th0, th1 = sum_y0 / n0, sum_y1 / n1
    lower = np.where(negative, th1 - mean_hi, mean_lo - th0)
    upper = np.where(negative, th1 - mean_lo, mean_hi - th0)
    ctb_lower = float(np.sum(n_ar * lower) / n_ar.sum())
    ctb_upper = float(np.sum(n_ar * upper) / n_ar.sum())

    # unconditional trimming, within each monotonicity region
    reg_cell = np.where(negative[cell_t], 1, 0)
    tb_lo, tb_hi, mass = [], [], []
    for r in ((0, 1) if flip else (0,)):
        cells_r = negative == bool(r)
        N0, N1 = n0[cells_r].sum(), n1[cells_r].sum()
        S0, S1 = sum_y0[cells_r].sum(), sum_y1[cells_r].sum()
        yy = np.sort(y_t[reg_cell == r])
        if r == 0:
            k = max(int(N0), 1)  # keep q * N1 = N0 treated responders
            lo_m, hi_m = yy[:k].mean(), yy[-k:].mean()
            tb_lo.append(lo_m - S0 / N0)
            tb_hi.append(hi_m - S0 / N0)
        else:
            k = max(int(N1), 1)
            lo_m, hi_m = yy[:k].mean(), yy[-k:].mean()
            tb_lo.append(S1 / N1 - hi_m)
            tb_hi.append(S1 / N1 - lo_m)
        mass.append(n_ar[cells_r].sum())
    mass = np.asarray(mass)
    tb_lower = float(np.dot(mass, tb_lo) / mass.sum())
    tb_upper = float(np.dot(mass, tb_hi) / mass.sum())

    centers = (np.arange(bins) + 0.5) / bins
    curves = {
        "x1": np.tile(centers, 2 if flip else 1),
        "negative": negative,
        "lower": lower,
        "upper": upper,
        "q": q_cell,
    }
    return OracleTruths(
        variant, float(tau_sum / draws), float(tau_ar_sum / ar_total), tb_lower, tb_upper,
        ctb_lower, ctb_upper, float(n0.sum() / n1.sum()), draws, curves)


def conditional_oracle(variant: str, x, draws: int = 10 ** 6, seed: int = 0) -> dict:
    """Population bounds at one covariate point by Monte Carlo over (U, eps, nu)."""
    variant = canonical_variant(variant)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x1 = float(x[0])
    x2 = float(x[1]) if x.shape[0] > 1 else 0.5
    rng = np.random.default_rng(seed)
    u = rng.uniform(size=draws)
    eps = rng.standard_normal(draws)
    nu = rng.standard_normal(draws)
    y0, y1, s0, s1 = potential_outcomes(variant, np.full(draws, x1), np.full(draws, x2),
                                        u, eps, nu)
    q = s0.sum() / s1.sum()
    ar = s0 & s1
    out = {"q": float(q), "cate_always_responders": float(np.mean((y1 - y0)[ar]))}
    if q <= 1:
        ys = np.sort(y1[s1])
        k = max(int(round(q * len(ys))), 1)
        th0 = y0[s0].mean()
        out.update(lower=float(ys[:k].mean() - th0), upper=float(ys[-k:].mean() - th0),
                   direction="positive")
    else:
        ys = np.sort(y0[s0])
        k = max(int(round(len(ys) / q)), 1)
        th1 = y1[s1].mean()
        out.update(lower=float(th1 - ys[-k:].mean()), upper=float(th1 - ys[:k].mean()),
                   direction="negative")
    return out


def true_regions(X) -> np.ndarray:
    """Oracle X- membership for the flip variant (treatment lowers response)."""
    return np.asarray(X)[:, 1] < 0.5


# --------------------------------------------------------------------------
# Monte Carlo harness

ESTIMATORS = ("ctb", "tb", "ols", "ipw")


def default_config(variant: str = "paper", p_covariates: int = 10,
                   **overrides) -> EstimatorConfig:
    """Estimator settings used by the studies: 200 trees trying every covariate, known p = 0.5."""
    mode = "conditional" if canonical_variant(variant) == "flip_monotonicity" \
        else "assume_positive"
    kw = dict(forest=ForestConfig(num_trees=200, mtry=p_covariates), propensity_mode="known_constant",
              propensity=DESIGN_PROPENSITY, monotonicity_mode=mode,
              binary=canonical_variant(variant) == "binary_outcome")
    kw.update(overrides)
    return EstimatorConfig(**kw)


@dataclass
class MonteCarloReport:
    variant: str
    n_grid: list
    reps: int
    seed: int
    config: dict
    truths: dict
    rows: list = field(default_factory=list)
    records: list = field(default_factory=list)
    runtime: float = 0.0

    ROW_FIELDS = ("estimator", "n", "target", "truth", "reps_ok", "failures", "mean",
                  "bias", "mse", "coverage", "mean_width")

    def row(self, estimator: str, n: int, target: str) -> dict:
        for r in self.rows:
            if r["estimator"] == estimator and r["n"] == n and r["target"] == target:
                return r
        raise KeyError((estimator, n, target))

    def per_rep(self, estimator: str, n: int) -> list[dict]:
        return [r for r in self.records if r["estimator"] == estimator and r["n"] == n]

    def to_dict(self) -> dict:
        return {"variant": self.variant, "n_grid": list(self.n_grid), "reps": self.reps,
                "seed": self.seed, "config": self.config, "truths": self.truths,
                "rows": self.rows, "records": self.records, "runtime": self.runtime}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.ROW_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow(r)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _targets(truths: OracleTruths) -> dict:
    return {
        ("ctb", "lower"): truths.ctb_lower, ("ctb", "upper"): truths.ctb_upper,
        ("tb", "lower"): truths.tb_lower, ("tb", "upper"): truths.tb_upper,
        ("ols", "ate"): truths.ate_always_responders,
        ("ipw", "ate"): truths.ate_always_responders,
    }


def _one_rep(variant, n, rep, seed, config, estimators, p_covariates):
    data_seed = derive_seed(seed, n, rep, 0)
    cfg_seed = derive_seed(seed, n, rep, 1)
    cfg = EstimatorConfig(**{**config.__dict__, "seed": cfg_seed})
    data = generate(DgpSpec(n, p_covariates, variant, data_seed))
    out = []
    for name in estimators:
        rec = {"estimator": name, "n": n, "rep": rep}
        try:
            if name == "ctb":
                r = estimate_aggregated(data, cfg)
            elif name == "tb":
                r = estimate_basic_tb(data, cfg)
            elif name == "ols":
                r = ols_ate(data, cfg)
            elif name == "ipw":
                r = ipw_ate(data, cfg)
            else:
                raise ConfigError(f"unknown estimator {name!r}")
        except CTBError as exc:
            rec["error"] = f"{type(exc).__name__}: {exc}"
            out.append(rec)
            continue
        if name in ("ctb", "tb"):
            rec.update(lower=r.lower, upper=r.upper, se_lower=r.se_lower, se_upper=r.se_upper,
                       ci_lower=list(r.ci_lower), ci_upper=list(r.ci_upper))
        else:
            rec.update(estimate=r.estimate, se=r.se, ci=list(r.ci))
        out.append(rec)
    return out


def _summarize(records, n, name, target, truth):
    recs = [r for r in records if r["estimator"] == name and r["n"] == n]
    ok = [r for r in recs if "error" not in r]
    row = {"estimator": name, "n": n, "target": target, "truth": truth,
           "reps_ok": len(ok), "failures": len(recs) - len(ok)}
    if not ok:
        row.update(mean=math.nan, bias=math.nan, mse=math.nan, coverage=math.nan,
                   mean_width=math.nan)
        return row
    key = "estimate" if target == "ate" else target
    ci_key = "ci" if target == "ate" else f"ci_{target}"
    est = np.array([r[key] for r in ok])
    ci = np.array([r[ci_key] for r in ok])
    if target == "ate":
        width = ci[:, 1] - ci[:, 0]
    else:
        width = np.array([r["upper"] - r["lower"] for r in ok])
    row.update(mean=float(est.mean()), bias=float(est.mean() - truth),
               mse=float(np.mean((est - truth) ** 2)),
               coverage=float(np.mean((ci[:, 0] <= truth) & (truth <= ci[:, 1]))),
               mean_width=float(width.mean()))
    return row


def run_monte_carlo(variant: str = "paper", n_grid=(500, 1000, 2000), reps: int = 200,
                    config: EstimatorConfig | None = None, seed: int = 0,
                    truths: OracleTruths | None = None, estimators=ESTIMATORS,
                    p_covariates: int = 10, oracle_draws: int = 10 ** 7,
                    progress=None) -> MonteCarloReport:
    """Repeat generate -> estimate over ``reps`` seeds for every n in ``n_grid``.

    Estimator failures are recorded per rep (``error`` field) and excluded
    from the summaries rather than aborting the study.
    """
    variant = canonical_variant(variant)
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    config = config or default_config(variant)
    t0 = time.perf_counter()
    if truths is None:
        truths = oracle_truths(variant, draws=oracle_draws, seed=derive_seed(seed, 7))
    records = []
    for n in n_grid:
        for rep in range(reps):
            records.extend(_one_rep(variant, int(n), rep, seed, config, estimators,
                                    p_covariates))
            if progress is not None:
                progress(int(n), rep)
    targets = _targets(truths)
    rows = []
    for n in n_grid:
        for name in estimators:
            for (est, target), truth in targets.items():
                if est == name:
                    rows.append(_summarize(records, int(n), name, target, truth))
    report = MonteCarloReport(variant, [int(n) for n in n_grid], reps, seed, config.to_dict(),
                              truths.scalars(), rows, records)
    report.runtime = time.perf_counter() - t0
    return report
