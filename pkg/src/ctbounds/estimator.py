"""Cross-fitted covariate-tightened trimming bounds and comparison estimators.

The aggregated bounds follow a K-fold recipe: for every fold, response
probabilities and trimming quantiles are fitted on the other folds with
honest forests, frozen, and plugged into orthogonalized scores evaluated on
the held-out fold.  The per-fold ratios ``mean(score) / mean(q0 weight)``
are averaged; the variance comes from a delta method on the pooled scores.

Also here: unconditional (Lee) trimming bounds, conditional bounds at
user-chosen points, the monotonicity-region diagnostic and two regression
baselines (responders-only OLS and its inverse-response-probability
weighted version).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import norm

from . import moments as mo
from .dataset import PROPENSITY_EPS, Dataset, FoldPlan, make_folds
from .errors import (
    ConfigError,
    CTBWarning,
    DegenerateTarget,
    DimensionMismatch,
    EstimationError,
    MonotonicityWarning,
    NonBinaryFlag,
    NonConvergentNuisance,
    PropensityMissing,
    SingularDesign,
    TooFewUnits,
)
from .forest import Forest, ForestConfig, derive_seed, weighted_quantiles

MODES = ("assume_positive", "assume_negative", "conditional", "auto")
PROPENSITY_MODES = ("known_constant", "known_column", "estimate", "selected_only")
AUTO_SHARE = 0.10

_MODE_ALIASES = {"positive": "assume_positive", "negative": "assume_negative"}

# seed stream ids, one per nuisance role
_SEED_FOLDS = 0
_ROLE_Q0, _ROLE_Q1, _ROLE_YT, _ROLE_YC, _ROLE_P, _ROLE_R = 1, 2, 3, 4, 5, 6
_ROLE_TH1, _ROLE_TH0, _ROLE_IPW, _ROLE_XI, _ROLE_BOOT = 7, 8, 9, 10, 11


@dataclass(frozen=True)
class EstimatorConfig:
    """Settings shared by all estimators.

    ``propensity_mode`` is one of ``known_constant`` (use ``propensity``),
    ``known_column`` (the dataset's p column), ``estimate`` (probability
    forest on a held-out fold, needs ``k_folds >= 3``) or ``selected_only``
    (trimming share from the responders-only treatment probability; p comes
    from ``propensity`` or the dataset column).  ``ci_groups`` is the number
    of little bags used for conditional-bound standard errors.
    """

    k_folds: int = 5
    forest: ForestConfig = field(default_factory=ForestConfig)
    alpha: float = 0.05
    monotonicity_mode: str = "assume_positive"
    propensity_mode: str = "known_column"
    propensity: float | None = None
    bootstrap_reps: int = 500
    seed: int = 0
    binary: bool = False
    ci_groups: int = 10

    def __post_init__(self):
        mode = _MODE_ALIASES.get(self.monotonicity_mode, self.monotonicity_mode)
        object.__setattr__(self, "monotonicity_mode", mode)
        if mode not in MODES:
            raise ConfigError(f"unknown monotonicity mode {self.monotonicity_mode!r}")
        if self.propensity_mode not in PROPENSITY_MODES:
            raise ConfigError(f"unknown propensity mode {self.propensity_mode!r}")
        if self.k_folds < 2:
            raise ConfigError("k_folds must be >= 2")
        if self.propensity_mode == "estimate" and self.k_folds < 3:
            raise ConfigError("estimating the propensity needs k_folds >= 3")
        if not 0 < self.alpha < 0.5:
            raise ConfigError("alpha must lie in (0, 0.5)")
        if self.propensity_mode == "known_constant" and self.propensity is None:
            raise ConfigError("known_constant mode needs a propensity value")
        if self.propensity is not None and not (
                PROPENSITY_EPS <= self.propensity <= 1 - PROPENSITY_EPS):
            raise ConfigError(f"propensity must lie in [{PROPENSITY_EPS}, {1 - PROPENSITY_EPS}]")
        if self.bootstrap_reps < 2:
            raise ConfigError("bootstrap_reps must be >= 2")
        if self.ci_groups < 2:
            raise ConfigError("ci_groups must be >= 2")

    @property
    def z(self) -> float:
        return float(norm.ppf(1 - self.alpha / 2))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["forest"] = asdict(self.forest)
        return out


@dataclass
class BoundsResult:
    """Bound estimates with per-bound normal confidence intervals."""

    method: str
    lower: float
    upper: float
    se_lower: float
    se_upper: float
    ci_lower: tuple[float, float]
    ci_upper: tuple[float, float]
    q0_hat: float
    n_total: int
    n_responders: int
    share_negative_region: float = 0.0
    clip_rate: float = 0.0
    mode: str = "assume_positive"
    fold_estimates: list | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "lower": self.lower,
            "upper": self.upper,
            "se_lower": self.se_lower,
            "se_upper": self.se_upper,
            "ci_lower": list(self.ci_lower),
            "ci_upper": list(self.ci_upper),
            "q0_hat": self.q0_hat,
            "n_total": self.n_total,
            "n_responders": self.n_responders,
            "share_negative_region": self.share_negative_region,
            "clip_rate": self.clip_rate,
            "mode": self.mode,
            "warnings": list(self.warnings),
        }


@dataclass
class PointEstimate:
    method: str
    estimate: float
    se: float
    ci: tuple[float, float]
    n_used: int
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"method": self.method, "estimate": self.estimate, "se": self.se,
                "ci": list(self.ci), "n_used": self.n_used, "warnings": list(self.warnings)}


@dataclass
class ConditionalBounds:
    """Bounds at evaluation points; rows with ``valid == False`` are absent."""

    x: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    se_lower: np.ndarray
    se_upper: np.ndarray
    q_hat: np.ndarray
    direction: np.ndarray
    valid: np.ndarray
    alpha: float = 0.05
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.x.shape[0]

    def rows(self) -> list[dict]:
        z = float(norm.ppf(1 - self.alpha / 2))
        out = []
        for j in range(len(self)):
            ok = bool(self.valid[j])
            lo, hi = self.lower[j], self.upper[j]
            out.append({
                "x": [float(v) for v in self.x[j]],
                "lower": float(lo) if ok else None,
                "upper": float(hi) if ok else None,
                "se_lower": float(self.se_lower[j]) if ok else None,
                "se_upper": float(self.se_upper[j]) if ok else None,
                "ci_lower": [float(lo - z * self.se_lower[j]), float(lo + z * self.se_lower[j])]
                if ok else None,
                "ci_upper": [float(hi - z * self.se_upper[j]), float(hi + z * self.se_upper[j])]
                if ok else None,
                "q_hat": float(self.q_hat[j]),
                "direction": str(self.direction[j]),
            })
        return out


@dataclass
class MonotonicityPartition:
    """Cross-fitted unclipped q(X_i) and the implied monotonicity regions."""

    q_hat: np.ndarray
    negative: np.ndarray
    share_negative: float
    recommendation: str
    uninformative: bool = False
    warnings: list[str] = field(default_factory=list)

    @property
    def labels(self) -> np.ndarray:
        return np.where(self.negative, "-", "+")

    def histogram(self, bins: int = 20):
        """Tidy histogram of log q(X_i): (left edge, right edge, count) in q units."""
        lq = np.log(self.q_hat)
        lo, hi = float(lq.min()), float(lq.max())
        if hi - lo < 1e-9:
            lo, hi = lo - 0.05, hi + 0.05
        counts, edges = np.histogram(lq, bins=bins, range=(lo, hi))
        return np.exp(edges[:-1]), np.exp(edges[1:]), counts


# --------------------------------------------------------------------------
# nuisance fitting


def _fit(X, t, cfg: ForestConfig, seed: int) -> Forest:
    with warnings.catch_warnings():
        # all-responder cells give constant targets; single-leaf trees are fine there
        warnings.simplefilter("ignore", DegenerateTarget)
        return Forest(X, t, cfg.with_seed(seed))


def _guard(n: int, what: str):
    if n < 2:
        raise NonConvergentNuisance(f"too few {what} in a training split to fit a forest")


def _design_propensity(data: Dataset, config: EstimatorConfig) -> np.ndarray | None:
    mode = config.propensity_mode
    if mode == "estimate":
        return None
    if mode == "known_constant" or (mode == "selected_only" and config.propensity is not None):
        return np.full(data.n, float(config.propensity))
    if not data.has_propensity:
        raise PropensityMissing(
            "no propensity available: pass a constant, a propensity column, "
            "or estimate it")
    return np.asarray(data.p, dtype=float)


class _ResponseModel:
    """Predicts q0(x), q1(x) and the unclipped trimming share from one training split."""

    def __init__(self, data: Dataset, idx, config: EstimatorConfig, fold: int,
                 cfg: ForestConfig | None = None):
        cfg = cfg or config.forest
        X, s, d = data.X[idx], data.s[idx].astype(float), data.d[idx]
        self.selected_only = config.propensity_mode == "selected_only"
        if self.selected_only:
            resp = s == 1
            _guard(int(resp.sum()), "responders")
            self.fr = _fit(X[resp], 1.0 - d[resp], cfg, derive_seed(config.seed, fold, _ROLE_R))
        else:
            c, t = d == 0, d == 1
            _guard(int(c.sum()), "control units")
            _guard(int(t.sum()), "treated units")
            self.f0 = _fit(X[c], s[c], cfg, derive_seed(config.seed, fold, _ROLE_Q0))
            self.f1 = _fit(X[t], s[t], cfg, derive_seed(config.seed, fold, _ROLE_Q1))

    def predict(self, Xq, p=None, with_var: bool = False) -> dict:
        if self.selected_only:
            if with_var:
                r, v_r = self.fr.grouped_estimates(Xq)
            else:
                r = self.fr.predict_mean(Xq)
            floored = (r < mo.PROB_FLOOR) | (r > 1 - mo.PROB_FLOOR)
            r = np.clip(r, mo.PROB_FLOOR, 1 - mo.PROB_FLOOR)
            q_raw = mo.q_from_selected_only(p, r, form="ratio")
            out = dict(q0=np.full(len(r), np.nan), q1=np.full(len(r), np.nan),
                       q_raw=np.atleast_1d(q_raw), floored=floored)
            if with_var:
                dq = p / ((1 - p) * (1 - r) ** 2)
                out["v_q"] = dq ** 2 * v_r
            return out
        if with_var:
            q0, v0 = self.f0.grouped_estimates(Xq)
            q1, v1 = self.f1.grouped_estimates(Xq)
        else:
            q0, q1 = self.f0.predict_mean(Xq), self.f1.predict_mean(Xq)
        q_raw, floored = mo.trimming_share(q0, q1)
        out = dict(q0=np.maximum(q0, mo.PROB_FLOOR), q1=np.maximum(q1, mo.PROB_FLOOR),
                   q_raw=q_raw, floored=floored)
        if with_var:
            out["v_q"] = q_raw ** 2 * (v0 / out["q0"] ** 2 + v1 / out["q1"] ** 2)
        return out


@dataclass
class FoldNuisance:
    """Frozen nuisance predictions for the held-out units of one fold."""

    fold: int
    test: np.ndarray
    q0: np.ndarray
    q1: np.ndarray
    q_raw: np.ndarray
    floored: np.ndarray
    p: np.ndarray
    y_lo: np.ndarray
    y_hi: np.ndarray
    yr_lo: np.ndarray | None = None
    yr_hi: np.ndarray | None = None
    m: dict | None = None

    @property
    def q(self) -> np.ndarray:
        return np.minimum(self.q_raw, 1.0)

    @property
    def q_rev(self) -> np.ndarray:
        return np.minimum(1.0 / self.q_raw, 1.0)


def _lower_tail(W, y, c):
    """Row-wise sum_j W_ij (y_j - c_i) 1{y_j <= c_i}."""
    r = y[None, :] - c[:, None]
    return (W * np.where(r <= 0, r, 0.0)).sum(axis=1)


def _upper_tail(W, y, c):
    r = y[None, :] - c[:, None]
    return (W * np.where(r >= 0, r, 0.0)).sum(axis=1)


def cross_fit_nuisances(data: Dataset, config: EstimatorConfig, folds: FoldPlan | None = None,
                        reverse: bool = False) -> tuple[FoldPlan, list[FoldNuisance]]:
    """Fit nuisances on the complement of every fold and predict on the fold.

    With an estimated propensity, the fold after ``k`` (cyclically) is
    carved out of the training units and used only for the propensity
    forest.  ``reverse=True`` also returns control-arm quantiles for the
    reversed-monotonicity scores.
    """
    if folds is None:
        folds = make_folds(data, config.k_folds, derive_seed(config.seed, _SEED_FOLDS))
    if folds.assignment.shape[0] != data.n:
        raise DimensionMismatch("fold plan does not match the dataset")
    p_design = _design_propensity(data, config)
    estimate_p = p_design is None
    y = np.nan_to_num(np.asarray(data.y, dtype=float))
    out = []
    for fold, train, test in folds.splits():
        Xt = data.X[test]
        if estimate_p:
            carve = fold % folds.k + 1
            p_idx = folds.test_indices(carve)
            train = train[folds.assignment[train] != carve]
            _guard(len(p_idx), "units in the propensity split")
            fp = _fit(data.X[p_idx], data.d[p_idx].astype(float), config.forest,
                      derive_seed(config.seed, fold, _ROLE_P))
            p = np.clip(fp.predict_mean(Xt), PROPENSITY_EPS, 1 - PROPENSITY_EPS)
        else:
            p = p_design[test]

        resp = _ResponseModel(data, train, config, fold).predict(Xt, p)
        q = np.minimum(resp["q_raw"], 1.0)

        s_tr, d_tr = data.s[train], data.d[train]
        t_idx = train[(s_tr == 1) & (d_tr == 1)]
        c_idx = train[(s_tr == 1) & (d_tr == 0)]
        _guard(len(t_idx), "treated responders")
        ft = _fit(data.X[t_idx], y[t_idx], config.forest, derive_seed(config.seed, fold, _ROLE_YT))
        W1 = ft.kernel_weights(Xt)
        W1 = np.atleast_2d(W1)
        y1 = y[t_idx]
        y_lo = weighted_quantiles(W1, y1, q)
        y_hi = weighted_quantiles(W1, y1, 1 - q)

        nu = FoldNuisance(fold, test, resp["q0"], resp["q1"], resp["q_raw"], resp["floored"],
                          p, y_lo, y_hi)
        if reverse or estimate_p:
            _guard(len(c_idx), "control responders")
            fc = _fit(data.X[c_idx], y[c_idx], config.forest,
                      derive_seed(config.seed, fold, _ROLE_YC))
            W0 = np.atleast_2d(fc.kernel_weights(Xt))
            y0 = y[c_idx]
            qr = nu.q_rev
            nu.yr_lo = weighted_quantiles(W0, y0, qr)
            nu.yr_hi = weighted_quantiles(W0, y0, 1 - qr)
            if estimate_p:
                q0, q1 = nu.q0, nu.q1
                theta0 = W0 @ y0
                theta1 = W1 @ y1
                nu.m = {
                    "lower": (q1 * _lower_tail(W1, y1, y_lo), q0 * (theta0 - y_lo)),
                    "upper": (q1 * _upper_tail(W1, y1, y_hi), q0 * (theta0 - y_hi)),
                    "lower_rev": (q1 * (theta1 - nu.yr_hi), q0 * _upper_tail(W0, y0, nu.yr_hi)),
                    "upper_rev": (q1 * (theta1 - nu.yr_lo), q0 * _lower_tail(W0, y0, nu.yr_lo)),
                }
        out.append(nu)
    return folds, out


def _fold_scores(data: Dataset, nu: FoldNuisance, negative: np.ndarray):
    """Lower score, upper score and always-responder weight for a fold's units."""
    i = nu.test
    y, s, d, p = data.y[i], data.s[i], data.d[i], nu.p
    sL = mo.score_lower(y, s, d, nu.y_lo, p)
    sU = mo.score_upper(y, s, d, nu.y_hi, p)
    w = mo.q0_weight(s, d, p)
    if nu.m is not None:
        sL = sL + mo.aipw_correction(d, p, *nu.m["lower"])
        sU = sU + mo.aipw_correction(d, p, *nu.m["upper"])
        w = w + (d - p) * nu.q0 / (1 - p)
    if negative.any():
        sLr = mo.score_lower_reverse(y, s, d, nu.yr_hi, p)
        sUr = mo.score_upper_reverse(y, s, d, nu.yr_lo, p)
        wr = mo.q1_weight(s, d, p)
        if nu.m is not None:
            sLr = sLr + mo.aipw_correction(d, p, *nu.m["lower_rev"])
            sUr = sUr + mo.aipw_correction(d, p, *nu.m["upper_rev"])
            wr = wr - (d - p) * nu.q1 / p
        sL = np.where(negative, sLr, sL)
        sU = np.where(negative, sUr, sU)
        w = np.where(negative, wr, w)
    return sL, sU, w


def _delta_se(s: np.ndarray, w: np.ndarray, tau: float) -> float:
    n = s.shape[0]
    qbar = w.mean()
    cov = np.cov(np.vstack([s, w]), ddof=1) / n
    g = np.array([1.0 / qbar, -tau / qbar])
    return float(math.sqrt(max(g @ cov @ g, 0.0)))


def _resolve_mode(config: EstimatorConfig, share_negative: float) -> str:
    mode = config.monotonicity_mode
    if mode == "auto":
        return "conditional" if share_negative >= AUTO_SHARE else "assume_positive"
    return mode


def _crossed(lower, upper, notes):
    # equal bounds computed along different paths can differ in the last bits
    if lower > upper + 1e-12 * max(1.0, abs(upper)):
        msg = f"crossed bounds: lower {lower:.6g} exceeds upper {upper:.6g}; reported as-is"
        notes.append(msg)
        warnings.warn(msg, CTBWarning, stacklevel=3)


def estimate_aggregated(data: Dataset, config: EstimatorConfig,
                        folds: FoldPlan | None = None) -> BoundsResult:
    """Covariate-tightened trimming bounds on the always-responder ATE."""
    if config.binary:
        return _estimate_binary(data, config, folds)
    mode = config.monotonicity_mode
    need_rev = mode in ("assume_negative", "conditional", "auto")
    folds, nus = cross_fit_nuisances(data, config, folds, reverse=need_rev)
    notes: list[str] = []

    q_raw = np.empty(data.n)
    floored = np.zeros(data.n, dtype=bool)
    for nu in nus:
        q_raw[nu.test] = nu.q_raw
        floored[nu.test] = nu.floored
    share_neg = float(np.mean(q_raw > 1))
    mode = _resolve_mode(config, share_neg)
    if mode == "assume_negative":
        clip = q_raw < 1
    elif mode == "conditional":
        clip = np.zeros(data.n, dtype=bool)
    else:
        clip = q_raw > 1
    clip_rate = float(np.mean(clip | floored))
    if mode == "assume_positive" and share_neg >= AUTO_SHARE:
        msg = (f"monotonicity suspect: estimated q(x) > 1 for {share_neg:.1%} of units; "
               "consider --mode conditional")
        notes.append(msg)
        warnings.warn(msg, MonotonicityWarning, stacklevel=2)

    sL_all = np.empty(data.n)
    sU_all = np.empty(data.n)
    w_all = np.empty(data.n)
    per_fold = []
    for nu in nus:
        if mode == "assume_negative":
            neg = np.ones(len(nu.test), dtype=bool)
        elif mode == "conditional":
            neg = nu.q_raw > 1
        else:
            neg = np.zeros(len(nu.test), dtype=bool)
        sL, sU, w = _fold_scores(data, nu, neg)
        sL_all[nu.test], sU_all[nu.test], w_all[nu.test] = sL, sU, w
        wbar = w.mean()
        if wbar <= 0:
            raise NonConvergentNuisance(f"fold {nu.fold} has no always-responder mass")
        per_fold.append((float(sL.mean() / wbar), float(sU.mean() / wbar)))

    lower = float(np.mean([f[0] for f in per_fold]))
    upper = float(np.mean([f[1] for f in per_fold]))
    se_l = _delta_se(sL_all, w_all, lower)
    se_u = _delta_se(sU_all, w_all, upper)
    q0_hat = float(w_all.mean())
    if q0_hat > 1:
        msg = f"estimated always-responder share {q0_hat:.4f} exceeds 1; nuisance misfit"
        notes.append(msg)
        warnings.warn(msg, CTBWarning, stacklevel=2)
    _crossed(lower, upper, notes)
    z = config.z
    return BoundsResult(
        "ctb", lower, upper, se_l, se_u,
        (lower - z * se_l, lower + z * se_l), (upper - z * se_u, upper + z * se_u),
        q0_hat, data.n, int(data.s.sum()), share_neg, clip_rate, mode, per_fold, notes)


def _estimate_binary(data: Dataset, config: EstimatorConfig, folds) -> BoundsResult:
    """Aggregated bounds for a {0,1} outcome via closed-form conditional trimming."""
    resp = data.s == 1
    if not np.all(np.isin(data.y[resp], (0.0, 1.0))):
        raise NonBinaryFlag("binary mode needs responder outcomes in {0, 1}")
    if config.monotonicity_mode != "assume_positive":
        raise ConfigError("binary outcomes are supported under positive monotonicity only")
    if folds is None:
        folds = make_folds(data, config.k_folds, derive_seed(config.seed, _SEED_FOLDS))
    p_design = _design_propensity(data, config)
    y = np.nan_to_num(np.asarray(data.y, dtype=float))
    weight = np.empty(data.n)
    lo = np.empty(data.n)
    hi = np.empty(data.n)
    q_raw = np.empty(data.n)
    fold_id = folds.assignment
    for fold, train, test in folds.splits():
        Xt = data.X[test]
        p = p_design[test] if p_design is not None else np.full(len(test), 0.5)
        r = _ResponseModel(data, train, config, fold).predict(Xt, p)
        q = np.minimum(r["q_raw"], 1.0)
        s_tr, d_tr = data.s[train], data.d[train]
        t_idx = train[(s_tr == 1) & (d_tr == 1)]
        c_idx = train[(s_tr == 1) & (d_tr == 0)]
        _guard(len(t_idx), "treated responders")
        _guard(len(c_idx), "control responders")
        fx = _fit(data.X[t_idx], (y[t_idx] == 0).astype(float), config.forest,
                  derive_seed(config.seed, fold, _ROLE_XI))
        f0 = _fit(data.X[c_idx], y[c_idx], config.forest,
                  derive_seed(config.seed, fold, _ROLE_TH0))
        xi = np.clip(fx.predict_mean(Xt), 0.0, 1.0)
        b_lo, b_hi = mo.binary_bounds(q, xi)
        theta0 = f0.predict_mean(Xt)
        lo[test] = b_lo - theta0
        hi[test] = b_hi - theta0
        if config.propensity_mode == "selected_only":
            weight[test] = q
        else:
            weight[test] = r["q0"]
        q_raw[test] = r["q_raw"]

    def point(idx):
        folds_here = fold_id[idx]
        ests = []
        for k in range(1, folds.k + 1):
            m = folds_here == k
            if m.any():
                wk = weight[idx][m]
                ests.append((np.sum(wk * lo[idx][m]) / wk.sum(),
                             np.sum(wk * hi[idx][m]) / wk.sum()))
        return np.mean(ests, axis=0)

    lower, upper = (float(v) for v in point(np.arange(data.n)))
    rng = np.random.default_rng(derive_seed(config.seed, _ROLE_BOOT))
    boot = np.array([point(rng.integers(0, data.n, data.n))
                     for _ in range(config.bootstrap_reps)])
    se_l, se_u = (float(v) for v in boot.std(axis=0, ddof=1))
    notes: list[str] = []
    _crossed(lower, upper, notes)
    z = config.z
    share_neg = float(np.mean(q_raw > 1))
    return BoundsResult(
        "ctb_binary", lower, upper, se_l, se_u,
        (lower - z * se_l, lower + z * se_l), (upper - z * se_u, upper + z * se_u),
        float(weight.mean()), data.n, int(data.s.sum()), share_neg,
        float(np.mean(q_raw > 1)), "assume_positive", None, notes)


# --------------------------------------------------------------------------
# monotonicity regions


def classify_monotonicity(data: Dataset, config: EstimatorConfig,
                          folds: FoldPlan | None = None) -> MonotonicityPartition:
    """Cross-fitted unclipped q(X_i); X- is where it exceeds 1."""
    if folds is None:
        folds = make_folds(data, config.k_folds, derive_seed(config.seed, _SEED_FOLDS))
    p_design = _design_propensity(data, config)
    q_raw = np.empty(data.n)
    for fold, train, test in folds.splits():
        p = p_design[test] if p_design is not None else None
        if config.propensity_mode == "selected_only" and p is None:
            raise PropensityMissing("selected_only mode needs a design propensity")
        q_raw[test] = _ResponseModel(data, train, config, fold).predict(data.X[test], p)["q_raw"]
    negative = q_raw > 1
    share = float(negative.mean())
    notes = []
    uninformative = bool(np.mean(np.abs(q_raw - 1) <= 0.01) >= 0.95)
    if uninformative:
        rec = "uninformative"
        msg = "estimated q(x) is 1 almost everywhere; response does not depend on treatment"
        notes.append(msg)
        warnings.warn(msg, MonotonicityWarning, stacklevel=2)
    elif share >= 1 - AUTO_SHARE:
        rec = "negative"
    elif share >= AUTO_SHARE:
        rec = "conditional"
    else:
        rec = "positive"
    return MonotonicityPartition(q_raw, negative, share, rec, uninformative, notes)


# --------------------------------------------------------------------------
# unconditional trimming bounds


def _type1_quantile(sorted_y: np.ndarray, tau: float) -> float:
    n = sorted_y.shape[0]
    k = int(math.ceil(tau * n - 1e-9)) - 1
    return float(sorted_y[min(max(k, 0), n - 1)])


def trimmed_means(y, share: float) -> tuple[float, float]:
    """Means of the bottom and top ``share`` of the empirical law of ``y``.

    The boundary atom is split fractionally, so the result does not depend
    on how ties are broken.
    """
    ys = np.sort(np.asarray(y, dtype=float))
    y_lo = _type1_quantile(ys, share)
    y_hi = _type1_quantile(ys, 1 - share)
    lo = np.mean(np.where(ys <= y_lo, ys - y_lo, 0.0)) / share + y_lo
    hi = np.mean(np.where(ys >= y_hi, ys - y_hi, 0.0)) / share + y_hi
    return float(lo), float(hi)


def _tb_region(y, s, d, direction: str):
    """(lower, upper, always-responder mass, raw q) in one region, or None if empty."""
    r1 = s[d == 1].mean() if np.any(d == 1) else np.nan
    r0 = s[d == 0].mean() if np.any(d == 0) else np.nan
    y1 = y[(s == 1) & (d == 1)]
    y0 = y[(s == 1) & (d == 0)]
    if len(y1) == 0 or len(y0) == 0:
        return None
    q = r0 / r1
    n = len(s)
    if direction == "positive":
        share = min(q, 1.0)
        t_lo, t_hi = trimmed_means(y1, share)
        m0 = float(y0.mean())
        return t_lo - m0, t_hi - m0, n * r0, float(q)
    share = min(1.0 / q, 1.0)
    c_lo, c_hi = trimmed_means(y0, share)
    m1 = float(y1.mean())
    return m1 - c_hi, m1 - c_lo, n * r1, float(q)


def _tb_point(y, s, d, regions: np.ndarray | None, mode: str):
    if regions is None:
        out = _tb_region(y, s, d, "negative" if mode == "assume_negative" else "positive")
        if out is None:
            return None
        return out[0], out[1], out[3]
    parts = []
    for neg in (False, True):
        m = regions == neg
        if m.any():
            r = _tb_region(y[m], s[m], d[m], "negative" if neg else "positive")
            if r is not None:
                parts.append(r)
    if not parts:
        return None
    mass = np.array([p[2] for p in parts])
    lo = float(np.dot(mass, [p[0] for p in parts]) / mass.sum())
    hi = float(np.dot(mass, [p[1] for p in parts]) / mass.sum())
    return lo, hi, float(np.mean([p[3] for p in parts]))


def estimate_basic_tb(data: Dataset, config: EstimatorConfig,
                      partition: MonotonicityPartition | None = None) -> BoundsResult:
    """Unconditional trimming bounds with bootstrap standard errors.

    In conditional mode the bounds are computed within the estimated
    monotonicity regions and combined with always-responder mass weights.
    """
    y = np.nan_to_num(np.asarray(data.y, dtype=float))
    s = data.s.astype(float)
    d = data.d.astype(float)
    notes: list[str] = []
    mode = config.monotonicity_mode
    regions = None
    share_neg = 0.0
    if mode in ("conditional", "auto"):
        partition = partition or classify_monotonicity(data, config)
        share_neg = partition.share_negative
        mode = _resolve_mode(config, share_neg)
        if mode == "conditional":
            regions = partition.negative.copy()
    point = _tb_point(y, s, d, regions, mode)
    if point is None:
        raise TooFewUnits("need responders in both arms")
    lower, upper, q = point
    clip_rate = 0.0
    if regions is None:
        wrong = q > 1 if mode == "assume_positive" else q < 1
        if wrong:
            clip_rate = 1.0
            msg = (f"unconditional q = {q:.4f} contradicts the assumed monotonicity "
                   "direction; trimming share clipped to 1")
            notes.append(msg)
            warnings.warn(msg, MonotonicityWarning, stacklevel=2)
        share_neg = float(q > 1)

    rng = np.random.default_rng(derive_seed(config.seed, _ROLE_BOOT))
    boot = []
    for _ in range(config.bootstrap_reps):
        idx = rng.integers(0, data.n, data.n)
        b = _tb_point(y[idx], s[idx], d[idx], None if regions is None else regions[idx], mode)
        if b is not None:
            boot.append(b[:2])
    boot = np.asarray(boot)
    if len(boot) < 2:
        raise EstimationError("bootstrap produced fewer than two usable resamples")
    se_l, se_u = (float(v) for v in boot.std(axis=0, ddof=1))
    _crossed(lower, upper, notes)
    z = config.z
    r0 = s[d == 0].mean()
    return BoundsResult(
        "tb", lower, upper, se_l, se_u,
        (lower - z * se_l, lower + z * se_l), (upper - z * se_u, upper + z * se_u),
        float(r0), data.n, int(s.sum()), share_neg, clip_rate, mode, None, notes)


# --------------------------------------------------------------------------
# conditional bounds


def _grouped(forest: Forest, Xq, values=None):
    T = forest.per_tree(Xq, values)
    return T.mean(axis=1), forest.group_variance(T)


def estimate_conditional(data: Dataset, points, config: EstimatorConfig,
                         folds: FoldPlan | None = None) -> ConditionalBounds:
    """Bounds on the always-responder effect at each evaluation point.

    For each fold, q(x) and the trimming quantiles come from forests fitted
    on the other folds; the trimmed means come from forests fitted on the
    fold's own responders.  The fold results are averaged and the direction
    at x follows the fold-averaged q(x).
    """
    if config.binary:
        raise ConfigError("conditional bounds for binary outcomes are not supported")
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P.reshape(1, -1)
    if P.shape[1] != data.n_covariates:
        raise DimensionMismatch(
            f"evaluation points have {P.shape[1]} coordinates, data has {data.n_covariates}")
    if folds is None:
        folds = make_folds(data, config.k_folds, derive_seed(config.seed, _SEED_FOLDS))
    mode = config.monotonicity_mode
    both = mode in ("conditional", "auto")
    p_design = _design_propensity(data, config)
    cfg = replace(config.forest, ci_groups=config.ci_groups)
    y = np.nan_to_num(np.asarray(data.y, dtype=float))
    m = P.shape[0]
    K = folds.k
    notes: list[str] = []

    keys = ("pos_lo", "pos_hi", "neg_lo", "neg_hi")
    est = {k: np.full((K, m), np.nan) for k in keys}
    var = {k: np.full((K, m), np.nan) for k in keys}
    qvar = {k: np.full((K, m), np.nan) for k in keys}
    q_raw = np.full((K, m), np.nan)

    for fold, train, test in folds.splits():
        kf = fold - 1
        p_here = None
        if config.propensity_mode == "selected_only":
            if p_design is None:
                raise PropensityMissing("selected_only mode needs a design propensity")
            # points carry no propensity; use the training-sample average
            p_here = float(np.mean(p_design[train]))
        rm = _ResponseModel(data, train, config, fold, cfg)
        r = rm.predict(P, p_here, with_var=True)
        q_raw[kf] = r["q_raw"]
        q = np.minimum(r["q_raw"], 1.0)
        qr = np.minimum(1.0 / r["q_raw"], 1.0)
        v_q = r["v_q"]

        s_tr, d_tr = data.s[train], data.d[train]
        t_tr = train[(s_tr == 1) & (d_tr == 1)]
        c_tr = train[(s_tr == 1) & (d_tr == 0)]
        s_te, d_te = data.s[test], data.d[test]
        t_te = test[(s_te == 1) & (d_te == 1)]
        c_te = test[(s_te == 1) & (d_te == 0)]
        try:
            _guard(len(t_tr), "treated responders")
            _guard(len(c_tr), "control responders")
            _guard(len(t_te), "treated responders")
            _guard(len(c_te), "control responders")
            y1_te, y0_te = y[t_te], y[c_te]
            f1 = _fit(data.X[t_te], y1_te, cfg, derive_seed(config.seed, fold, _ROLE_TH1))
            f0 = _fit(data.X[c_te], y0_te, cfg, derive_seed(config.seed, fold, _ROLE_TH0))
        except (NonConvergentNuisance, TooFewUnits):
            notes.append(f"fold {fold}: too few responders to estimate conditional means")
            continue

        if mode != "assume_negative":
            ft = _fit(data.X[t_tr], y[t_tr], config.forest,
                      derive_seed(config.seed, fold, _ROLE_YT))
            W = np.atleast_2d(ft.kernel_weights(P))
            y_lo = weighted_quantiles(W, y[t_tr], q)
            y_hi = weighted_quantiles(W, y[t_tr], 1 - q)
            aL, vL = _grouped(f1, P, np.where(y1_te[None, :] <= y_lo[:, None],
                                              y1_te[None, :] - y_lo[:, None], 0.0))
            aU, vU = _grouped(f1, P, np.where(y1_te[None, :] >= y_hi[:, None],
                                              y1_te[None, :] - y_hi[:, None], 0.0))
            th0, v0 = _grouped(f0, P)
            est["pos_lo"][kf] = aL / q + y_lo - th0
            est["pos_hi"][kf] = aU / q + y_hi - th0
            var["pos_lo"][kf] = vL / q ** 2 + v0
            var["pos_hi"][kf] = vU / q ** 2 + v0
            qvar["pos_lo"][kf] = (aL / q ** 2) ** 2 * v_q
            qvar["pos_hi"][kf] = (aU / q ** 2) ** 2 * v_q
        if mode == "assume_negative" or both:
            fc = _fit(data.X[c_tr], y[c_tr], config.forest,
                      derive_seed(config.seed, fold, _ROLE_YC))
            W = np.atleast_2d(fc.kernel_weights(P))
            yr_lo = weighted_quantiles(W, y[c_tr], qr)
            yr_hi = weighted_quantiles(W, y[c_tr], 1 - qr)
            bL, wL = _grouped(f0, P, np.where(y0_te[None, :] <= yr_lo[:, None],
                                              y0_te[None, :] - yr_lo[:, None], 0.0))
            bU, wU = _grouped(f0, P, np.where(y0_te[None, :] >= yr_hi[:, None],
                                              y0_te[None, :] - yr_hi[:, None], 0.0))
            th1, v1 = _grouped(f1, P)
            # the reversed share is 1/q, so d(1/q) has variance v_q / q^4
            v_qr = v_q / np.maximum(r["q_raw"], 1e-12) ** 4
            est["neg_lo"][kf] = th1 - (bU / qr + yr_hi)
            est["neg_hi"][kf] = th1 - (bL / qr + yr_lo)
            var["neg_lo"][kf] = wU / qr ** 2 + v1
            var["neg_hi"][kf] = wL / qr ** 2 + v1
            qvar["neg_lo"][kf] = (bU / qr ** 2) ** 2 * v_qr
            qvar["neg_hi"][kf] = (bL / qr ** 2) ** 2 * v_qr

    q_bar = np.nanmean(q_raw, axis=0)
    if mode == "assume_negative":
        negative = np.ones(m, dtype=bool)
    elif both:
        negative = q_bar > 1
    else:
        negative = np.zeros(m, dtype=bool)

    def combine(key):
        e, v, qv = est[key], var[key], qvar[key]
        ok = ~np.isnan(e)
        n_ok = ok.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(n_ok > 0, np.nansum(e, axis=0) / n_ok, np.nan)
            # fold estimates use disjoint responders for the trimmed means but
            # share most of the data behind q(x); the q part is not averaged down
            v_tot = np.nansum(v, axis=0) / n_ok ** 2 + (np.nansum(np.sqrt(qv), axis=0) / n_ok) ** 2
        return mean, np.sqrt(v_tot)

    pos_lo, se_pos_lo = combine("pos_lo") if mode != "assume_negative" else (None, None)
    pos_hi, se_pos_hi = combine("pos_hi") if mode != "assume_negative" else (None, None)
    if mode == "assume_negative" or both:
        neg_lo, se_neg_lo = combine("neg_lo")
        neg_hi, se_neg_hi = combine("neg_hi")
    if mode == "assume_negative":
        lower, upper, se_l, se_u = neg_lo, neg_hi, se_neg_lo, se_neg_hi
    elif both:
        lower = np.where(negative, neg_lo, pos_lo)
        upper = np.where(negative, neg_hi, pos_hi)
        se_l = np.where(negative, se_neg_lo, se_pos_lo)
        se_u = np.where(negative, se_neg_hi, se_pos_hi)
    else:
        lower, upper, se_l, se_u = pos_lo, pos_hi, se_pos_lo, se_pos_hi
    valid = ~(np.isnan(lower) | np.isnan(upper))
    if (~valid).any():
        notes.append(f"{int((~valid).sum())} evaluation points have no estimable bounds")
    if mode == "assume_positive" and np.any(q_bar > 1):
        msg = (f"estimated q(x) > 1 at {int(np.sum(q_bar > 1))} of {m} points; "
               "trimming share clipped to 1 there")
        notes.append(msg)
        warnings.warn(msg, MonotonicityWarning, stacklevel=2)
    direction = np.where(negative, "negative", "positive")
    return ConditionalBounds(P, lower, upper, se_l, se_u, q_bar, direction, valid,
                             config.alpha, notes)


# --------------------------------------------------------------------------
# regression baselines


def _robust_wls(X, y, w=None) -> tuple[np.ndarray, np.ndarray]:
    """Least squares (optionally weighted) with HC1 sandwich covariance."""
    n, k = X.shape
    if n <= k or np.linalg.matrix_rank(X) < k:
        raise SingularDesign("design matrix is rank deficient")
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    Xw = X * w[:, None]
    bread = np.linalg.inv(X.T @ Xw)
    beta = bread @ (Xw.T @ y)
    e = y - X @ beta
    meat = (Xw * (e ** 2)[:, None]).T @ Xw
    cov = bread @ meat @ bread * n / (n - k)
    return beta, cov


def _point(method, beta, cov, n, z, notes=None) -> PointEstimate:
    est = float(beta[1])
    se = float(math.sqrt(max(cov[1, 1], 0.0)))
    return PointEstimate(method, est, se, (est - z * se, est + z * se), n, notes or [])


def ols_ate(data: Dataset, config: EstimatorConfig | None = None) -> PointEstimate:
    """Coefficient on D from least squares of Y on (1, D, X) over responders."""
    config = config or EstimatorConfig(propensity_mode="estimate")
    r = data.s == 1
    if r.sum() < data.n_covariates + 2:
        raise TooFewUnits("too few responders for the regression")
    Z = np.column_stack([np.ones(r.sum()), data.d[r], data.X[r]])
    beta, cov = _robust_wls(Z, data.y[r])
    return _point("ols", beta, cov, int(r.sum()), config.z)


def ipw_ate(data: Dataset, config: EstimatorConfig | None = None,
            folds: FoldPlan | None = None) -> PointEstimate:
    """Responder regression reweighted by 1 / Pr[S=1 | D, X] from a cross-fitted forest."""
    config = config or EstimatorConfig(propensity_mode="estimate")
    if folds is None:
        folds = make_folds(data, config.k_folds, derive_seed(config.seed, _SEED_FOLDS))
    r = data.s == 1
    if r.sum() < data.n_covariates + 2:
        raise TooFewUnits("too few responders for the regression")
    F = np.column_stack([data.d, data.X]).astype(float)
    pr = np.empty(data.n)
    for fold, train, test in folds.splits():
        f = _fit(F[train], data.s[train].astype(float), config.forest,
                 derive_seed(config.seed, fold, _ROLE_IPW))
        pr[test] = f.predict_mean(F[test])
    notes = []
    low = pr[r] < mo.PROB_FLOOR
    if low.any():
        notes.append(f"{int(low.sum())} response probabilities clipped at {mo.PROB_FLOOR}")
    w = 1.0 / np.maximum(pr[r], mo.PROB_FLOOR)
    Z = np.column_stack([np.ones(r.sum()), data.d[r], data.X[r]])
    beta, cov = _robust_wls(Z, data.y[r], w)
    return _point("ipw", beta, cov, int(r.sum()), config.z, notes)
