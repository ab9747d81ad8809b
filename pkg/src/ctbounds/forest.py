"""Honest random forests exposed through their adaptive kernel weights.

A fitted :class:`Forest` maps a query point ``x`` to a weight vector
``alpha(x)`` over the training units: each tree contributes a uniform
distribution over the estimation-half units sharing ``x``'s leaf, and the
forest averages those distributions.  Means, probabilities and quantiles are
all read off these weights.

Trees are grown by greedy variance-reduction (CART) splits on the split half
of each subsample; the other half only populates the leaves.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .errors import DegenerateTarget, DimensionMismatch, EmptySupport, TooFewUnits

TAU_EPS = 0.001


@dataclass(frozen=True)
class ForestConfig:
    """Forest hyperparameters.

    ``mtry=None`` means ``ceil(sqrt(P))``.  ``ci_groups > 1`` grows trees in
    that many little bags (each bag draws its subsamples from a common half
    sample) so that between-bag spread estimates sampling variance.
    ``honesty=False`` lets split and estimation halves coincide.
    """

    num_trees: int = 500
    min_leaf: int = 5
    mtry: int | None = None
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    honesty: bool = True
    seed: int = 0
    ci_groups: int = 0

    def __post_init__(self):
        if self.num_trees < 1:
            raise ValueError("num_trees must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if not 0 < self.subsample_fraction <= 1:
            raise ValueError("subsample_fraction must lie in (0, 1]")
        if self.honesty and not 0 < self.honesty_fraction < 1:
            raise ValueError("honesty_fraction must lie in (0, 1)")
        if self.ci_groups < 0 or self.ci_groups == 1:
            raise ValueError("ci_groups must be 0 or >= 2")

    def with_seed(self, seed: int) -> ForestConfig:
        return replace(self, seed=int(seed))


def derive_seed(master: int, *keys: int) -> int:
    """Deterministic child seed of ``master`` along the path ``keys``."""
    ss = np.random.SeedSequence(int(master) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0])


class Forest:
    """A fitted honest forest. Build with :func:`fit_forest`."""

    def __init__(self, X, target, config: ForestConfig):
        X = np.ascontiguousarray(X, dtype=np.float64)
        target = np.ascontiguousarray(target, dtype=np.float64).ravel()
        if X.ndim != 2 or X.shape[0] != target.shape[0]:
            raise DimensionMismatch("X must be N x P and match the target length")
        if not np.all(np.isfinite(target)):
            raise ValueError("target must be finite")
        n, p = X.shape
        cfg = config
        s_size = min(n, int(math.floor(cfg.subsample_fraction * n + 1e-9)))
        if cfg.honesty:
            split_size = int(math.floor(s_size * cfg.honesty_fraction + 1e-9))
            if split_size < 1 or s_size - split_size < 1:
                raise TooFewUnits(f"{n} units leave an empty honesty half")
        else:
            split_size = s_size
            if s_size < 1:
                raise TooFewUnits("subsample is empty")
        if n > 0 and np.ptp(target) == 0:
            warnings.warn("target has zero variance; trees are single leaves",
                          DegenerateTarget, stacklevel=3)

        mtry = cfg.mtry if cfg.mtry is not None else max(1, math.ceil(math.sqrt(p)))
        mtry = min(max(mtry, 1), max(p, 1))
        n_trees = cfg.num_trees
        tree_seeds = np.random.SeedSequence(
            int(cfg.seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(1,)
        ).generate_state(n_trees, np.uint64)
        if cfg.ci_groups:
            n_groups = min(cfg.ci_groups, n_trees)
            group_size = math.ceil(n_trees / n_groups)
            n_groups = math.ceil(n_trees / group_size)
            half_size = max(n // 2, s_size)
        else:
            n_groups, group_size, half_size = 0, 0, 0
        group_seeds = np.random.SeedSequence(
            int(cfg.seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(2,)
        ).generate_state(max(n_groups, 1), np.uint64)

        split_count = split_size if cfg.honesty else s_size
        max_nodes = 2 * max(1, split_count // cfg.min_leaf) + 1
        if p == 0:
            X = np.zeros((n, 1))
            mtry = 1
        (self._feat, self._thr, self._left, self._right, self._est_lo, self._est_hi,
         self._est_idx, self._n_nodes) = _kernels.build_forest(
            X, target, tree_seeds, group_seeds, group_size, half_size, s_size,
            split_size, cfg.honesty, cfg.min_leaf, mtry, max_nodes)
        self.X = X
        self.target = target
        self.config = cfg
        self.n_covariates = p
        self.n_groups = n_groups
        self.group_size = group_size
        self.half_size = half_size

    @property
    def n_train(self) -> int:
        return self.X.shape[0]

    @property
    def num_trees(self) -> int:
        return self._feat.shape[0]

    def tree_structure(self, b: int) -> list[tuple[int, float, int, int]]:
        """(feature, threshold, left, right) for every node of tree ``b``."""
        k = int(self._n_nodes[b])
        return [(int(f), float(t), int(lc), int(rc)) for f, t, lc, rc in zip(
            self._feat[b, :k], self._thr[b, :k], self._left[b, :k], self._right[b, :k])]

    def leaf_members(self, b: int, node: int) -> np.ndarray:
        lo, hi = self._est_lo[b, node], self._est_hi[b, node]
        return np.sort(self._est_idx[b, lo:hi])

    def _query(self, x) -> np.ndarray:
        Xq = np.asarray(x, dtype=np.float64)
        if Xq.ndim == 1:
            Xq = Xq.reshape(1, -1)
        if Xq.shape[1] != self.n_covariates:
            raise DimensionMismatch(
                f"query has {Xq.shape[1]} coordinates, forest expects {self.n_covariates}")
        if self.n_covariates == 0:
            Xq = np.zeros((Xq.shape[0], 1))
        return np.ascontiguousarray(Xq)

    def leaves(self, x) -> np.ndarray:
        Xq = self._query(x)
        return _kernels.find_leaves(self._feat, self._thr, self._left, self._right,
                                    self._est_lo, self._est_hi, Xq)

    def kernel_weights(self, x) -> np.ndarray:
        """Weights over training units; shape (n,) for one point, (m, n) for many."""
        single = np.ndim(x) == 1
        W = _kernels.dense_weights(self.leaves(x), self._est_lo, self._est_hi,
                                   self._est_idx, self.n_train)
        return W[0] if single else W

    def per_tree(self, x, values=None) -> np.ndarray:
        """Per-tree leaf means, shape (m, B).

        ``values`` is a length-n vector shared by all queries or an (m, n)
        matrix of query-specific pseudo-outcomes.
        """
        A = self.target if values is None else np.asarray(values, dtype=np.float64)
        if A.ndim == 1:
            A = A.reshape(1, -1)
        if A.shape[1] != self.n_train:
            raise DimensionMismatch("values must have one entry per training unit")
        return _kernels.per_tree_means(self.leaves(x), self._est_lo, self._est_hi,
                                       self._est_idx, np.ascontiguousarray(A))

    def predict_mean(self, x, values=None):
        single = np.ndim(x) == 1
        out = self.per_tree(x, values).mean(axis=1)
        return float(out[0]) if single else out

    def predict_quantile(self, x, tau, y=None):
        """Weighted left-continuous tau-quantile of ``y`` (default: the target)."""
        single = np.ndim(x) == 1
        yv = self.target if y is None else np.asarray(y, dtype=np.float64).ravel()
        if yv.shape[0] != self.n_train:
            raise DimensionMismatch("y must have one entry per training unit")
        out = weighted_quantiles(self.kernel_weights(x), yv, tau)
        return float(out[0]) if single else out

    def grouped_estimates(self, x, values=None) -> tuple[np.ndarray, np.ndarray]:
        """Point estimate and little-bag variance for each query point."""
        T = self.per_tree(x, values)
        est = T.mean(axis=1)
        return est, self.group_variance(T)

    def group_variance(self, T: np.ndarray) -> np.ndarray:
        """Variance of the forest average from per-tree estimates ``T`` (m, B)."""
        m = T.shape[0]
        if self.n_groups < 2:
            return np.full(m, np.nan)
        n = self.n_train
        if self.half_size >= n:
            return np.zeros(m)
        gid = np.arange(T.shape[1]) // self.group_size
        means = np.stack([T[:, gid == g].mean(axis=1) for g in range(self.n_groups)], axis=1)
        between = means.var(axis=1, ddof=1)
        if self.group_size > 1:
            within = np.stack([T[:, gid == g].var(axis=1, ddof=1) if (gid == g).sum() > 1
                               else np.zeros(m) for g in range(self.n_groups)], axis=1)
            between = between - within.mean(axis=1) / self.group_size
        scale = self.half_size / (n - self.half_size)
        return np.maximum(between, 0.0) * scale


def fit_forest(X, target, config: ForestConfig | None = None) -> Forest:
    return Forest(X, target, config or ForestConfig())


def kernel_weights(forest: Forest, x) -> np.ndarray:
    return forest.kernel_weights(x)


def predict_mean(forest: Forest, x, target=None):
    return forest.predict_mean(x, target)


def predict_quantile(forest: Forest, y, x, tau):
    return forest.predict_quantile(x, tau, y)


def weighted_quantiles(W, y, taus) -> np.ndarray:
    """Row-wise left-continuous quantiles of ``y`` under weight rows ``W``.

    ``taus`` is broadcast to one level per row and clamped to
    ``[TAU_EPS, 1 - TAU_EPS]``.
    """
    W = np.ascontiguousarray(np.atleast_2d(W), dtype=np.float64)
    taus = np.clip(np.broadcast_to(np.asarray(taus, dtype=float), (W.shape[0],)),
                   TAU_EPS, 1 - TAU_EPS)
    out = _kernels.weighted_quantiles(W, np.ascontiguousarray(y, dtype=np.float64),
                                      np.ascontiguousarray(taus))
    if np.isnan(out).any():
        raise EmptySupport("all kernel weights are zero")
    return out


def weighted_quantile(weights, y, tau) -> float:
    """Left-continuous weighted quantile for an explicit weight vector."""
    out = weighted_quantiles(weights, y, float(tau))
    return float(out[0]) if np.ndim(weights) == 1 else out
