"""Compiled kernels for honest regression trees.

All randomness comes from a splitmix64 stream seeded per tree (and per
little-bag group), so a fitted forest is a pure function of its seeds and
is identical under any thread count.
"""

import numba
import numpy as np
from numba import njit, prange

# the bundled TBB is too old for numba; prefer OpenMP, fall back to workqueue
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TO_UNIT = 1.0 / 9007199254740992.0  # 2**-53


@njit(cache=True)
def _next_u64(state):
    state[0] += _GOLDEN
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _randbelow(state, k):
    u = np.float64(_next_u64(state) >> np.uint64(11)) * _TO_UNIT
    r = int(u * k)
    if r >= k:
        r = k - 1
    return r


@njit(cache=True)
def _partial_shuffle(arr, k, state):
    # first k entries become a uniform sample without replacement
    n = arr.shape[0]
    for i in range(k):
        j = i + _randbelow(state, n - i)
        tmp = arr[i]
        arr[i] = arr[j]
        arr[j] = tmp


@njit(cache=True)
def _stable_partition(idx, lo, hi, X, f, thr, buf):
    """Stable in-place partition of idx[lo:hi] by X[:, f] <= thr; returns split point."""
    nl = 0
    for k in range(lo, hi):
        if X[idx[k], f] <= thr:
            nl += 1
    il = lo
    ir = lo + nl
    for k in range(lo, hi):
        v = idx[k]
        if X[v, f] <= thr:
            buf[il] = v
            il += 1
        else:
            buf[ir] = v
            ir += 1
    for k in range(lo, hi):
        idx[k] = buf[k]
    return lo + nl


@njit(cache=True)
def _build_tree(X, t, seed, group_seed, half_size, s_size, split_size, honest,
                min_leaf, mtry, feat, thr, left, right, est_lo, est_hi, est_idx):
    n, p = X.shape
    pool = np.arange(n).astype(np.int64)
    pool_size = n
    if half_size > 0:
        gstate = np.empty(1, dtype=np.uint64)
        gstate[0] = group_seed
        _partial_shuffle(pool, half_size, gstate)
        pool = pool[:half_size].copy()
        pool_size = half_size

    state = np.empty(1, dtype=np.uint64)
    state[0] = seed
    _partial_shuffle(pool, s_size, state)

    if honest:
        split_idx = pool[:split_size].copy()
        n_est = s_size - split_size
        for k in range(n_est):
            est_idx[k] = pool[split_size + k]
    else:
        split_idx = pool[:s_size].copy()
        n_est = s_size
        for k in range(n_est):
            est_idx[k] = pool[k]
    n_split = split_idx.shape[0]

    max_nodes = feat.shape[0]
    stack_node = np.empty(max_nodes, dtype=np.int64)
    stack_a = np.empty(max_nodes, dtype=np.int64)
    stack_b = np.empty(max_nodes, dtype=np.int64)
    stack_c = np.empty(max_nodes, dtype=np.int64)
    stack_e = np.empty(max_nodes, dtype=np.int64)
    sbuf = np.empty(n_split, dtype=np.int64)
    ebuf = np.empty(max(n_est, 1), dtype=np.int64)
    est_view = est_idx[:n_est]
    features = np.arange(p)

    top = 0
    stack_node[0] = 0
    stack_a[0] = 0
    stack_b[0] = n_split
    stack_c[0] = 0
    stack_e[0] = n_est
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack_node[top]
        a = stack_a[top]
        b = stack_b[top]
        c = stack_c[top]
        e = stack_e[top]
        feat[node] = -1
        thr[node] = 0.0
        left[node] = -1
        right[node] = -1
        est_lo[node] = c
        est_hi[node] = e

        m = b - a
        if m < 2 * min_leaf or m < 2:
            continue
        tmin = t[split_idx[a]]
        tmax = tmin
        total = 0.0
        total_sq = 0.0
        for k in range(a, b):
            v = t[split_idx[k]]
            total += v
            total_sq += v * v
            if v < tmin:
                tmin = v
            if v > tmax:
                tmax = v
        if tmin == tmax:
            continue
        sse = total_sq - total * total / m
        tol = 1e-10 * max(sse, 1e-300)

        _partial_shuffle(features, mtry, state)
        chosen = np.sort(features[:mtry].copy())

        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        xv = np.empty(m)
        tv = np.empty(m)
        for fi in range(mtry):
            f = chosen[fi]
            for k in range(m):
                xv[k] = X[split_idx[a + k], f]
            order = np.argsort(xv, kind="mergesort")
            xs = xv[order]
            for k in range(m):
                tv[k] = t[split_idx[a + order[k]]]
            lsum = 0.0
            for j in range(m - 1):
                lsum += tv[j]
                nl = j + 1
                nr = m - nl
                if nr < min_leaf:
                    break
                if nl < min_leaf:
                    continue
                if xs[j] == xs[j + 1]:
                    continue
                rsum = total - lsum
                gain = lsum * lsum / nl + rsum * rsum / nr - total * total / m
                if gain > tol and gain > best_gain + tol:
                    best_gain = gain
                    best_f = f
                    mid = 0.5 * (xs[j] + xs[j + 1])
                    if mid >= xs[j + 1]:
                        mid = xs[j]
                    best_thr = mid
        if best_f < 0:
            continue

        sa = _stable_partition(split_idx, a, b, X, best_f, best_thr, sbuf)
        ce = _stable_partition(est_view, c, e, X, best_f, best_thr, ebuf)
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feat[node] = best_f
        thr[node] = best_thr
        left[node] = lc
        right[node] = rc

        stack_node[top] = rc
        stack_a[top] = sa
        stack_b[top] = b
        stack_c[top] = ce
        stack_e[top] = e
        top += 1
        stack_node[top] = lc
        stack_a[top] = a
        stack_b[top] = sa
        stack_c[top] = c
        stack_e[top] = ce
        top += 1
    return n_nodes


@njit(cache=True, parallel=True)
def build_forest(X, t, tree_seeds, group_seeds, group_size, half_size, s_size,
                 split_size, honest, min_leaf, mtry, max_nodes):
    n_trees = tree_seeds.shape[0]
    n_est = s_size - split_size if honest else s_size
    feat = np.empty((n_trees, max_nodes), dtype=np.int32)
    thr = np.empty((n_trees, max_nodes), dtype=np.float64)
    left = np.empty((n_trees, max_nodes), dtype=np.int32)
    right = np.empty((n_trees, max_nodes), dtype=np.int32)
    est_lo = np.empty((n_trees, max_nodes), dtype=np.int32)
    est_hi = np.empty((n_trees, max_nodes), dtype=np.int32)
    est_idx = np.empty((n_trees, n_est), dtype=np.int64)
    n_nodes = np.empty(n_trees, dtype=np.int64)
    for b in prange(n_trees):
        gseed = np.uint64(0)
        hsize = 0
        if group_size > 0:
            gseed = group_seeds[b // group_size]
            hsize = half_size
        n_nodes[b] = _build_tree(
            X, t, tree_seeds[b], gseed, hsize, s_size, split_size, honest,
            min_leaf, mtry, feat[b], thr[b], left[b], right[b],
            est_lo[b], est_hi[b], est_idx[b],
        )
    return feat, thr, left, right, est_lo, est_hi, est_idx, n_nodes


@njit(cache=True)
def _find_leaf(feat, thr, left, right, est_lo, est_hi, x):
    node = 0
    while feat[node] >= 0:
        if x[feat[node]] <= thr[node]:
            child = left[node]
        else:
            child = right[node]
        # empty honest leaves are merged into their parent
        if est_hi[child] - est_lo[child] == 0:
            break
        node = child
    return node


@njit(cache=True, parallel=True)
def find_leaves(feat, thr, left, right, est_lo, est_hi, Xq):
    m = Xq.shape[0]
    n_trees = feat.shape[0]
    out = np.empty((m, n_trees), dtype=np.int64)
    for j in prange(m):
        for b in range(n_trees):
            out[j, b] = _find_leaf(feat[b], thr[b], left[b], right[b],
                                   est_lo[b], est_hi[b], Xq[j])
    return out


@njit(cache=True, parallel=True)
def dense_weights(leaves, est_lo, est_hi, est_idx, n_train):
    m, n_trees = leaves.shape
    W = np.zeros((m, n_train))
    for j in prange(m):
        for b in range(n_trees):
            node = leaves[j, b]
            lo = est_lo[b, node]
            hi = est_hi[b, node]
            w = 1.0 / (n_trees * (hi - lo))
            for k in range(lo, hi):
                W[j, est_idx[b, k]] += w
    return W


@njit(cache=True, parallel=True)
def per_tree_means(leaves, est_lo, est_hi, est_idx, A):
    """Leaf mean of A for every (query, tree); A is (m, n) or (1, n)."""
    m, n_trees = leaves.shape
    stride = 0 if A.shape[0] == 1 else 1
    out = np.empty((m, n_trees))
    for j in prange(m):
        row = j * stride
        for b in range(n_trees):
            node = leaves[j, b]
            lo = est_lo[b, node]
            hi = est_hi[b, node]
            acc = 0.0
            for k in range(lo, hi):
                acc += A[row, est_idx[b, k]]
            out[j, b] = acc / (hi - lo)
    return out


@njit(cache=True, parallel=True)
def weighted_quantiles(W, y, taus):
    """Left-continuous weighted quantile of y for each row of W."""
    m = W.shape[0]
    order = np.argsort(y, kind="mergesort")
    out = np.empty(m)
    for j in prange(m):
        tau = taus[j]
        total = 0.0
        for k in range(order.shape[0]):
            total += W[j, order[k]]
        target = tau * total - 1e-12
        cum = 0.0
        val = np.nan
        for k in range(order.shape[0]):
            w = W[j, order[k]]
            if w <= 0.0:
                continue
            cum += w
            if cum >= target:
                val = y[order[k]]
                break
        out[j] = val
    return out
