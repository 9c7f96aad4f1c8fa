"""Depth-balanced CF-tree over BIRCH or BETULA cluster features.

Nodes and entries live in flat numpy pools so that insertion runs in compiled
code. An entry is one cluster feature ``(w, a, s)``:

* BETULA form: ``w`` weight, ``a`` mean, ``s`` per-dimension squared deviations.
* BIRCH form: ``w`` count, ``a`` linear sum, ``s[0]`` scalar sum of squares.

Inner entries additionally point at a child node and hold the aggregate of
that subtree. The Python :class:`CFTree` owns the pools, grows them on demand
and drives rebuilds with an increasing threshold.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

from .features import BetulaFeature, BirchFeature, DimensionMismatchError, merge_betula_inplace
from .metrics import (AbsorptionKind, DistanceKind, MetricForm, betula_absorption,
                      betula_distance, birch_absorption, birch_distance)

__all__ = ["CFTree", "TreeConfig", "TreeStats", "split_groups"]

# layout of the integer state vector
_NENT, _NNODE, _ROOT, _LEAVES, _HEIGHT, _FLAGS = range(6)
# layout of the integer config vector
_FORM, _DIST, _ABSORB, _BRANCH, _LEAFCAP, _MAXLEAVES, _SINGLE = range(7)

_DONE, _GROW, _REBUILD = 0, 1, 2
_MAX_DEPTH = 128


@dataclass
class TreeConfig:
    """Shape and metric configuration of a CF-tree."""

    branching_factor: int = 7
    leaf_capacity: int = 7
    max_leaf_entries: int = 5000
    distance: DistanceKind = DistanceKind.D4
    absorption: AbsorptionKind = AbsorptionKind.R
    form: MetricForm = MetricForm.BETULA
    initial_threshold: float = 0.0
    precision: str = "double"

    def __post_init__(self):
        self.distance = DistanceKind.parse(self.distance)
        self.absorption = AbsorptionKind.parse(self.absorption)
        self.form = MetricForm.parse(self.form)
        if self.branching_factor < 2:
            raise ValueError("branching_factor must be at least 2")
        if self.leaf_capacity < 1:
            raise ValueError("leaf_capacity must be at least 1")
        if self.max_leaf_entries < 1:
            raise ValueError("max_leaf_entries must be at least 1")
        if not self.initial_threshold >= 0:
            raise ValueError("initial_threshold must be nonnegative")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")

    def _ints(self) -> np.ndarray:
        return np.array([int(self.form), int(self.distance), int(self.absorption),
                         self.branching_factor, self.leaf_capacity, self.max_leaf_entries,
                         int(self.precision == "single")], dtype=np.int64)


@dataclass(frozen=True)
class TreeStats:
    height: int
    node_count: int
    leaf_entry_count: int
    rebuild_count: int
    threshold: float
    cancellation_flags: int

    def as_dict(self) -> dict:
        return asdict(self)


# compiled kernels -----------------------------------------------------------

@njit(cache=True)
def _round32(v):
    return np.float64(np.float32(v))


@njit(cache=True)
def _round_entry(ew, ea, es, e):
    ew[e] = _round32(ew[e])
    for j in range(ea.shape[1]):
        ea[e, j] = _round32(ea[e, j])
        es[e, j] = _round32(es[e, j])


@njit(cache=True)
def _dist(cfg, st, wa, aa, sa, wb, ab, sb):
    if cfg[_FORM] == 0:
        return betula_distance(cfg[_DIST], wa, aa, sa, wb, ab, sb)
    v, flag = birch_distance(cfg[_DIST], wa, aa, sa[0], wb, ab, sb[0])
    if flag:
        st[_FLAGS] += 1
    return v


@njit(cache=True)
def _absorb(cfg, st, wa, aa, sa, wb, ab, sb):
    kind = cfg[_ABSORB]
    if cfg[_FORM] == 0:
        return betula_absorption(kind, wa, aa, sa, wb, ab, sb)
    if kind == 2:
        v, flag = birch_distance(0, wa, aa, sa[0], wb, ab, sb[0])
    else:
        v, flag = birch_absorption(kind, wa + wb, aa + ab, sa[0] + sb[0])
    if flag:
        st[_FLAGS] += 1
    return v


@njit(cache=True)
def _merge_into(cfg, ew, ea, es, e, w, a, s):
    if cfg[_FORM] == 0:
        ew[e] = merge_betula_inplace(ew[e], ea[e], es[e], w, a, s)
    else:
        ew[e] += w
        for j in range(a.shape[0]):
            ea[e, j] += a[j]
        es[e, 0] += s[0]
    if cfg[_SINGLE]:
        _round_entry(ew, ea, es, e)


@njit(cache=True)
def _new_entry(st, ew, ea, es, ech, w, a, s, child):
    e = st[_NENT]
    st[_NENT] += 1
    ew[e] = w
    ea[e, :] = a
    es[e, :] = s
    ech[e] = child
    return e


@njit(cache=True)
def _new_node(st, ncnt, nleaf, is_leaf):
    nd = st[_NNODE]
    st[_NNODE] += 1
    ncnt[nd] = 0
    nleaf[nd] = is_leaf
    return nd


@njit(cache=True)
def _recompute(cfg, ew, ea, es, nent, ncnt, e, node):
    ew[e] = 0.0
    ea[e, :] = 0.0
    es[e, :] = 0.0
    for j in range(ncnt[node]):
        c = nent[node, j]
        _merge_into(cfg, ew, ea, es, e, ew[c], ea[c], es[c])


@njit(cache=True)
def _split_assign(cfg, st, ws, as_, ss):
    """Farthest-pair seeding; returns a boolean mask of entries going to the second seed."""
    m = ws.shape[0]
    s1 = 0
    s2 = 1
    far = -1.0
    for i in range(m):
        for j in range(i + 1, m):
            dv = _dist(cfg, st, ws[i], as_[i], ss[i], ws[j], as_[j], ss[j])
            if dv > far:
                far = dv
                s1 = i
                s2 = j
    second = np.zeros(m, dtype=np.bool_)
    for i in range(m):
        if i == s1:
            continue
        if i == s2:
            second[i] = True
            continue
        d1 = _dist(cfg, st, ws[i], as_[i], ss[i], ws[s1], as_[s1], ss[s1])
        d2 = _dist(cfg, st, ws[i], as_[i], ss[i], ws[s2], as_[s2], ss[s2])
        second[i] = d2 < d1
    return second


@njit(cache=True)
def _split(cfg, st, ew, ea, es, nent, ncnt, nleaf, node):
    m = ncnt[node]
    idx = nent[node, :m].copy()
    second = _split_assign(cfg, st, ew[idx], ea[idx], es[idx])
    other = _new_node(st, ncnt, nleaf, nleaf[node])
    k1 = 0
    k2 = 0
    for i in range(m):
        if second[i]:
            nent[other, k2] = idx[i]
            k2 += 1
        else:
            nent[node, k1] = idx[i]
            k1 += 1
    ncnt[node] = k1
    ncnt[other] = k2
    return other


@njit(cache=True)
def _insert_one(cfg, thr, st, ew, ea, es, ech, nent, ncnt, nleaf, w, a, s, path_n, path_s):
    if st[_ROOT] < 0:
        node = _new_node(st, ncnt, nleaf, True)
        e = _new_entry(st, ew, ea, es, ech, w, a, s, -1)
        nent[node, 0] = e
        ncnt[node] = 1
        st[_ROOT] = node
        st[_LEAVES] = 1
        st[_HEIGHT] = 1
        return
    node = st[_ROOT]
    depth = 0
    while not nleaf[node]:
        best = 0
        bd = np.inf
        for j in range(ncnt[node]):
            c = nent[node, j]
            dv = _dist(cfg, st, ew[c], ea[c], es[c], w, a, s)
            if dv < bd:
                bd = dv
                best = j
        path_n[depth] = node
        path_s[depth] = best
        depth += 1
        node = ech[nent[node, best]]

    best = -1
    bd = np.inf
    for j in range(ncnt[node]):
        c = nent[node, j]
        dv = _dist(cfg, st, ew[c], ea[c], es[c], w, a, s)
        if dv < bd:
            bd = dv
            best = j
    absorbed = False
    if best >= 0:
        c = nent[node, best]
        if _absorb(cfg, st, ew[c], ea[c], es[c], w, a, s) <= thr:
            _merge_into(cfg, ew, ea, es, c, w, a, s)
            absorbed = True
    if not absorbed:
        e = _new_entry(st, ew, ea, es, ech, w, a, s, -1)
        nent[node, ncnt[node]] = e
        ncnt[node] += 1
        st[_LEAVES] += 1
    for t in range(depth):
        _merge_into(cfg, ew, ea, es, nent[path_n[t], path_s[t]], w, a, s)

    cur = node
    level = depth
    while ncnt[cur] > (cfg[_LEAFCAP] if nleaf[cur] else cfg[_BRANCH]):
        other = _split(cfg, st, ew, ea, es, nent, ncnt, nleaf, cur)
        e2 = _new_entry(st, ew, ea, es, ech, 0.0, a, s, other)
        _recompute(cfg, ew, ea, es, nent, ncnt, e2, other)
        if level == 0:
            root = _new_node(st, ncnt, nleaf, False)
            e1 = _new_entry(st, ew, ea, es, ech, 0.0, a, s, cur)
            _recompute(cfg, ew, ea, es, nent, ncnt, e1, cur)
            nent[root, 0] = e1
            nent[root, 1] = e2
            ncnt[root] = 2
            st[_ROOT] = root
            st[_HEIGHT] += 1
            break
        parent = path_n[level - 1]
        _recompute(cfg, ew, ea, es, nent, ncnt, nent[parent, path_s[level - 1]], cur)
        nent[parent, ncnt[parent]] = e2
        ncnt[parent] += 1
        cur = parent
        level -= 1


@njit(cache=True)
def _insert_many(cfg, thr, st, ew, ea, es, ech, nent, ncnt, nleaf, W, A, S, start, allow_rebuild):
    d = A.shape[1]
    path_n = np.empty(_MAX_DEPTH, dtype=np.int64)
    path_s = np.empty(_MAX_DEPTH, dtype=np.int64)
    a = np.empty(d)
    s = np.empty(d)
    single = cfg[_SINGLE] != 0
    for i in range(start, W.shape[0]):
        room = st[_HEIGHT] + 4
        if ew.shape[0] - st[_NENT] < room or ncnt.shape[0] - st[_NNODE] < room:
            return i, _GROW
        w = W[i]
        a[:] = A[i]
        s[:] = S[i]
        if single:
            w = _round32(w)
            for j in range(d):
                a[j] = _round32(a[j])
                s[j] = _round32(s[j])
        _insert_one(cfg, thr, st, ew, ea, es, ech, nent, ncnt, nleaf, w, a, s, path_n, path_s)
        if allow_rebuild and st[_LEAVES] > cfg[_MAXLEAVES]:
            return i + 1, _REBUILD
    return W.shape[0], _DONE


@njit(cache=True)
def _leaf_order(st, ech, nent, ncnt, nleaf):
    """Entry ids of all leaf entries in left-to-right order."""
    out = np.empty(max(st[_LEAVES], 0), dtype=np.int64)
    if st[_ROOT] < 0:
        return out
    stack = np.empty(st[_NNODE] + 1, dtype=np.int64)
    stack[0] = st[_ROOT]
    top = 1
    k = 0
    while top > 0:
        top -= 1
        node = stack[top]
        if nleaf[node]:
            for j in range(ncnt[node]):
                out[k] = nent[node, j]
                k += 1
        else:
            for j in range(ncnt[node] - 1, -1, -1):
                stack[top] = ech[nent[node, j]]
                top += 1
    return out


@njit(cache=True)
def _closest_pair_mean(cfg, st, ew, ea, es, nent, ncnt, nleaf, order):
    total = 0.0
    count = 0
    for node in range(st[_NNODE]):
        m = ncnt[node]
        if not nleaf[node] or m < 2:
            continue
        best = np.inf
        for i in range(m):
            p = nent[node, i]
            for j in range(i + 1, m):
                q = nent[node, j]
                v = _absorb(cfg, st, ew[p], ea[p], es[p], ew[q], ea[q], es[q])
                if v < best:
                    best = v
        if best < np.inf:
            total += best
            count += 1
    if count > 0:
        return total / count
    # every leaf holds a single entry: fall back to neighbours in leaf order
    best = np.inf
    for i in range(order.shape[0] - 1):
        p = order[i]
        q = order[i + 1]
        v = _absorb(cfg, st, ew[p], ea[p], es[p], ew[q], ea[q], es[q])
        if v < best:
            best = v
    return best if best < np.inf else 0.0


# public helpers --------------------------------------------------------------

def split_groups(features, distance=DistanceKind.D4, form=MetricForm.BETULA):
    """Partition an overflowing list of features the way a node split does.

    Returns two lists of indices: the entries following the first seed and those
    following the second seed of the farthest pair.
    """
    form = MetricForm.parse(form)
    cfg = TreeConfig(distance=distance, form=form)._ints()
    w, a, s = _feature_arrays(features, form)
    st = np.zeros(6, dtype=np.int64)
    second = _split_assign(cfg, st, w, a, s)
    return ([i for i in range(len(w)) if not second[i]], [i for i in range(len(w)) if second[i]])


def _feature_arrays(features, form):
    if form is MetricForm.BETULA:
        w = np.array([f.weight for f in features], dtype=np.float64)
        a = np.array([f.mean for f in features], dtype=np.float64)
        s = np.array([f.sq_dev for f in features], dtype=np.float64)
    else:
        w = np.array([f.count for f in features], dtype=np.float64)
        a = np.array([f.linear_sum for f in features], dtype=np.float64)
        s = np.zeros_like(a)
        s[:, 0] = [f.sum_squares for f in features]
    return w, np.ascontiguousarray(a), np.ascontiguousarray(s)


class CFTree:
    """A CF-tree built by sequential insertion.

    Parameters mirror :class:`TreeConfig`; pass either a config or keyword
    arguments. The dimensionality is fixed by the first insertion.

    Example
    -------
    >>> tree = CFTree(max_leaf_entries=100)
    >>> tree.insert_many(np.random.default_rng(0).normal(size=(1000, 2)))
    >>> tree.stats().leaf_entry_count <= 100
    True
    """

    def __init__(self, config: TreeConfig | None = None, **kwargs):
        if config is None:
            config = TreeConfig(**kwargs)
        elif kwargs:
            raise TypeError("pass either a TreeConfig or keyword arguments, not both")
        self.config = config
        self._cfg = config._ints()
        self.d = None
        self.threshold = float(config.initial_threshold)
        self.rebuild_count = 0
        self._allocate(0, 64, 32)

    # storage ----------------------------------------------------------------

    def _allocate(self, d, n_entries, n_nodes):
        width = max(self.config.branching_factor, self.config.leaf_capacity) + 1
        self._st = np.zeros(6, dtype=np.int64)
        self._st[_ROOT] = -1
        self._ew = np.zeros(n_entries)
        self._ea = np.zeros((n_entries, d))
        self._es = np.zeros((n_entries, d))
        self._ech = np.full(n_entries, -1, dtype=np.int64)
        self._nent = np.zeros((n_nodes, width), dtype=np.int64)
        self._ncnt = np.zeros(n_nodes, dtype=np.int64)
        self._nleaf = np.zeros(n_nodes, dtype=np.bool_)

    def _grow(self):
        ne = self._ew.shape[0] * 2
        nn = self._ncnt.shape[0] * 2
        self._ew = np.concatenate([self._ew, np.zeros(ne - self._ew.shape[0])])
        self._ea = np.vstack([self._ea, np.zeros((ne - self._ea.shape[0], self.d))])
        self._es = np.vstack([self._es, np.zeros((ne - self._es.shape[0], self.d))])
        self._ech = np.concatenate([self._ech, np.full(ne - self._ech.shape[0], -1, dtype=np.int64)])
        self._nent = np.vstack([self._nent, np.zeros((nn - self._nent.shape[0], self._nent.shape[1]),
                                                     dtype=np.int64)])
        self._ncnt = np.concatenate([self._ncnt, np.zeros(nn - self._ncnt.shape[0], dtype=np.int64)])
        self._nleaf = np.concatenate([self._nleaf, np.zeros(nn - self._nleaf.shape[0], dtype=np.bool_)])

    def _reset(self):
        flags = int(self._st[_FLAGS])
        self._allocate(self.d, self._ew.shape[0], self._ncnt.shape[0])
        self._st[_FLAGS] = flags

    def _set_dim(self, d):
        if self.d is None:
            self.d = d
            self._allocate(d, self._ew.shape[0], self._ncnt.shape[0])
        elif d != self.d:
            raise DimensionMismatchError(f"tree holds {self.d}-d data, got {d}-d input")

    # insertion ---------------------------------------------------------------

    def _lift(self, X, weights):
        if self.config.form is MetricForm.BETULA:
            return weights, X, np.zeros_like(X)
        if not np.all(weights == np.round(weights)):
            raise ValueError("BIRCH features count points; weights must be integral")
        S = np.zeros_like(X)
        S[:, 0] = weights * np.einsum("ij,ij->i", X, X)
        return weights, X * weights[:, None], S

    def insert(self, x, weight: float = 1.0) -> "CFTree":
        """Insert a single point."""
        return self.insert_many(np.asarray(x, dtype=np.float64).reshape(1, -1), [weight])

    def insert_many(self, X, sample_weight=None) -> "CFTree":
        """Insert the rows of ``X`` in order."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] == 0:
            raise ValueError("expected a 2-d array of points")
        if not np.all(np.isfinite(X)):
            raise ValueError("input contains non-finite coordinates")
        if sample_weight is None:
            weights = np.ones(X.shape[0])
        else:
            weights = np.asarray(sample_weight, dtype=np.float64).reshape(-1)
            if weights.shape[0] != X.shape[0]:
                raise ValueError("sample_weight length does not match the number of points")
            if not np.all(weights > 0) or not np.all(np.isfinite(weights)):
                raise ValueError("weights must be positive and finite")
        self._set_dim(X.shape[1])
        W, A, S = self._lift(X, weights)
        self._insert_arrays(W, np.ascontiguousarray(A), np.ascontiguousarray(S), True)
        return self

    def insert_features(self, features) -> "CFTree":
        """Insert ready-made features of the tree's form (used for rebuilds and merging trees)."""
        features = list(features)
        if not features:
            return self
        W, A, S = _feature_arrays(features, self.config.form)
        self._set_dim(A.shape[1])
        self._insert_arrays(W, A, S, True)
        return self

    def _insert_arrays(self, W, A, S, allow_rebuild):
        i = 0
        n = W.shape[0]
        while i < n:
            i, status = _insert_many(self._cfg, self.threshold, self._st, self._ew, self._ea,
                                     self._es, self._ech, self._nent, self._ncnt, self._nleaf,
                                     W, A, S, i, allow_rebuild)
            if status == _GROW:
                self._grow()
            elif status == _REBUILD:
                self._rebuild()

    # rebuild -----------------------------------------------------------------

    def _next_threshold(self) -> float:
        order = _leaf_order(self._st, self._ech, self._nent, self._ncnt, self._nleaf)
        heuristic = _closest_pair_mean(self._cfg, self._st, self._ew, self._ea, self._es,
                                       self._nent, self._ncnt, self._nleaf, order)
        current = self.threshold
        return max(heuristic, 2.0 * current, math.nextafter(current, math.inf))

    def _rebuild(self):
        while self._st[_LEAVES] > self.config.max_leaf_entries:
            new_threshold = self._next_threshold()
            W, A, S = self.leaf_arrays()
            self.threshold = new_threshold
            self._reset()
            self._insert_arrays(W, A, S, False)
            self.rebuild_count += 1

    def rebuild(self) -> "CFTree":
        """Compress the tree until it respects ``max_leaf_entries`` (no-op when it already does)."""
        if self._st[_LEAVES] > self.config.max_leaf_entries:
            self._rebuild()
        return self

    # queries -----------------------------------------------------------------

    def __len__(self):
        return int(self._st[_LEAVES])

    def _leaf_ids(self):
        return _leaf_order(self._st, self._ech, self._nent, self._ncnt, self._nleaf)

    def leaf_arrays(self):
        """``(w, a, s)`` arrays of the leaf entries in leaf order (copies)."""
        ids = self._leaf_ids()
        return self._ew[ids].copy(), self._ea[ids].copy(), self._es[ids].copy()

    def _feature(self, e):
        if self.config.form is MetricForm.BETULA:
            return BetulaFeature(self._ew[e], self._ea[e], self._es[e])
        return BirchFeature(self._ew[e], self._ea[e], self._es[e, 0])

    def leaf_features(self) -> list:
        """Leaf-level features, left to right."""
        return [self._feature(e) for e in self._leaf_ids()]

    def root_feature(self):
        """Aggregate of everything inserted so far (``None`` for an empty tree)."""
        root = self._st[_ROOT]
        if root < 0:
            return None
        w = np.zeros(1)
        a = np.zeros((1, self.d))
        s = np.zeros((1, self.d))
        for j in range(self._ncnt[root]):
            c = self._nent[root, j]
            _merge_into(self._cfg, w, a, s, 0, self._ew[c], self._ea[c], self._es[c])
        if self.config.form is MetricForm.BETULA:
            return BetulaFeature(w[0], a[0], s[0])
        return BirchFeature(w[0], a[0], s[0, 0])

    def nodes(self):
        """Depth-first walk yielding ``(node_id, depth, is_leaf, [(feature, child_id), ...])``.

        ``child_id`` is ``None`` for leaf entries.
        """
        root = self._st[_ROOT]
        if root < 0:
            return
        stack = [(root, 0)]
        while stack:
            node, depth = stack.pop()
            entries = []
            for j in range(self._ncnt[node]):
                e = self._nent[node, j]
                child = int(self._ech[e])
                entries.append((self._feature(e), None if child < 0 else child))
            yield node, depth, bool(self._nleaf[node]), entries
            for _, child in reversed(entries):
                if child is not None:
                    stack.append((child, depth + 1))

    def stats(self) -> TreeStats:
        return TreeStats(height=int(self._st[_HEIGHT]), node_count=int(self._st[_NNODE]),
                         leaf_entry_count=int(self._st[_LEAVES]), rebuild_count=self.rebuild_count,
                         threshold=self.threshold, cancellation_flags=int(self._st[_FLAGS]))

    @property
    def cancellation_flags(self) -> int:
        return int(self._st[_FLAGS])

    def dump(self) -> str:
        """Indented text dump, one entry per line, ``I`` for inner and ``L`` for leaf entries.

        Each inner entry is followed by its subtree, indented one level deeper.
        """
        lines = []
        root = self._st[_ROOT]
        if root < 0:
            return ""
        stack = [(root, 0)]
        while stack:
            node, depth = stack.pop()
            if isinstance(node, str):
                lines.append(node)
                continue
            tag = "L" if self._nleaf[node] else "I"
            items = []
            for j in range(self._ncnt[node]):
                e = self._nent[node, j]
                items.append(("  " * depth + tag + " " + self._feature(e).to_text(), None))
                if self._ech[e] >= 0:
                    items.append((int(self._ech[e]), depth + 1))
            for item in reversed(items):
                stack.append(item)
        return "\n".join(lines)
