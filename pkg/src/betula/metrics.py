"""Distances (D0-D4) and absorption criteria (R, D, E) between cluster features.

Every measure exists in two algebraic forms:

* BETULA form, evaluated from ``(n, mean, S)``. Radicands are sums of
  nonnegative terms, so the result is always well defined.
* BIRCH form, evaluated from ``(N, LS, SS)`` with the original formulas. These
  subtract large, nearly equal quantities; a radicand that cancelled is clamped
  to 0 and reported through a flag instead of producing NaN.

The kernels are compiled with numba and shared with the CF-tree.
"""
from __future__ import annotations

import math
from enum import IntEnum

import numpy as np
from numba import njit

from .features import (CANCELLATION_ULPS, BetulaFeature, BirchFeature,
                       DimensionMismatchError, merge_birch)

__all__ = [
    "AbsorptionKind",
    "DistanceKind",
    "MetricDomainError",
    "MetricForm",
    "absorb_betula",
    "absorb_birch",
    "dist_betula",
    "dist_birch",
]

_EPS = float(np.finfo(np.float64).eps)
_CANCEL_TOL = CANCELLATION_ULPS * _EPS


class MetricDomainError(ValueError):
    """A measure was evaluated outside its domain (too little weight)."""


class _ParseMixin:
    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            key = value.strip().upper()
            if key in cls.__members__:
                return cls[key]
        raise ValueError(f"unknown {cls.__name__} {value!r}; "
                         f"expected one of {', '.join(m.lower() for m in cls.__members__)}")


class DistanceKind(_ParseMixin, IntEnum):
    """Inter-feature distance used for descent and splitting."""

    D0 = 0  # centroid euclidean
    D1 = 1  # centroid manhattan
    D2 = 2  # average inter-cluster
    D3 = 3  # average intra-cluster
    D4 = 4  # variance increase


class AbsorptionKind(_ParseMixin, IntEnum):
    """Criterion compared against the threshold when absorbing into a leaf entry."""

    R = 0  # radius
    D = 1  # diameter
    E = 2  # centroid distance


class MetricForm(_ParseMixin, IntEnum):
    BETULA = 0
    BIRCH = 1


@njit(cache=True)
def _sqdist(a, b):
    acc = 0.0
    for j in range(a.shape[0]):
        t = a[j] - b[j]
        acc += t * t
    return acc


@njit(cache=True)
def _sum(v):
    acc = 0.0
    for j in range(v.shape[0]):
        acc += v[j]
    return acc


@njit(cache=True)
def _d3_betula(wa, sa, wb, sb, d2):
    n = wa + wb
    if n <= 1.0:
        return np.inf
    return math.sqrt(2.0 * (n * (sa + sb) + wa * wb * d2) / (n * (n - 1.0)))


@njit(cache=True)
def betula_distance(kind, wa, ma, sa, wb, mb, sb):
    """Distance ``kind`` between two BETULA features given as arrays."""
    if kind == 1:
        acc = 0.0
        for j in range(ma.shape[0]):
            acc += abs(ma[j] - mb[j])
        return acc
    d2 = _sqdist(ma, mb)
    if kind == 0:
        return math.sqrt(d2)
    if kind == 2:
        return math.sqrt(_sum(sa) / wa + _sum(sb) / wb + d2)
    if kind == 3:
        return _d3_betula(wa, _sum(sa), wb, _sum(sb), d2)
    return math.sqrt(wa * wb / (wa + wb) * d2)


@njit(cache=True)
def betula_absorption(kind, wa, ma, sa, wb, mb, sb):
    """Absorption criterion ``kind`` of the virtual merge of two BETULA features."""
    if kind == 0:
        n = wa + wb
        return math.sqrt((_sum(sa) + _sum(sb) + wa * wb / n * _sqdist(ma, mb)) / n)
    if kind == 1:
        # same code path as the D3 distance, so both agree bit for bit
        return betula_distance(3, wa, ma, sa, wb, mb, sb)
    return betula_distance(0, wa, ma, sa, wb, mb, sb)


@njit(cache=True)
def _clamp_root(radicand, scale):
    if radicand < 0.0 or (scale > 0.0 and radicand <= _CANCEL_TOL * scale):
        return 0.0, True
    return math.sqrt(radicand), False


@njit(cache=True)
def birch_distance(kind, na, lsa, ssa, nb, lsb, ssb):
    """Distance ``kind`` from BIRCH features; returns ``(value, cancelled)``."""
    d = lsa.shape[0]
    if kind <= 1:
        acc = 0.0
        for j in range(d):
            t = lsa[j] / na - lsb[j] / nb
            acc += t * t if kind == 0 else abs(t)
        return (math.sqrt(acc) if kind == 0 else acc), False
    if kind == 2:
        dot = 0.0
        for j in range(d):
            dot += lsa[j] * lsb[j]
        first = nb * ssa + na * ssb
        return _clamp_root((first - 2.0 * dot) / (na * nb), first / (na * nb))
    n = na + nb
    sq_ab = 0.0
    for j in range(d):
        t = lsa[j] + lsb[j]
        sq_ab += t * t
    if kind == 3:
        if n <= 1.0:
            return np.inf, False
        first = ssa + ssb
        return _clamp_root(2.0 / (n - 1.0) * (first - sq_ab / n), 2.0 / (n - 1.0) * first)
    first = _sum(lsa * lsa) / na + _sum(lsb * lsb) / nb
    return _clamp_root(first - sq_ab / n, first)


@njit(cache=True)
def birch_absorption(kind, n, ls, ss):
    """R (kind 0) or D (kind 1) of an already merged BIRCH feature."""
    if n == 1.0:
        return 0.0, False
    sq = _sum(ls * ls) / n
    if kind == 0:
        return _clamp_root((ss - sq) / n, ss / n)
    if n <= 1.0:
        return np.inf, False
    return _clamp_root(2.0 / (n - 1.0) * (ss - sq), 2.0 / (n - 1.0) * ss)


# Python-facing wrappers -----------------------------------------------------

def _need_weight(kind, wa, wb):
    if wa < 1 or wb < 1:
        raise MetricDomainError(f"{kind.name} needs features of weight >= 1, got {wa} and {wb}")


def _check_pair(a, b):
    if a.d != b.d:
        raise DimensionMismatchError(f"cannot compare {a.d}-d and {b.d}-d features")


def dist_betula(kind, a: BetulaFeature, b: BetulaFeature) -> float:
    """Distance between two BETULA features (numerically stable form)."""
    kind = DistanceKind.parse(kind)
    _check_pair(a, b)
    _need_weight(kind, a.weight, b.weight)
    return betula_distance(int(kind), a.weight, a.mean, a.sq_dev, b.weight, b.mean, b.sq_dev)


def dist_birch(kind, a: BirchFeature, b: BirchFeature, return_flag: bool = False):
    """Distance between BIRCH features evaluated with the original formulas.

    With ``return_flag`` also returns whether the radicand cancelled and was
    clamped to zero.
    """
    kind = DistanceKind.parse(kind)
    _check_pair(a, b)
    _need_weight(kind, a.count, b.count)
    value, flag = birch_distance(int(kind), float(a.count), a.linear_sum, a.sum_squares,
                                 float(b.count), b.linear_sum, b.sum_squares)
    return (value, flag) if return_flag else value


def absorb_betula(kind, a: BetulaFeature, b: BetulaFeature) -> float:
    kind = AbsorptionKind.parse(kind)
    _check_pair(a, b)
    _need_weight(kind, a.weight, b.weight)
    return betula_absorption(int(kind), a.weight, a.mean, a.sq_dev, b.weight, b.mean, b.sq_dev)


def absorb_birch(kind, ab: BirchFeature, a: BirchFeature | None = None,
                 b: BirchFeature | None = None, return_flag: bool = False):
    """Absorption criterion on the merged BIRCH feature ``ab``.

    ``E`` has no definition on a single merged feature; it needs the pair
    ``a``, ``b`` and evaluates the distance of their centers.
    """
    kind = AbsorptionKind.parse(kind)
    if kind is AbsorptionKind.E:
        if a is None or b is None:
            raise MetricDomainError("E needs the two features, not their merge")
        value, flag = dist_birch(DistanceKind.D0, a, b, return_flag=True)
    else:
        if ab.count < 1 or (kind is AbsorptionKind.D and ab.count < 2):
            raise MetricDomainError(f"{kind.name} is undefined for a feature of {ab.count} points")
        value, flag = birch_absorption(int(kind), float(ab.count), ab.linear_sum, ab.sum_squares)
    return (value, flag) if return_flag else value


def absorb_birch_pair(kind, a: BirchFeature, b: BirchFeature, return_flag: bool = False):
    """Convenience: virtually merge ``a`` and ``b`` and evaluate ``kind``."""
    return absorb_birch(kind, merge_birch(a, b), a, b, return_flag=return_flag)
