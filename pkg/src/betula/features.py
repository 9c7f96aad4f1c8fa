"""Cluster feature summaries.

Two representations of a weighted point set are provided:

* :class:`BirchFeature` ``(N, LS, SS)`` - count, linear sum and scalar sum of
  squares. Cheap to merge (plain sums) but variance derived from it suffers
  from catastrophic cancellation far from the origin.
* :class:`BetulaFeature` ``(n, mean, S)`` - weight, mean vector and per
  dimension sum of squared deviations from the mean. Merged with the weighted
  incremental update, which never subtracts two large squares.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = [
    "BetulaFeature",
    "BirchFeature",
    "DimensionMismatchError",
    "EmptyFeatureError",
    "betula_variance",
    "birch_variance",
    "lift_point",
    "lift_point_birch",
    "merge_betula",
    "merge_birch",
    "parse_feature",
]

_EPS = np.finfo(np.float64).eps
# a subtraction keeping fewer than ~2 significant bits is reported as cancelled
CANCELLATION_ULPS = 4.0


class DimensionMismatchError(ValueError):
    """Raised when features or points of different dimensionality meet."""


class EmptyFeatureError(ValueError):
    """Raised when a statistic is requested from a feature of zero weight."""


def _as_vector(x, name="x") -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True).reshape(-1)
    if arr.size == 0:
        raise ValueError(f"{name} must have at least one dimension")
    return arr


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("point has non-finite coordinates")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class BetulaFeature:
    """Weighted summary ``(n, mean, S)`` with per-dimension squared deviations."""

    weight: float
    mean: np.ndarray
    sq_dev: np.ndarray

    def __post_init__(self):
        mean = _as_vector(self.mean, "mean")
        sq_dev = _as_vector(self.sq_dev, "sq_dev")
        if mean.shape != sq_dev.shape:
            raise DimensionMismatchError(
                f"mean has {mean.size} dimensions but sq_dev has {sq_dev.size}")
        if self.weight < 0:
            raise ValueError("weight must be nonnegative")
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "mean", _freeze(mean))
        object.__setattr__(self, "sq_dev", _freeze(sq_dev))

    @classmethod
    def empty(cls, d: int) -> "BetulaFeature":
        return cls(0.0, np.zeros(d), np.zeros(d))

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    @property
    def sse(self) -> float:
        """Scalar sum of squared deviations (component sum of ``sq_dev``)."""
        return float(self.sq_dev.sum())

    def is_empty(self) -> bool:
        return self.weight == 0

    def identical(self, other: "BetulaFeature") -> bool:
        """Bitwise equality of all fields."""
        return (self.weight == other.weight
                and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.sq_dev, other.sq_dev))

    def to_text(self) -> str:
        return ";".join([_fmt(self.weight), _fmt_vec(self.mean), _fmt_vec(self.sq_dev)])

    def __repr__(self):
        return f"BetulaFeature({self.to_text()})"


@dataclass(frozen=True, eq=False)
class BirchFeature:
    """Original BIRCH clustering feature ``(N, LS, SS)`` with scalar ``SS``."""

    count: int
    linear_sum: np.ndarray
    sum_squares: float

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be nonnegative")
        if self.count != int(self.count):
            raise ValueError("BIRCH features count points; count must be integral")
        if self.sum_squares < 0:
            raise ValueError("sum of squares must be nonnegative")
        object.__setattr__(self, "count", int(self.count))
        object.__setattr__(self, "linear_sum", _freeze(_as_vector(self.linear_sum, "linear_sum")))
        object.__setattr__(self, "sum_squares", float(self.sum_squares))

    @classmethod
    def empty(cls, d: int) -> "BirchFeature":
        return cls(0, np.zeros(d), 0.0)

    @property
    def d(self) -> int:
        return self.linear_sum.shape[0]

    @property
    def center(self) -> np.ndarray:
        if self.count == 0:
            raise EmptyFeatureError("center of an empty feature is undefined")
        return self.linear_sum / self.count

    def is_empty(self) -> bool:
        return self.count == 0

    def identical(self, other: "BirchFeature") -> bool:
        return (self.count == other.count
                and np.array_equal(self.linear_sum, other.linear_sum)
                and self.sum_squares == other.sum_squares)

    def to_text(self) -> str:
        return ";".join([str(self.count), _fmt_vec(self.linear_sum), _fmt(self.sum_squares)])

    def __repr__(self):
        return f"BirchFeature({self.to_text()})"


def _fmt(v: float) -> str:
    return "%.17g" % v


def _fmt_vec(v: np.ndarray) -> str:
    return ",".join(_fmt(x) for x in v)


def parse_feature(text: str, kind: str = "betula"):
    """Parse the ``a;b,c;e`` text form produced by ``to_text``."""
    try:
        head, vec, tail = text.strip().split(";")
        first = np.array([float(t) for t in vec.split(",")])
        if kind == "betula":
            return BetulaFeature(float(head), first, [float(t) for t in tail.split(",")])
        if kind == "birch":
            return BirchFeature(int(head), first, float(tail))
    except (TypeError, ValueError) as exc:
        raise ValueError(f"cannot parse {kind} feature {text!r}: {exc}") from None
    raise ValueError(f"unknown feature kind {kind!r}")


def _check_same_dim(a, b) -> None:
    if a.d != b.d:
        raise DimensionMismatchError(f"cannot combine {a.d}-d and {b.d}-d features")


def lift_point(x, w: float = 1.0) -> BetulaFeature:
    """Feature of a single point ``x`` with weight ``w``: ``(w, x, 0)``."""
    x = _as_vector(x)
    _check_finite(x)
    if not w > 0:
        raise ValueError("point weight must be positive")
    return BetulaFeature(w, x, np.zeros_like(x))


def lift_point_birch(x) -> BirchFeature:
    x = _as_vector(x)
    _check_finite(x)
    return BirchFeature(1, x, float(np.dot(x, x)))


@njit(cache=True)
def merge_betula_inplace(w, mu, s, wb, mub, sb):
    """Merge ``(wb, mub, sb)`` into ``(w, mu, s)``; mutates ``mu``/``s``, returns the weight."""
    if wb == 0.0:
        return w
    if w == 0.0:
        mu[:] = mub
        s[:] = sb
        return wb
    n = w + wb
    f = wb / n
    for j in range(mu.shape[0]):
        old = mu[j]
        new = old + f * (mub[j] - old)
        v = s[j] + sb[j] + wb * (old - mub[j]) * (new - mub[j])
        if v < 0.0:
            if v < -1e-9 * n * (new * new + 1e-300):
                raise ArithmeticError("merge produced a negative squared deviation")
            v = 0.0
        mu[j] = new
        s[j] = v
    return n


def merge_betula(a: BetulaFeature, b: BetulaFeature) -> BetulaFeature:
    """Combine two BETULA features (weighted mean/variance update)."""
    _check_same_dim(a, b)
    if b.weight == 0:
        return a
    if a.weight == 0:
        return b
    mu = a.mean.copy()
    s = a.sq_dev.copy()
    w = merge_betula_inplace(a.weight, mu, s, b.weight, b.mean, b.sq_dev)
    return BetulaFeature(w, mu, s)


def merge_birch(a: BirchFeature, b: BirchFeature) -> BirchFeature:
    _check_same_dim(a, b)
    if b.count == 0:
        return a
    if a.count == 0:
        return b
    return BirchFeature(a.count + b.count, a.linear_sum + b.linear_sum,
                        a.sum_squares + b.sum_squares)


def betula_variance(f: BetulaFeature) -> np.ndarray:
    """Per-dimension variance ``S / n``."""
    if f.weight == 0:
        raise EmptyFeatureError("variance of an empty feature is undefined")
    return np.maximum(f.sq_dev / f.weight, 0.0)


def cancelled(value, scale, terms=1):
    """True when ``value`` (a difference of terms of size ``scale``) kept no reliable digits.

    ``terms`` is the number of summands behind ``scale``; the rounding error of
    a running sum grows linearly with it.
    """
    tol = np.maximum(CANCELLATION_ULPS, terms) * _EPS
    return (value < 0) | ((scale > 0) & (value <= tol * scale))


def birch_variance(f: BirchFeature, return_flag: bool = False):
    """Total variance ``SS/N - ||LS/N||^2`` computed the original way.

    The value is returned unclamped, so it can be zero or negative for data far
    from the origin. With ``return_flag`` a second value reports whether the
    subtraction cancelled (negative, or no significant bits left).
    """
    if f.count == 0:
        raise EmptyFeatureError("variance of an empty feature is undefined")
    center = f.linear_sum / f.count
    first = f.sum_squares / f.count
    value = first - float(np.dot(center, center))
    # a single point has exactly zero variance, nothing was lost
    flag = f.count > 1 and bool(cancelled(value, first, f.count))
    if return_flag:
        return value, flag
    return value
