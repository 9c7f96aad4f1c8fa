"""Synthetic datasets: the shifted two-cluster probe, a 10x10 grid and Halton-scattered clusters.

All generators are deterministic given their seed. Normal variates come from a
Box-Muller transform over ``numpy.random.default_rng`` uniforms so that the
exact stream is pinned independently of numpy's own normal sampler.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Dataset",
    "GridSpec",
    "RandomSpec",
    "ShiftSpec",
    "box_muller",
    "gen_grid",
    "gen_random",
    "gen_shift",
    "halton",
    "write_csv",
]

SHIFT_SIGMA = (4.0 / 3.0, 1.0, 0.75)


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.X.shape[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        write_csv(buf, self.X, self.labels)
        return buf.getvalue()


@dataclass(frozen=True)
class ShiftSpec:
    """Two 3-d Gaussian clusters moved away from the origin.

    ``mode="separation"`` places the centers at ``-shift/2`` and ``+shift/2`` on
    the first axis. ``mode="offset"`` keeps them ``gap`` apart and moves both to
    ``(shift, shift, shift)``.
    """

    points_per_cluster: int = 15000
    shift: float = 0.0
    seed: int = 0
    mode: str = "separation"
    gap: float = 10.0

    def __post_init__(self):
        if self.shift < 0:
            raise ValueError("shift must be nonnegative")
        if self.points_per_cluster < 1:
            raise ValueError("points_per_cluster must be positive")
        if self.mode not in ("separation", "offset"):
            raise ValueError("mode must be 'separation' or 'offset'")

    def centers(self) -> np.ndarray:
        if self.mode == "separation":
            return np.array([[-self.shift / 2, 0.0, 0.0], [self.shift / 2, 0.0, 0.0]])
        return np.array([[self.shift] * 3, [self.shift + self.gap, self.shift, self.shift]])


@dataclass(frozen=True)
class GridSpec:
    points_per_cluster: int = 10000
    multiplier: float = 0.1
    seed: int = 0
    side: int = 10
    spacing: float = 5.0
    variance_sd: float = 0.25
    min_variance: float = 0.01

    def cluster_size(self) -> int:
        return max(1, int(round(self.points_per_cluster * self.multiplier)))


@dataclass(frozen=True)
class RandomSpec:
    n_clusters: int = 100
    area: float = 50.0
    multiplier: float = 0.1
    seed: int = 0
    min_size: int = 5000
    max_size: int = 15000
    variance_sd: float = 0.15
    min_variance: float = 0.01


def box_muller(rng: np.random.Generator, size) -> np.ndarray:
    """Standard normal variates from pairs of uniforms."""
    n = int(np.prod(size))
    m = (n + 1) // 2
    u1 = rng.random(m)
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log1p(-u1))  # 1 - u1 lies in (0, 1]
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * m)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return z[:n].reshape(size)


def halton(index: int, base: int) -> float:
    """Radical inverse of ``index`` in ``base``."""
    if index < 0 or base < 2:
        raise ValueError("need index >= 0 and base >= 2")
    result, f = 0.0, 1.0
    while index > 0:
        f /= base
        index, digit = divmod(index, base)
        result += f * digit
    return result


def gen_shift(spec: ShiftSpec) -> Dataset:
    n = spec.points_per_cluster
    rng = np.random.default_rng(spec.seed)
    # noise is drawn before the centers are applied, so every shift sees the same cloud
    noise = box_muller(rng, (2 * n, 3)) * np.asarray(SHIFT_SIGMA)
    labels = np.repeat(np.arange(2), n)
    X = noise + spec.centers()[labels]
    return Dataset(X, labels)


def gen_grid(spec: GridSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    k = spec.side * spec.side
    ii, jj = np.meshgrid(np.arange(spec.side), np.arange(spec.side), indexing="ij")
    means = np.column_stack([ii.ravel(), jj.ravel()]) * spec.spacing
    var = np.maximum(1.0 + spec.variance_sd * box_muller(rng, (k, 2)), spec.min_variance)
    size = spec.cluster_size()
    labels = np.repeat(np.arange(k), size)
    X = means[labels] + np.sqrt(var)[labels] * box_muller(rng, (k * size, 2))
    return Dataset(X, labels)


def gen_random(spec: RandomSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    k = spec.n_clusters
    means = spec.area * np.array([[halton(i, 2), halton(i, 3)] for i in range(1, k + 1)])
    var = np.maximum(1.0 + spec.variance_sd * box_muller(rng, k), spec.min_variance)
    raw_sizes = rng.integers(spec.min_size, spec.max_size, endpoint=True, size=k)
    sizes = np.maximum(1, np.round(raw_sizes * spec.multiplier)).astype(np.int64)
    labels = np.repeat(np.arange(k), sizes)
    X = means[labels] + np.sqrt(var)[labels, None] * box_muller(rng, (labels.shape[0], 2))
    return Dataset(X, labels)


def write_csv(handle, X, labels=None) -> None:
    """Write ``x1..xd[,label]`` rows with 17 significant digits."""
    X = np.asarray(X)
    d = X.shape[1]
    writer = csv.writer(handle, lineterminator="\n")
    header = [f"x{j + 1}" for j in range(d)]
    if labels is not None:
        header.append("label")
    writer.writerow(header)
    for i in range(X.shape[0]):
        row = ["%.17g" % v for v in X[i]]
        if labels is not None:
            row.append(str(int(labels[i])))
        writer.writerow(row)
