"""Gaussian mixture EM over raw points or over cluster features.

Two variance models are supported: ``"igmm"`` (spherical, one variance per
component) and ``"dgmm"`` (diagonal, one variance per component and axis).

Cluster features enter the E-step with their own spread: a feature with mean
``m`` and per-axis variance ``v`` is scored against component ``c`` by
``N(m | mean_c, var_c + v)``, the integral of the product of the two Gaussians.
The M-step folds each feature into the component statistics with the weighted
mean/variance merge, including the feature's internal squared deviations.

Raw-point EM offers two ways of accumulating component variances:
``"stable"`` uses the same weighted incremental merge, ``"textbook"`` uses
``E[x^2] - E[x]^2`` and therefore breaks down for data far from the origin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from numba import njit

from .features import BetulaFeature, BirchFeature, cancelled

__all__ = [
    "GaussianComponent",
    "LogLikelihood",
    "MixtureModel",
    "em_fit_birch_features",
    "em_fit_features",
    "em_fit_points",
    "kmeanspp_init",
    "log_likelihood",
    "responsibilities",
]

_LOG2PI = math.log(2.0 * math.pi)
_TINY = float(np.finfo(np.float64).tiny)
KINDS = ("igmm", "dgmm")
BACKENDS = ("stable", "textbook")


@dataclass(frozen=True)
class GaussianComponent:
    weight: float
    mean: np.ndarray
    variance: float | np.ndarray


class LogLikelihood(NamedTuple):
    total: float
    per_point: float


@dataclass
class MixtureModel:
    """Fitted mixture. ``variances`` is always ``(k, d)``; spherical rows are constant."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    kind: str
    n_iter: int = 0
    log_likelihood: float = float("nan")
    trace: list = field(default_factory=list)
    converged: bool = False
    floor_flags: int = 0
    reseed_flags: int = 0
    cancellation_flags: int = 0

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def components(self) -> list[GaussianComponent]:
        out = []
        for c in range(self.k):
            var = float(self.variances[c, 0]) if self.kind == "igmm" else self.variances[c].copy()
            out.append(GaussianComponent(float(self.weights[c]), self.means[c].copy(), var))
        return out

    def to_text(self) -> str:
        """One line per component: ``pi; mean...; var...``."""
        lines = []
        for comp in self.components:
            var = np.atleast_1d(comp.variance)
            lines.append("%.17g; %s; %s" % (comp.weight, " ".join("%.17g" % v for v in comp.mean),
                                             " ".join("%.17g" % v for v in var)))
        return "\n".join(lines)

    def trace_csv(self, n_points: float) -> str:
        rows = ["iteration,total,per_point"]
        for i, ll in enumerate(self.trace):
            rows.append("%d,%.17g,%.17g" % (i, ll, ll / n_points))
        return "\n".join(rows) + "\n"


# kernels -----------------------------------------------------------------------

@njit(cache=True)
def _row_post(x, v, zero_v, logw, means, var, inv, const, out):
    """Fill ``out`` with the responsibilities of one input and return its log-sum-exp.

    The log terms are ``log pi_c + log N(x | mean_c, var_c + v)``.
    """
    k, d = means.shape
    mx = -np.inf
    for c in range(k):
        acc = 0.0
        if zero_v:
            for j in range(d):
                t = x[j] - means[c, j]
                acc += t * t * inv[c, j]
            out[c] = const[c] - 0.5 * acc
        else:
            for j in range(d):
                s = var[c, j] + v[j]
                t = x[j] - means[c, j]
                acc += math.log(s) + t * t / s
            out[c] = logw[c] - 0.5 * (acc + d * _LOG2PI)
        if out[c] > mx:
            mx = out[c]
    if mx == -np.inf:
        for c in range(k):
            out[c] = 0.0
        return mx
    tot = 0.0
    for c in range(k):
        e = math.exp(out[c] - mx)
        out[c] = e
        tot += e
    scale = 1.0 / tot
    for c in range(k):
        out[c] *= scale
    return mx + math.log(tot)


@njit(cache=True)
def _accumulate(textbook, c, r, w, x, x2, acc_w, acc_m, acc_s):
    wc = r * w
    if wc <= 0.0:
        return
    d = x.shape[0]
    if textbook:
        acc_w[c] += wc
        for j in range(d):
            acc_m[c, j] += wc * x[j]
            acc_s[c, j] += r * x2[j]
        return
    n = acc_w[c] + wc
    f = wc / n
    for j in range(d):
        old = acc_m[c, j]
        new = old + f * (x[j] - old)
        acc_s[c, j] += r * x2[j] + wc * (old - x[j]) * (new - x[j])
        acc_m[c, j] = new
    acc_w[c] = n


@njit(cache=True)
def _em_pass(W, M, V, zero_v, X2, textbook, logw, means, var, inv, const,
             acc_w, acc_m, acc_s, lse_out):
    n = M.shape[0]
    k, d = means.shape
    out = np.empty(k)
    total = 0.0
    comp = 0.0
    for i in range(n):
        x = M[i]
        x2 = X2[i]
        lse = _row_post(x, V[i], zero_v, logw, means, var, inv, const, out)
        lse_out[i] = lse
        term = W[i] * lse
        t = total + term
        if abs(total) >= abs(term):
            comp += (total - t) + term
        else:
            comp += (term - t) + total
        total = t
        # same update as _accumulate, written out: numba compiles the call far slower
        for c in range(k):
            r = out[c]
            if r < _TINY:
                continue
            wc = r * W[i]
            if textbook:
                acc_w[c] += wc
                for j in range(d):
                    acc_m[c, j] += wc * x[j]
                    acc_s[c, j] += r * x2[j]
                continue
            nw = acc_w[c] + wc
            f = wc / nw
            for j in range(d):
                old = acc_m[c, j]
                new = old + f * (x[j] - old)
                acc_s[c, j] += r * x2[j] + wc * (old - x[j]) * (new - x[j])
                acc_m[c, j] = new
            acc_w[c] = nw
    return total + comp


@njit(cache=True)
def _hard_pass(W, M, X2, textbook, labels, acc_w, acc_m, acc_s):
    for i in range(M.shape[0]):
        _accumulate(textbook, labels[i], 1.0, W[i], M[i], X2[i], acc_w, acc_m, acc_s)


@njit(cache=True)
def _resp_matrix(M, V, zero_v, logw, means, var, inv, const, resp, lse_out):
    out = np.empty(means.shape[0])
    for i in range(M.shape[0]):
        lse_out[i] = _row_post(M[i], V[i], zero_v, logw, means, var, inv, const, out)
        resp[i] = out


# input preparation ---------------------------------------------------------------

@dataclass
class _Inputs:
    """Weighted inputs of an EM run.

    ``V`` is the per-input variance used in the E-step, ``X2`` the per-input
    second-order statistic folded in by the M-step (internal squared deviations
    for the stable path, sums of squares for the textbook path).
    """

    W: np.ndarray
    M: np.ndarray
    V: np.ndarray
    X2: np.ndarray
    textbook: bool
    global_var: np.ndarray
    flags: int = 0

    @property
    def zero_v(self) -> bool:
        return not np.any(self.V)


def _global_variance(W, M, S):
    total = W.sum()
    mu = (W[:, None] * M).sum(axis=0) / total
    dev = M - mu
    return (S.sum(axis=0) + (W[:, None] * dev * dev).sum(axis=0)) / total


def _spherical(V):
    return np.repeat(V.mean(axis=1, keepdims=True), V.shape[1], axis=1)


def _betula_inputs(W, M, S, kind) -> _Inputs:
    W = np.ascontiguousarray(W, dtype=np.float64)
    M = np.ascontiguousarray(M, dtype=np.float64)
    S = np.ascontiguousarray(S, dtype=np.float64)
    if M.ndim != 2 or S.shape != M.shape or W.shape != (M.shape[0],):
        raise ValueError("inconsistent feature arrays")
    if M.shape[0] == 0:
        raise ValueError("no inputs to cluster")
    if not np.all(W > 0):
        raise ValueError("input weights must be positive")
    V = S / W[:, None]
    if kind == "igmm":
        V = _spherical(V)
    return _Inputs(W, M, np.ascontiguousarray(V), S, False, _global_variance(W, M, S))


def _point_inputs(X, sample_weight, kind, backend) -> _Inputs:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("expected a nonempty 2-d array of points")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains non-finite coordinates")
    W = np.ones(X.shape[0]) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    if backend == "stable":
        return _betula_inputs(W, X, np.zeros_like(X), kind)
    if not np.all(W > 0):
        raise ValueError("input weights must be positive")
    Q = W[:, None] * X * X
    return _Inputs(W, X, np.zeros_like(X), Q, True, _global_variance(W, X, np.zeros_like(X)))


def _birch_inputs(N, LS, SS) -> _Inputs:
    N = np.ascontiguousarray(N, dtype=np.float64)
    LS = np.ascontiguousarray(LS, dtype=np.float64)
    SS = np.asarray(SS, dtype=np.float64).reshape(-1)
    if LS.ndim != 2 or N.shape != (LS.shape[0],) or SS.shape != N.shape:
        raise ValueError("inconsistent BIRCH feature arrays")
    if LS.shape[0] == 0:
        raise ValueError("no inputs to cluster")
    if not np.all(N > 0):
        raise ValueError("feature counts must be positive")
    d = LS.shape[1]
    M = LS / N[:, None]
    first = SS / N
    raw = first - np.einsum("ij,ij->i", M, M)
    lost = cancelled(raw, first, N) & (N > 1)
    total_var = np.where(lost, 0.0, np.maximum(raw, 0.0))
    V = np.repeat((total_var / d)[:, None], d, axis=1)
    Q = np.repeat((SS / d)[:, None], d, axis=1)
    inputs = _Inputs(N, M, np.ascontiguousarray(V), np.ascontiguousarray(Q), True,
                     _global_variance(N, M, V * N[:, None]))
    inputs.flags = int(lost.sum())
    return inputs


def _feature_arrays(features):
    """Accept a list of BetulaFeature or a ``(weights, means, sq_dev)`` tuple."""
    if isinstance(features, tuple):
        return features
    features = list(features)
    if not features:
        raise ValueError("no inputs to cluster")
    if not all(isinstance(f, BetulaFeature) for f in features):
        raise TypeError("expected BetulaFeature inputs")
    return (np.array([f.weight for f in features]), np.array([f.mean for f in features]),
            np.array([f.sq_dev for f in features]))


def _birch_arrays(features):
    if isinstance(features, tuple):
        return features
    features = list(features)
    if not features:
        raise ValueError("no inputs to cluster")
    if not all(isinstance(f, BirchFeature) for f in features):
        raise TypeError("expected BirchFeature inputs")
    return (np.array([f.count for f in features], dtype=np.float64),
            np.array([f.linear_sum for f in features]),
            np.array([f.sum_squares for f in features]))


# initialisation -----------------------------------------------------------------

def kmeanspp_init(inputs, k: int, seed=None, weights=None) -> np.ndarray:
    """Weighted k-means++ seeding on feature means.

    ``inputs`` is a list of cluster features or an ``(n, d)`` array of means
    (with optional ``weights``). The first center is drawn proportionally to
    weight, later ones proportionally to weight times squared euclidean
    distance to the nearest chosen center.
    """
    if isinstance(inputs, np.ndarray):
        means = np.asarray(inputs, dtype=np.float64)
        w = np.ones(means.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    else:
        inputs = list(inputs)
        if inputs and isinstance(inputs[0], BirchFeature):
            w = np.array([f.count for f in inputs], dtype=np.float64)
            means = np.array([f.center for f in inputs])
        else:
            w = np.array([f.weight for f in inputs], dtype=np.float64)
            means = np.array([f.mean for f in inputs])
    n = means.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"cannot choose {k} centers from {n} inputs")
    if not np.all(w > 0):
        raise ValueError("weights must be positive")
    rng = np.random.default_rng(seed)
    chosen = np.zeros(n, dtype=bool)
    first = rng.choice(n, p=w / w.sum())
    chosen[first] = True
    centers = [means[first]]
    d2 = ((means - means[first]) ** 2).sum(axis=1)
    for _ in range(1, k):
        p = w * d2
        p[chosen] = 0.0
        if not p.sum() > 0:
            # remaining inputs coincide with chosen centers
            p = np.where(chosen, 0.0, w)
        idx = rng.choice(n, p=p / p.sum())
        chosen[idx] = True
        centers.append(means[idx])
        d2 = np.minimum(d2, ((means - means[idx]) ** 2).sum(axis=1))
    return np.array(centers)


# EM driver ------------------------------------------------------------------------

class _Params:
    def __init__(self, weights, means, variances):
        self.weights = weights
        self.means = np.ascontiguousarray(means)
        self.variances = np.ascontiguousarray(variances)
        self.inv = 1.0 / self.variances
        with np.errstate(divide="ignore"):
            self.logw = np.log(weights)
        self.const = self.logw - 0.5 * (np.log(self.variances).sum(axis=1)
                                        + means.shape[1] * _LOG2PI)


def _floor_value(global_var, ratio):
    positive = global_var[global_var > 0]
    if positive.size == 0:
        return _TINY
    return max(ratio * float(positive.min()), _TINY)


def _m_step(acc_w, acc_m, acc_s, inp: _Inputs, kind, floor, lse, counters):
    k, d = acc_m.shape
    total = inp.W.sum()
    empty = acc_w <= 1e-12 * total
    N = np.where(empty, 1.0, acc_w)
    if inp.textbook:
        means = acc_m / N[:, None]
        first = acc_s / N[:, None]
        raw = first - means * means
        if kind == "igmm":
            first = _spherical(first)
            raw = _spherical(raw)
        lost = cancelled(raw, first, N[:, None])
        counters["cancel"] += int(lost[~empty].any(axis=1).sum())
        raw = np.where(lost, 0.0, raw)
    else:
        means = acc_m.copy()
        raw = acc_s / N[:, None]
        if kind == "igmm":
            raw = _spherical(raw)
    low = raw < floor
    counters["floor"] += int(low[~empty].any(axis=1).sum())
    variances = np.where(low, floor, raw)
    weights = acc_w.copy()
    if empty.any():
        # reseed starved components on the worst-fitting inputs
        order = np.argsort(lse, kind="stable")
        for slot, c in enumerate(np.flatnonzero(empty)):
            i = order[slot % order.shape[0]]
            means[c] = inp.M[i]
            gv = _spherical(inp.global_var[None, :])[0] if kind == "igmm" else inp.global_var
            variances[c] = np.maximum(gv, floor)
            weights[c] = inp.W[i]
            counters["reseed"] += 1
    weights = weights / weights.sum()
    return _Params(weights, means, variances)


def _run_em(inp: _Inputs, k, kind, seed, max_iter, tol, init_means, floor_ratio) -> MixtureModel:
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    n, d = inp.M.shape
    if init_means is not None:
        init_means = np.asarray(init_means, dtype=np.float64)
        if init_means.shape != (k, d):
            raise ValueError(f"init_means must have shape {(k, d)}")
    # Work relative to the first input. For data far from the origin the
    # subtraction is exact, so a translated input gives the same run.
    # Sums of squares cannot be re-centred, so the textbook path stays put.
    ref = np.zeros(d) if inp.textbook else inp.M[0].copy()
    if ref.any():
        inp = replace(inp, M=inp.M - ref)
        if init_means is not None:
            init_means = init_means - ref
    if init_means is None:
        init_means = kmeanspp_init(inp.M, k, seed, weights=inp.W)
    floor = _floor_value(inp.global_var, floor_ratio)
    counters = {"floor": 0, "reseed": 0, "cancel": inp.flags}

    # hard assignment to the nearest seed gives the starting parameters
    d2 = ((inp.M[:, None, :] - init_means[None, :, :]) ** 2).sum(axis=2) if n * k <= 4_000_000 \
        else np.stack([((inp.M - m) ** 2).sum(axis=1) for m in init_means], axis=1)
    labels = np.argmin(d2, axis=1)
    acc_w, acc_m, acc_s = np.zeros(k), np.zeros((k, d)), np.zeros((k, d))
    _hard_pass(inp.W, inp.M, inp.X2, inp.textbook, labels, acc_w, acc_m, acc_s)
    # until a density exists, the farthest input from its seed counts as worst fit
    lse = -((inp.M - init_means[labels]) ** 2).sum(axis=1)
    params = _m_step(acc_w, acc_m, acc_s, inp, kind, floor, lse, counters)

    trace = []
    converged = False
    n_iter = 0
    zero_v = inp.zero_v
    while True:
        acc_w, acc_m, acc_s = np.zeros(k), np.zeros((k, d)), np.zeros((k, d))
        ll = _em_pass(inp.W, inp.M, inp.V, zero_v, inp.X2, inp.textbook, params.logw,
                      params.means, params.variances, params.inv, params.const, acc_w, acc_m, acc_s, lse)
        trace.append(float(ll))
        if len(trace) > 1 and not trace[-1] - trace[-2] >= tol:
            converged = True
            break
        if n_iter >= max_iter:
            break
        params = _m_step(acc_w, acc_m, acc_s, inp, kind, floor, lse, counters)
        n_iter += 1
    return MixtureModel(params.weights, params.means + ref, params.variances, kind, n_iter=n_iter,
                        log_likelihood=trace[-1], trace=trace, converged=converged,
                        floor_flags=counters["floor"], reseed_flags=counters["reseed"],
                        cancellation_flags=counters["cancel"])


def em_fit_features(features, k: int, kind: str = "igmm", seed=None, max_iter: int = 100,
                    tol: float = 1e-7, init_means=None, floor_ratio: float = 1e-10) -> MixtureModel:
    """EM over BETULA cluster features (list or ``(weights, means, sq_dev)`` arrays).

    The reported ``log_likelihood`` is the weighted feature objective
    ``sum_f n_f log sum_c pi_c N(mu_f | mean_c, var_c + var_f)``.
    """
    W, M, S = _feature_arrays(features)
    return _run_em(_betula_inputs(W, M, S, kind), k, kind, seed, max_iter, tol, init_means,
                   floor_ratio)


def em_fit_birch_features(features, k: int, seed=None, max_iter: int = 100, tol: float = 1e-7,
                          init_means=None, floor_ratio: float = 1e-10) -> MixtureModel:
    """Spherical EM over BIRCH features, using ``SS/N - ||LS/N||^2`` wherever a variance is needed."""
    N, LS, SS = _birch_arrays(features)
    return _run_em(_birch_inputs(N, LS, SS), k, "igmm", seed, max_iter, tol, init_means,
                   floor_ratio)


def em_fit_points(X, k: int, kind: str = "igmm", backend: str = "stable", seed=None,
                  max_iter: int = 100, tol: float = 1e-7, sample_weight=None, init_means=None,
                  floor_ratio: float = 1e-10) -> MixtureModel:
    """Classic per-point EM with a stable or textbook variance accumulation."""
    if backend not in BACKENDS:
        raise ValueError(f"backend must be one of {BACKENDS}, got {backend!r}")
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    return _run_em(_point_inputs(X, sample_weight, kind, backend), k, kind, seed, max_iter, tol,
                   init_means, floor_ratio)


# evaluation ---------------------------------------------------------------------

def _model_params(model: MixtureModel) -> _Params:
    return _Params(np.asarray(model.weights, dtype=np.float64),
                   np.asarray(model.means, dtype=np.float64),
                   np.asarray(model.variances, dtype=np.float64))


def _score(model, X, input_variances=None):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.means.shape[1]:
        raise ValueError("points do not match the model dimensionality")
    V = np.zeros_like(X) if input_variances is None else np.ascontiguousarray(input_variances,
                                                                           dtype=np.float64)
    p = _model_params(model)
    resp = np.empty((X.shape[0], model.k))
    lse = np.empty(X.shape[0])
    _resp_matrix(X, V, not np.any(V), p.logw, p.means, p.variances, p.inv, p.const, resp, lse)
    return resp, lse


def responsibilities(model: MixtureModel, X, input_variances=None) -> np.ndarray:
    """Posterior component probabilities, one row per input."""
    return _score(model, X, input_variances)[0]


def score_samples(model: MixtureModel, X) -> np.ndarray:
    """Per-point log mixture density."""
    return _score(model, X)[1]


def log_likelihood(model: MixtureModel, X, sample_weight=None) -> LogLikelihood:
    """Total and per-point log-likelihood of points ``X`` under ``model``."""
    lse = score_samples(model, X)
    w = np.ones(lse.shape[0]) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    total = math.fsum(w * lse)
    return LogLikelihood(total, total / w.sum())
