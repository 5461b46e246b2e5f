"""Distances between empirical distributions, and confidence-interval coverage.

``dudley_1d`` is the exact bounded-Lipschitz distance between two empirical
measures on the line.  Restricted to the merged support x_1 < ... < x_K the
supremum over BL_1 is the linear program

    maximize    sum_i w_i h_i
    subject to  |h_i| <= 1,  |h_{i+1} - h_i| <= x_{i+1} - x_i

with w_i the difference of point masses.  The chain structure lets us solve
it exactly by dynamic programming over concave piecewise-linear value
functions (see ``chain_lp_max``).
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, EmptyError

SUBSAMPLE_CAP = 512
N_BOOT = 200


class EmpiricalSample:
    """An (N, d) matrix of draws; immutable, with cached per-column sort order."""

    def __init__(self, data, meta: Optional[dict] = None):
        arr = np.array(data, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise DimensionError(f"sample must be 1-D or 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise EmptyError("empty sample")
        if not np.all(np.isfinite(arr)):
            raise ValueError("sample contains non-finite entries")
        arr.setflags(write=False)
        self._data = arr
        self._sorted = {}
        self.meta = dict(meta or {})

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def N(self) -> int:
        return self._data.shape[0]

    @property
    def d(self) -> int:
        return self._data.shape[1]

    def column(self, j: int = 0) -> np.ndarray:
        return self._data[:, j]

    def sorted(self, j: int = 0) -> np.ndarray:
        if j not in self._sorted:
            self._sorted[j] = np.sort(self._data[:, j])
        return self._sorted[j]

    def __len__(self) -> int:
        return self.N

    def __repr__(self) -> str:
        return f"EmpiricalSample(N={self.N}, d={self.d})"


def as_sample(x) -> EmpiricalSample:
    return x if isinstance(x, EmpiricalSample) else EmpiricalSample(x)


@dataclass
class DistanceReport:
    metric: str
    value: float
    mc_stderr: float
    meta: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"metric": self.metric, "value": self.value, "stderr": self.mc_stderr, "meta": self.meta}


@dataclass
class CoverageReport:
    coverage: float
    stderr: float
    count: int
    band: tuple
    meta: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"coverage": self.coverage, "stderr": self.stderr, "count": self.count,
                "band": list(self.band), "meta": self.meta}


# -- exact chain LP ---------------------------------------------------------


def chain_lp_max(x, w) -> float:
    """Optimal value of  max sum w_i h_i  s.t. |h_i| <= 1, |h_{i+1} - h_i| <= x_{i+1} - x_i.

    The partial value function f_i(h) (best objective over h_1..h_i with
    h_i = h) is concave and piecewise linear on [-1, 1].  We store it as its
    value at h = -1 plus a list of (slope, length) pieces sorted by slope.
    Relaxing the Lipschitz link by a gap g widens the argmax plateau by 2g
    and trims g off each end; adding w_i h shifts every slope by w_i.
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    if x.shape != w.shape or x.ndim != 1:
        raise DimensionError("x and w must be 1-D arrays of equal length")
    if x.size == 0:
        return 0.0
    gaps = np.diff(x)
    if np.any(gaps <= 0):
        raise ValueError("support points must be strictly increasing")

    # pieces kept in ascending stored-slope order: list end is the left end of [-1, 1]
    slopes = [0.0]
    lengths = [2.0]
    front = 0  # lazily deleted pieces at the right end of [-1, 1]
    offset = 0.0  # actual slope = stored slope + offset
    base = 0.0  # f(-1)

    for i in range(x.size):
        if i:
            g = float(gaps[i - 1])
            if g >= 2.0:
                peak = base + sum(max(0.0, s + offset) * ln for s, ln in zip(slopes[front:], lengths[front:]))
                slopes, lengths, front, base = [-offset], [2.0], 0, peak
            else:
                key = -offset
                k = bisect.bisect_left(slopes, key, front)
                if k < len(slopes) and slopes[k] == key:
                    lengths[k] += 2.0 * g
                else:
                    slopes.insert(k, key)
                    lengths.insert(k, 2.0 * g)
                # trim g from the left end (largest slopes), accumulating f(-1)
                need = g
                while need > 0.0:
                    take = min(need, lengths[-1])
                    base += (slopes[-1] + offset) * take
                    need -= take
                    if take >= lengths[-1]:
                        slopes.pop()
                        lengths.pop()
                    else:
                        lengths[-1] -= take
                        need = 0.0
                # trim g from the right end (smallest slopes)
                need = g
                while need > 0.0:
                    take = min(need, lengths[front])
                    need -= take
                    if take >= lengths[front]:
                        front += 1
                    else:
                        lengths[front] -= take
                        need = 0.0
                if front > 64:
                    del slopes[:front], lengths[:front]
                    front = 0
        offset += float(w[i])
        base -= float(w[i])

    return base + sum(max(0.0, s + offset) * ln for s, ln in zip(slopes[front:], lengths[front:]))


def _support_weights(a: np.ndarray, b: np.ndarray):
    xs = np.concatenate([a, b])
    wts = np.concatenate([np.full(a.size, 1.0 / a.size), np.full(b.size, -1.0 / b.size)])
    uniq, inv = np.unique(xs, return_inverse=True)
    w = np.zeros(uniq.size)
    np.add.at(w, inv, wts)
    return uniq, w


def _dudley_values(a: np.ndarray, b: np.ndarray) -> float:
    x, w = _support_weights(a, b)
    return max(0.0, chain_lp_max(x, w))


def _subsample_rows(X: np.ndarray, cap: int, seed: int, tag: int) -> np.ndarray:
    """Random cap-row subset.  Both sides of a comparison draw indices from the
    same stream (common random numbers), so identical inputs stay identical."""
    if X.shape[0] <= cap:
        return X
    idx = np.random.default_rng([seed, tag, 0x5B]).choice(X.shape[0], size=cap, replace=False)
    return X[np.sort(idx)]


def _bootstrap(stat: Callable[..., float], arrays: Sequence[np.ndarray], n_boot: int,
               rng: np.random.Generator) -> float:
    if n_boot <= 1:
        return 0.0
    reps = np.empty(n_boot)
    for k in range(n_boot):
        reps[k] = stat(*[a[rng.integers(0, a.size, a.size)] for a in arrays])
    return float(np.std(reps, ddof=1))


def _one_d(s: EmpiricalSample, name: str) -> np.ndarray:
    if s.d != 1:
        raise DimensionError(f"{name} must be one-dimensional, got d={s.d}")
    return s.column(0)


def dudley_1d(p, q, cap: int = SUBSAMPLE_CAP, seed: int = 0, n_boot: int = N_BOOT) -> DistanceReport:
    p, q = as_sample(p), as_sample(q)
    a, b = _one_d(p, "p"), _one_d(q, "q")
    rng = np.random.default_rng([seed, 0xD0D])
    a2, b2 = _subsample_rows(a, cap, seed, 0xD0D), _subsample_rows(b, cap, seed, 0xD0D)
    value = _dudley_values(a2, b2)
    stderr = _bootstrap(_dudley_values, [a2, b2], n_boot, rng)
    meta = {"n_p": p.N, "n_q": q.N, "used_p": int(a2.size), "used_q": int(b2.size), "cap": cap,
            "seed": seed, "n_boot": n_boot, "subsampled": bool(a2.size < a.size or b2.size < b.size)}
    return DistanceReport("dudley_1d", min(value, 2.0), stderr, meta)


def _ks_cdf(sorted_x: np.ndarray, cdf: Callable) -> float:
    n = sorted_x.size
    F = np.asarray(cdf(sorted_x), dtype=float)
    upper = np.arange(1, n + 1) / n - F
    lower = F - np.arange(0, n) / n
    return float(max(upper.max(), lower.max(), 0.0))


def _ks_two(a_sorted: np.ndarray, b_sorted: np.ndarray) -> float:
    grid = np.concatenate([a_sorted, b_sorted])
    fa = np.searchsorted(a_sorted, grid, side="right") / a_sorted.size
    fb = np.searchsorted(b_sorted, grid, side="right") / b_sorted.size
    return float(np.max(np.abs(fa - fb)))


def ks_distance(p, ref: Union[Callable, EmpiricalSample, np.ndarray], seed: int = 0,
                n_boot: int = N_BOOT) -> DistanceReport:
    """Sup-norm distance between the empirical CDF of ``p`` and a CDF or second sample."""
    p = as_sample(p)
    a = _one_d(p, "p")
    rng = np.random.default_rng([seed, 0x15])
    if callable(ref):
        value = _ks_cdf(p.sorted(), ref)
        stderr = _bootstrap(lambda x: _ks_cdf(np.sort(x), ref), [a], n_boot, rng)
        meta = {"n_p": p.N, "reference": "cdf", "seed": seed, "n_boot": n_boot}
    else:
        q = as_sample(ref)
        b = _one_d(q, "ref")
        value = _ks_two(p.sorted(), q.sorted())
        stderr = _bootstrap(lambda x, y: _ks_two(np.sort(x), np.sort(y)), [a, b], n_boot, rng)
        meta = {"n_p": p.N, "n_q": q.N, "reference": "sample", "seed": seed, "n_boot": n_boot}
    return DistanceReport("ks", min(max(value, 0.0), 1.0), stderr, meta)


def _directions(rng: np.random.Generator, k: int, d: int) -> np.ndarray:
    u = rng.standard_normal((k, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def sliced_bl(p, q, n_projections: int = 32, seed: int = 0, cap: int = SUBSAMPLE_CAP,
              n_boot: int = N_BOOT) -> DistanceReport:
    """Max over random unit directions u of dudley_1d(p.u, q.u): a lower bound on d_BL."""
    p, q = as_sample(p), as_sample(q)
    if p.d != q.d:
        raise DimensionError(f"dimension mismatch: {p.d} vs {q.d}")
    if p.d < 2:
        raise DimensionError("sliced_bl needs d >= 2; use dudley_1d")
    rng = np.random.default_rng([seed, 0x51])
    meta = {"n_p": p.N, "n_q": q.N, "projections": n_projections, "seed": seed, "n_boot": n_boot,
            "cap": cap, "kind": "lower bound"}
    if n_projections <= 0:
        meta["warning"] = "no projections; empty max taken as 0"
        return DistanceReport("sliced_bl", 0.0, 0.0, meta)
    U = _directions(rng, n_projections, p.d)
    A = _subsample_rows(p.data, cap, seed, 0x51)
    B = _subsample_rows(q.data, cap, seed, 0x51)

    def stat(ai, bi):
        pa, pb = A[ai] @ U.T, B[bi] @ U.T
        return max(_dudley_values(pa[:, k], pb[:, k]) for k in range(U.shape[0]))

    ia, ib = np.arange(A.shape[0]), np.arange(B.shape[0])
    value = stat(ia, ib)
    stderr = _bootstrap(stat, [ia, ib], n_boot, rng)
    meta.update(used_p=int(A.shape[0]), used_q=int(B.shape[0]))
    return DistanceReport("sliced_bl", min(value, 2.0), stderr, meta)


def coverage(intervals, truth: float, level: float = 0.95) -> CoverageReport:
    iv = np.asarray(intervals, dtype=float).reshape(-1, 2)
    if iv.shape[0] == 0:
        raise EmptyError("no intervals")
    if np.any(iv[:, 0] > iv[:, 1]):
        raise ValueError("interval with lo > hi")
    hit = (iv[:, 0] <= truth) & (truth <= iv[:, 1])
    R = iv.shape[0]
    p = float(hit.mean())
    se = math.sqrt(p * (1.0 - p) / R)
    from scipy.stats import norm

    z = float(norm.ppf(0.5 + level / 2))
    return CoverageReport(p, se, R, (max(0.0, p - z * se), min(1.0, p + z * se)))
