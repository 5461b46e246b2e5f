"""The normalized first-order Taylor remainder

    Delta(t, m) = || E(m) (phi(t) - phi(m) - D(m)(t - m)) || / || t - m ||

with grid scans, a sampled uniform envelope and divergence certificates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from ._parallel import ordered_map
from .errors import DegenerateError, DimensionError, DomainError, RankError, UnknownBuiltin
from .funcspace import ROW_NORM_FLOOR, PhiMap, Region, StepRule, as_point, builtin

DEGENERATE_DIST = 1e-12

# per-cell status codes
VALID = 0
OUTSIDE_DOMAIN = 1
DEGENERATE = 2
_RANK = 3  # folded into DEGENERATE for fields

MASK_LABELS = {VALID: "valid", OUTSIDE_DOMAIN: "outside_domain", DEGENERATE: "degenerate"}


def _jacobians(phi: PhiMap, m: np.ndarray, step_rule: StepRule):
    """Batched D(m): returns (D of shape (N, d_out, d_in), ok mask)."""
    n, d = m.shape
    if step_rule.prefer_analytic and phi.jacobian_analytic is not None:
        D = np.empty((n, phi.d_out, d))
        with np.errstate(all="ignore"):
            if n:
                D[:] = np.asarray(phi.jacobian_analytic(m), dtype=float).reshape(n, phi.d_out, d)
        return D, np.all(np.isfinite(D), axis=(1, 2))
    h = step_rule.steps(m)
    D = np.empty((n, phi.d_out, d))
    ok = np.ones(n, dtype=bool)
    for j in range(d):
        up = m.copy()
        dn = m.copy()
        up[:, j] += h[:, j]
        dn[:, j] -= h[:, j]
        ok &= (phi.region(up) == Region.INSIDE) & (phi.region(dn) == Region.INSIDE)
        with np.errstate(all="ignore"):
            fu = np.asarray(phi.func(up), dtype=float)
            fd = np.asarray(phi.func(dn), dtype=float)
        D[:, :, j] = (fu - fd) / (up[:, j] - dn[:, j])[:, None]
    return D, ok & np.all(np.isfinite(D), axis=(1, 2))


def delta_batch(phi: PhiMap, t, m, step_rule: StepRule = StepRule(), components: bool = False):
    """Vectorized Delta over paired rows of ``t`` and ``m``.

    Returns ``(values, codes)``; values are NaN wherever ``codes != VALID``.
    With ``components=True`` also returns the per-output-coordinate remainders.
    """
    t = np.asarray(t, dtype=float).reshape(-1, phi.d_in)
    m = np.asarray(m, dtype=float).reshape(-1, phi.d_in)
    if t.shape != m.shape:
        t, m = np.broadcast_arrays(t, m)
        t, m = t.copy(), m.copy()
    n = t.shape[0]
    codes = np.full(n, VALID, dtype=int)
    codes[(phi.region(t) != Region.INSIDE) | (phi.region(m) != Region.INSIDE)] = OUTSIDE_DOMAIN
    diff = t - m
    dist = np.linalg.norm(diff, axis=1)
    codes[(codes == VALID) & (dist < DEGENERATE_DIST)] = DEGENERATE

    live = codes == VALID
    values = np.full(n, np.nan)
    per = np.full((n, phi.d_out), np.nan)
    if live.any():
        tl, ml, dl = t[live], m[live], diff[live]
        D, jac_ok = _jacobians(phi, ml, step_rule)
        with np.errstate(all="ignore"):
            ft = np.asarray(phi.func(tl), dtype=float).reshape(-1, phi.d_out)
            fm = np.asarray(phi.func(ml), dtype=float).reshape(-1, phi.d_out)
            row_norms = np.linalg.norm(D, axis=2)
            rem = ft - fm - np.einsum("nij,nj->ni", D, dl)
            scaled = rem / row_norms
            vals = np.linalg.norm(scaled, axis=1) / dist[live]
        sub = np.full(ml.shape[0], VALID)
        finite_f = np.all(np.isfinite(ft), axis=1) & np.all(np.isfinite(fm), axis=1)
        sub[~(jac_ok & finite_f)] = OUTSIDE_DOMAIN
        sub[(sub == VALID) & np.any(~(row_norms >= ROW_NORM_FLOOR), axis=1)] = _RANK
        sub[(sub == VALID) & ~np.isfinite(vals)] = OUTSIDE_DOMAIN
        codes[live] = sub
        good = sub == VALID
        idx = np.flatnonzero(live)[good]
        values[idx] = vals[good]
        per[idx] = np.abs(scaled[good]) / dist[idx][:, None]
    if components:
        return values, codes, per
    return values, codes


def _raise_for(code: int, phi: PhiMap, t, m) -> None:
    if code == OUTSIDE_DOMAIN:
        raise DomainError(f"{phi.name}: (t={np.ravel(t).tolist()}, m={np.ravel(m).tolist()}) leaves the domain")
    if code == DEGENERATE:
        raise DegenerateError(f"||t - m|| < {DEGENERATE_DIST:g}")
    if code == _RANK:
        raise RankError(f"{phi.name}: D(m) loses row rank at m={np.ravel(m).tolist()}")


def delta(phi: PhiMap, t, m, step_rule: StepRule = StepRule()) -> float:
    t = as_point(t, phi.d_in)
    m = as_point(m, phi.d_in)
    vals, codes = delta_batch(phi, t[None, :], m[None, :], step_rule)
    _raise_for(int(codes[0]), phi, t, m)
    return float(vals[0])


def delta_components(phi: PhiMap, t, m, step_rule: StepRule = StepRule()) -> np.ndarray:
    """Per-output Delta_i (debug aid); the Euclidean norm of this vector is ``delta``."""
    t = as_point(t, phi.d_in)
    m = as_point(m, phi.d_in)
    _, codes, per = delta_batch(phi, t[None, :], m[None, :], step_rule, components=True)
    _raise_for(int(codes[0]), phi, t, m)
    return per[0]


# -- closed forms -----------------------------------------------------------


def _cf_reciprocal(t, m):
    return abs((t[0] - m[0]) / t[0])


def _cf_square(t, m):
    return abs((t[0] - m[0]) / (2.0 * m[0]))


def _cf_absval(t, m):
    return float(t[0] * m[0] <= 0) * 2.0 * abs(t[0]) / abs(t[0] - m[0])


def _cf_sqrt(t, m):
    rt, rm = math.sqrt(t[0]), math.sqrt(m[0])
    return abs((rm - rt) / (rm + rt))


def _cf_iv_ratio(t, m):
    a, b = t[0] - m[0], t[1] - m[1]
    norm_m = math.hypot(m[0], m[1])
    return abs(b / t[1]) * abs(m[1] * a - m[0] * b) / (norm_m * math.hypot(a, b))


CLOSED_FORMS = {
    "reciprocal": _cf_reciprocal,
    "square": _cf_square,
    "absval": _cf_absval,
    "sqrt": _cf_sqrt,
    "iv_ratio": _cf_iv_ratio,
}


def delta_analytic(builtin_name: str, t, m) -> float:
    if builtin_name not in CLOSED_FORMS:
        raise UnknownBuiltin(builtin_name)
    phi = builtin(builtin_name)
    t = as_point(t, phi.d_in)
    m = as_point(m, phi.d_in)
    if phi.domain_pred(t) is not Region.INSIDE or phi.domain_pred(m) is not Region.INSIDE:
        raise DomainError(f"{builtin_name}: (t={t.tolist()}, m={m.tolist()}) leaves the domain")
    if np.linalg.norm(t - m) < DEGENERATE_DIST:
        raise DegenerateError(f"||t - m|| < {DEGENERATE_DIST:g}")
    return float(CLOSED_FORMS[builtin_name](t, m))


# -- grids and scans --------------------------------------------------------


@dataclass(frozen=True)
class Axis:
    lo: float
    hi: float
    count: int
    spacing: str = "linear"

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"axis needs lo < hi, got {self.lo} .. {self.hi}")
        if int(self.count) != self.count or self.count < 2:
            raise ValueError(f"axis count must be an integer >= 2, got {self.count}")
        if self.spacing not in ("linear", "log"):
            raise ValueError(f"unknown spacing {self.spacing!r}")
        if self.spacing == "log" and self.lo <= 0:
            raise ValueError("log spacing requires lo > 0")

    def points(self) -> np.ndarray:
        if self.spacing == "log":
            return np.geomspace(self.lo, self.hi, self.count)
        return np.linspace(self.lo, self.hi, self.count)


@dataclass(frozen=True)
class GridSpec:
    axes: tuple

    @classmethod
    def uniform(cls, lo, hi, count, dim: int = 1, spacing: str = "linear") -> "GridSpec":
        return cls(tuple(Axis(lo, hi, count, spacing) for _ in range(dim)))

    @property
    def dim(self) -> int:
        return len(self.axes)

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*[a.points() for a in self.axes], indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)


@dataclass
class RemainderField:
    t_grid: GridSpec
    m_grid: GridSpec
    t_points: np.ndarray
    m_points: np.ndarray
    values: np.ndarray  # (n_t, n_m)
    mask: np.ndarray  # (n_t, n_m), VALID / OUTSIDE_DOMAIN / DEGENERATE
    name: str = ""

    @property
    def valid(self) -> np.ndarray:
        return self.mask == VALID

    def max(self) -> float:
        return float(np.max(self.values[self.valid])) if self.valid.any() else float("nan")

    def rows(self):
        """(t..., m..., delta, mask) per cell, t-major order."""
        for i, tp in enumerate(self.t_points):
            for j, mp in enumerate(self.m_points):
                yield (*tp.tolist(), *mp.tolist(), float(self.values[i, j]), MASK_LABELS[int(self.mask[i, j])])


def scan(phi: PhiMap, t_grid: GridSpec, m_grid: GridSpec, step_rule: StepRule = StepRule(),
         workers: Optional[int] = None) -> RemainderField:
    if t_grid.dim != phi.d_in or m_grid.dim != phi.d_in:
        raise DimensionError(f"{phi.name} needs {phi.d_in}-dimensional grids")
    tp, mp = t_grid.points(), m_grid.points()
    nt, nm = len(tp), len(mp)

    def column_block(j0: int):
        j1 = min(nm, j0 + 256)
        mm = np.repeat(mp[j0:j1], nt, axis=0)
        tt = np.tile(tp, (j1 - j0, 1))
        v, c = delta_batch(phi, tt, mm, step_rule)
        return v.reshape(j1 - j0, nt).T, c.reshape(j1 - j0, nt).T

    blocks = ordered_map(column_block, list(range(0, nm, 256)), workers)
    values = np.concatenate([b[0] for b in blocks], axis=1)
    codes = np.concatenate([b[1] for b in blocks], axis=1)
    codes[codes == _RANK] = DEGENERATE
    return RemainderField(t_grid, m_grid, tp, mp, values, codes, phi.name)


# -- envelope ---------------------------------------------------------------


@dataclass
class Envelope:
    eps: list
    delta_hat: list
    meta: dict = field(default_factory=dict)

    def pairs(self):
        return list(zip(self.eps, self.delta_hat))


def _unit_directions(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    if d == 1:
        return rng.choice([-1.0, 1.0], size=(n, 1))
    u = rng.standard_normal((n, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _box_probe(lo: np.ndarray, hi: np.ndarray, per_axis: int = 33) -> np.ndarray:
    """Lattice used to vet a box: corners, an even grid, and coordinate zeros
    inside the box (where every catalog singularity sits)."""
    per_axis = max(2, min(per_axis, int(round(1e5 ** (1 / lo.size)))))
    axes = []
    for a, b in zip(lo, hi):
        pts = np.linspace(a, b, per_axis)
        if a < 0 < b:
            pts = np.append(pts, 0.0)
        axes.append(pts)
    return np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)


def envelope(phi: PhiMap, domain_box, eps_list: Sequence[float], samples_per_eps: int = 20000,
             seed: int = 0, step_rule: StepRule = StepRule()) -> Envelope:
    """Sampled lower bound on sup { Delta(t, m) : m in box, ||t - m|| <= eps }.

    Samples for a smaller eps also count toward every larger eps, so the
    reported curve is monotone in eps.
    """
    lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in domain_box)
    if lo.shape != (phi.d_in,) or hi.shape != (phi.d_in,) or np.any(lo > hi):
        raise DimensionError("domain_box must be (lo, hi) with lo <= hi per coordinate")
    eps = [float(e) for e in eps_list]
    if not eps or any(e <= 0 for e in eps) or any(a <= b for a, b in zip(eps, eps[1:])):
        raise ValueError("eps_list must be strictly decreasing positive values")

    sobol = qmc.Halton(phi.d_in, scramble=True, seed=np.random.default_rng([seed, 0]))
    if np.any(phi.region(_box_probe(lo, hi)) != Region.INSIDE):
        raise DomainError(f"{phi.name}: domain box [{lo.tolist()}, {hi.tolist()}] leaves the domain")

    best_by_eps = []
    skipped = 0
    for k, e in enumerate(eps):
        rng = np.random.default_rng([seed, k + 1])
        m = lo + (hi - lo) * sobol.random(samples_per_eps)
        if np.any(phi.region(m) != Region.INSIDE):
            raise DomainError(f"{phi.name}: domain box contains points outside the domain")
        r = e * (1.0 - rng.random((samples_per_eps, 1)))  # (0, e]
        t = m + r * _unit_directions(rng, samples_per_eps, phi.d_in)
        vals, codes = delta_batch(phi, t, m, step_rule)
        skipped += int(np.count_nonzero(codes != VALID))
        best_by_eps.append(float(np.max(vals[codes == VALID])) if np.any(codes == VALID) else 0.0)

    # pooled: samples drawn at radius <= eps_j also bound every eps_i >= eps_j
    delta_hat = [max(best_by_eps[i:]) for i in range(len(eps))]
    meta = {"samples_per_eps": samples_per_eps, "seed": seed, "skipped": skipped,
            "box": [lo.tolist(), hi.tolist()], "kind": "lower bound on sup"}
    return Envelope(eps, delta_hat, meta)


# -- divergence certificates ------------------------------------------------


@dataclass(frozen=True)
class DivergenceCertificate:
    phi: PhiMap
    r_rule: Callable[[float], float]
    eps_rule: Callable[[float], float]
    m_rule: Callable[[float], np.ndarray]
    set_A: tuple  # (lo, hi) of an open axis-aligned box
    n_list: tuple
    grid_per_axis: int = 17
    margin_rule: Optional[Callable[[float], float]] = None
    label: str = ""

    def __post_init__(self):
        lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in self.set_A)
        if lo.shape != (self.phi.d_in,) or hi.shape != lo.shape or np.any(lo >= hi):
            raise ValueError("set_A must be an open box (lo, hi) with lo < hi in every coordinate")
        # distance from the origin to the closed box
        gap = np.linalg.norm(np.maximum(0.0, np.maximum(lo, -hi)))
        if gap <= 0:
            raise ValueError("the closure of set_A must exclude the origin")
        if not self.n_list:
            raise ValueError("n_list is empty")
        eps = [self.eps_rule(n) for n in sorted(self.n_list)]
        if len(eps) > 1 and not all(a < b for a, b in zip(eps, eps[1:])):
            raise ValueError("eps_rule must increase along n_list")
        if self.grid_per_axis < 1:
            raise ValueError("grid_per_axis must be positive")

    def lattice(self) -> np.ndarray:
        lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in self.set_A)
        k = np.arange(1, self.grid_per_axis + 1) / (self.grid_per_axis + 1)
        axes = [a + k * (b - a) for a, b in zip(lo, hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)


@dataclass
class Verdict:
    n: int
    holds: bool
    eps_prime: float
    min_delta: float
    witness: Optional[list] = None
    reason: str = ""
    margin: Optional[float] = None
    margin_holds: Optional[bool] = None

    def as_dict(self) -> dict:
        return {"n": self.n, "holds": self.holds, "eps_prime": self.eps_prime, "min_delta": self.min_delta,
                "witness": self.witness, "reason": self.reason, "margin": self.margin,
                "margin_holds": self.margin_holds}


def check_divergence(cert: DivergenceCertificate, step_rule: StepRule = StepRule()) -> list:
    s = cert.lattice()
    out = []
    for n in cert.n_list:
        r = float(cert.r_rule(n))
        eps_n = float(cert.eps_rule(n))
        m = np.asarray(cert.m_rule(n), dtype=float).reshape(1, cert.phi.d_in)
        t = m + s / r
        vals, codes = delta_batch(cert.phi, t, np.repeat(m, len(s), axis=0), step_rule)
        bad_domain = codes != VALID
        below = np.where(bad_domain, True, ~(vals >= eps_n))
        min_delta = float(np.min(vals[~bad_domain])) if np.any(~bad_domain) else float("nan")
        v = Verdict(int(n), not below.any(), eps_n, min_delta)
        if below.any():
            i = int(np.flatnonzero(below)[0])
            v.witness = s[i].tolist()
            v.reason = (f"lattice point leaves the domain ({MASK_LABELS.get(int(codes[i]), 'degenerate')})"
                        if bad_domain[i] else f"Delta={vals[i]:.6g} < eps'={eps_n:.6g}")
        if cert.margin_rule is not None:
            v.margin = float(cert.margin_rule(n))
            v.margin_holds = bool(not bad_domain.any() and np.all(vals >= v.margin))
        out.append(v)
    return out


def _sqrt(n):
    return math.sqrt(n)


DEFAULT_N_LIST = (10**2, 10**4, 10**6)


def divergence_preset(name: str, n_list: Sequence[int] = DEFAULT_N_LIST, grid_per_axis: int = 17) -> DivergenceCertificate:
    """Sequences printed for 1/t, t^2 and the IV ratio (plus |t| as a known non-example)."""
    n_list = tuple(int(n) for n in n_list)
    if name == "reciprocal":
        return DivergenceCertificate(builtin("reciprocal"), _sqrt, _sqrt,
                                     lambda n: np.array([1 / math.sqrt(n) + 1 / n]),
                                     ((-2.0,), (-1.0,)), n_list, grid_per_axis, label=name)
    if name == "square":
        return DivergenceCertificate(builtin("square"), _sqrt, lambda n: math.sqrt(n) / 2,
                                     lambda n: np.array([1 / n]), ((1.0,), (2.0,)), n_list, grid_per_axis,
                                     label=name)
    if name == "iv":
        return DivergenceCertificate(builtin("iv_ratio"), _sqrt, _sqrt,
                                     lambda n: np.array([1 + 1 / (2 * math.sqrt(n)), 1 / math.sqrt(n)]),
                                     ((-0.5, -2.0), (0.5, -1.0)), n_list, grid_per_axis,
                                     margin_rule=lambda n: 1.5 * math.sqrt(n), label=name)
    if name == "absval":
        return DivergenceCertificate(builtin("absval"), _sqrt, _sqrt, lambda n: np.array([1 / n]),
                                     ((-2.0,), (-1.0,)), n_list, grid_per_axis, label=name)
    raise UnknownBuiltin(f"no divergence preset {name!r}")


DIVERGENCE_PRESETS = ("reciprocal", "square", "iv", "absval")
