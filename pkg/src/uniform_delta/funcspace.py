"""Maps phi: R^d_in -> R^d_out, their Jacobians and the row normalizer E(m).

Every map works on batches: ``phi.func`` takes an ``(N, d_in)`` array and
returns ``(N, d_out)``; ``phi.region`` returns one region code per row.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, RankError, UnknownBuiltin

EPS = np.finfo(float).eps
ROW_NORM_FLOOR = 1e-300
BOUNDARY_BAND = 1e-8


class Region(enum.IntEnum):
    INSIDE = 0
    BOUNDARY = 1
    OUTSIDE = 2


@dataclass(frozen=True)
class PhiMap:
    name: str
    d_in: int
    d_out: int
    func: Callable[[np.ndarray], np.ndarray]
    region: Callable[[np.ndarray], np.ndarray]
    jacobian_analytic: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def domain_pred(self, t) -> Region:
        t = as_point(t, self.d_in)
        return Region(int(self.region(t[None, :])[0]))

    def __call__(self, t):
        return eval_phi(self, t)


@dataclass(frozen=True)
class StepRule:
    """Central-difference step h_j = rel * max(1, |m_j|)."""

    rel: float = EPS ** (1.0 / 3.0)
    prefer_analytic: bool = True

    def steps(self, m: np.ndarray) -> np.ndarray:
        return self.rel * np.maximum(1.0, np.abs(m))


FINITE_DIFF = StepRule(prefer_analytic=False)


@dataclass(frozen=True)
class NormalizedJacobian:
    D: np.ndarray
    E: np.ndarray
    ED: np.ndarray


def as_point(t, d: int) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(t, dtype=float))
    if arr.shape != (d,):
        from .errors import DimensionError

        raise DimensionError(f"expected a point of dimension {d}, got shape {arr.shape}")
    return arr


def eval_phi(phi: PhiMap, t) -> np.ndarray:
    t = as_point(t, phi.d_in)
    where = phi.domain_pred(t)
    if where is not Region.INSIDE:
        raise DomainError(f"{phi.name}: t={t.tolist()} is {where.name.lower()}")
    out = np.asarray(phi.func(t[None, :]), dtype=float)[0]
    if not np.all(np.isfinite(out)):
        raise DomainError(f"{phi.name}: non-finite value at t={t.tolist()}")
    return out


def eval_batch(phi: PhiMap, t: np.ndarray):
    """Evaluate on rows of ``t``; returns (values, inside_mask). Rows not inside are NaN."""
    t = np.asarray(t, dtype=float).reshape(-1, phi.d_in)
    inside = phi.region(t) == Region.INSIDE
    out = np.full((t.shape[0], phi.d_out), np.nan)
    if inside.any():
        with np.errstate(all="ignore"):
            out[inside] = phi.func(t[inside])
    ok = inside & np.all(np.isfinite(out), axis=1)
    return out, ok


def jacobian(phi: PhiMap, m, step_rule: StepRule = StepRule()) -> np.ndarray:
    m = as_point(m, phi.d_in)
    if step_rule.prefer_analytic and phi.jacobian_analytic is not None:
        if phi.domain_pred(m) is not Region.INSIDE:
            raise DomainError(f"{phi.name}: m={m.tolist()} not inside domain")
        return np.asarray(phi.jacobian_analytic(m[None, :]), dtype=float)[0].reshape(phi.d_out, phi.d_in)
    h = step_rule.steps(m)
    stencil = np.repeat(m[None, :], 2 * phi.d_in, axis=0)
    idx = np.arange(phi.d_in)
    stencil[2 * idx, idx] += h
    stencil[2 * idx + 1, idx] -= h
    regions = phi.region(np.vstack([m[None, :], stencil]))
    if np.any(regions != Region.INSIDE):
        raise DomainError(f"{phi.name}: difference stencil around m={m.tolist()} leaves the domain")
    vals = np.asarray(phi.func(stencil), dtype=float)
    # exact representable step so that (m+h)-(m-h) is what was actually used
    span = stencil[2 * idx, idx] - stencil[2 * idx + 1, idx]
    return ((vals[0::2] - vals[1::2]) / span[:, None]).T


def normalizer(D, floor: float = ROW_NORM_FLOOR) -> NormalizedJacobian:
    D = np.atleast_2d(np.asarray(D, dtype=float))
    norms = np.linalg.norm(D, axis=1)
    if np.any(~(norms >= floor)):
        bad = int(np.argmin(np.where(np.isnan(norms), -1.0, norms)))
        raise RankError(f"row {bad} of D has norm {norms[bad]:.3g} < {floor:g}")
    E = np.diag(1.0 / norms)
    return NormalizedJacobian(D=D, E=E, ED=D / norms[:, None])


def normalized_jacobian(phi: PhiMap, m, step_rule: StepRule = StepRule()) -> NormalizedJacobian:
    return normalizer(jacobian(phi, m, step_rule))


# -- built-in catalog -------------------------------------------------------


def _band(x: np.ndarray, band: float = BOUNDARY_BAND) -> np.ndarray:
    """Region codes for a map singular at x == 0: exact zero outside, |x| < band boundary."""
    out = np.where(np.abs(x) < band, Region.BOUNDARY, Region.INSIDE)
    return np.where(x == 0.0, Region.OUTSIDE, out).astype(int)


def _everywhere(t: np.ndarray) -> np.ndarray:
    return np.zeros(t.shape[0], dtype=int)


def _kinks(t: np.ndarray) -> np.ndarray:
    near = np.any(np.abs(t) < BOUNDARY_BAND, axis=1)
    return np.where(near, Region.BOUNDARY, Region.INSIDE).astype(int)


def _sqrt_region(t: np.ndarray) -> np.ndarray:
    x = t[:, 0]
    return np.select([x < 0, x == 0], [Region.OUTSIDE, Region.BOUNDARY], Region.INSIDE).astype(int)


def _reciprocal() -> PhiMap:
    return PhiMap(
        "reciprocal", 1, 1,
        func=lambda t: 1.0 / t,
        region=lambda t: _band(t[:, 0]),
        jacobian_analytic=lambda t: (-1.0 / t**2)[:, :, None],
    )


def _square() -> PhiMap:
    return PhiMap(
        "square", 1, 1,
        func=lambda t: t**2,
        region=_everywhere,
        jacobian_analytic=lambda t: (2.0 * t)[:, :, None],
    )


def _absval() -> PhiMap:
    return PhiMap(
        "absval", 1, 1,
        func=np.abs,
        region=_kinks,
        jacobian_analytic=lambda t: np.sign(t)[:, :, None],
    )


def _sqrt() -> PhiMap:
    return PhiMap(
        "sqrt", 1, 1,
        func=np.sqrt,
        region=_sqrt_region,
        jacobian_analytic=lambda t: (0.5 / np.sqrt(t))[:, :, None],
    )


def _iv_ratio_jac(t: np.ndarray) -> np.ndarray:
    t1, t2 = t[:, 0], t[:, 1]
    return np.stack([1.0 / t2, -t1 / t2**2], axis=1)[:, None, :]


def _iv_ratio() -> PhiMap:
    return PhiMap(
        "iv_ratio", 2, 1,
        func=lambda t: (t[:, 0] / t[:, 1])[:, None],
        region=lambda t: _band(t[:, 1]),
        jacobian_analytic=_iv_ratio_jac,
    )


def _mineq_phi1_jac(t: np.ndarray) -> np.ndarray:
    n = t.shape[0]
    out = np.zeros((n, 2, 2))
    out[:, 0, 0] = -(t[:, 0] < 0)
    out[:, 1, 1] = -(t[:, 1] < 0)
    return out


def _mineq_phi1() -> PhiMap:
    return PhiMap(
        "mineq_phi1", 2, 2,
        func=lambda t: np.maximum(-t, 0.0),
        region=_kinks,
        jacobian_analytic=_mineq_phi1_jac,
    )


def _mineq_phi2() -> PhiMap:
    return PhiMap(
        "mineq_phi2", 2, 1,
        func=lambda t: np.sum(np.where(t <= 0, t**2, 0.0), axis=1, keepdims=True),
        region=_everywhere,
        jacobian_analytic=lambda t: np.where(t < 0, 2.0 * t, 0.0)[:, None, :],
    )


_FACTORIES = {
    "reciprocal": _reciprocal,
    "square": _square,
    "absval": _absval,
    "sqrt": _sqrt,
    "iv_ratio": _iv_ratio,
    "mineq_phi1": _mineq_phi1,
    "mineq_phi2": _mineq_phi2,
}

BUILTINS = tuple(_FACTORIES) + ("mindist",)


def builtin(name: str, **params) -> PhiMap:
    """Look up a catalog map. ``mindist`` takes ``model=`` (a MinDistModel or catalog name)."""
    if name == "mindist":
        from .applications import mindist_phi

        return mindist_phi(params.get("model", "parabola"))
    try:
        return _FACTORIES[name]()
    except KeyError:
        raise UnknownBuiltin(name) from None


def affine(A, b=None, name: str = "affine") -> PhiMap:
    """phi(t) = A t + b; handy as a zero-remainder reference."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=float).reshape(A.shape[0])
    return PhiMap(
        name, A.shape[1], A.shape[0],
        func=lambda t: t @ A.T + b,
        region=_everywhere,
        jacobian_analytic=lambda t: np.broadcast_to(A, (t.shape[0],) + A.shape).copy(),
    )


def scaled(phi: PhiMap, c: float) -> PhiMap:
    """c * phi, same domain."""
    jac = None
    if phi.jacobian_analytic is not None:
        jac = lambda t: c * phi.jacobian_analytic(t)  # noqa: E731
    return PhiMap(f"{c:g}*{phi.name}", phi.d_in, phi.d_out,
                  func=lambda t: c * phi.func(t), region=phi.region, jacobian_analytic=jac)


def without_analytic(phi: PhiMap) -> PhiMap:
    return PhiMap(phi.name, phi.d_in, phi.d_out, phi.func, phi.region, None)
