"""Scenario generators: weak instruments, moment inequalities, minimum distance."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import OptimFail, SingularHessian, UnknownBuiltin
from .funcspace import PhiMap, Region
from .metrics import EmpiricalSample, ks_distance
from .montecarlo import ParamFamily, _wishart_cov, substream
from .remainder import (DEGENERATE, OUTSIDE_DOMAIN, GridSpec, RemainderField, check_divergence,
                        delta_batch, divergence_preset)

# -- weak instruments -------------------------------------------------------


@dataclass(frozen=True)
class WeakIVScenario:
    """Y = beta D + u, D = pi Z + v, Z ~ N(0, 1), corr(u, v) = rho; all unit-variance normals.

    T_n is the sample mean of (ZY, ZD), so mu = (beta pi, pi).
    """

    beta: float = 1.0
    pi: float = 1.0
    rho: float = 0.5
    pi_range: tuple = (-5.0, 5.0)

    def mu(self, pi: Optional[float] = None) -> np.ndarray:
        p = self.pi if pi is None else pi
        return np.array([self.beta * p, p])

    def sigma(self, pi: Optional[float] = None) -> np.ndarray:
        p = self.pi if pi is None else pi
        b, r = self.beta, self.rho
        var_zy = 2 * b**2 * p**2 + b**2 + 2 * b * r + 1
        var_zd = 2 * p**2 + 1
        cov = 2 * b * p**2 + b + r
        return np.array([[var_zy, cov], [cov, var_zd]])

    def primitives(self, pi: float, shape: tuple, rng: np.random.Generator) -> np.ndarray:
        """(ZY, ZD) products of shape ``shape + (2,)``."""
        Z = rng.standard_normal(shape)
        v = rng.standard_normal(shape)
        u = self.rho * v + math.sqrt(1 - self.rho**2) * rng.standard_normal(shape)
        D = pi * Z + v
        Y = self.beta * D + u
        return np.stack([Z * Y, Z * D], axis=-1)

    def family(self, gaussian_shortcut: bool = False) -> ParamFamily:
        """theta = (pi,).  The shortcut replaces T_n by its N(mu, Sigma/n) approximation."""
        def shortcut(theta, n, reps, rng):
            S = self.sigma(theta[0])
            root = np.linalg.cholesky(S)
            T = self.mu(theta[0]) + rng.standard_normal((reps, 2)) @ root.T / math.sqrt(n)
            return T, _wishart_cov(S, n, reps, rng)

        return ParamFamily(
            "weak-iv", (self.pi_range[0],), (self.pi_range[1],),
            mu=lambda th: self.mu(th[0]),
            sigma=lambda th: self.sigma(th[0]),
            primitive=lambda th, shape, rng: self.primitives(th[0], shape, rng),
            exact=shortcut if gaussian_shortcut else None,
        )


def iv_delta_certificate(n_list: Sequence[int] = (10**2, 10**4, 10**6), grid_per_axis: int = 17) -> list:
    """Divergence check for the ratio map along m_n = (1 + 1/(2 sqrt n), 1/sqrt n)."""
    return check_divergence(divergence_preset("iv", n_list, grid_per_axis))


# -- moment inequalities ----------------------------------------------------


@dataclass(frozen=True)
class MomentIneqScenario:
    mean: tuple = (0.0, 1.0)

    def __post_init__(self):
        m1, m2 = self.mean
        if not (m1 == 0 or m2 == 0) or (m1 == 0 and m2 == 0):
            raise ValueError("exactly the case m1 == 0 or m2 == 0 with mean != 0 is allowed")

    def sample_Tn(self, n: int, reps: int, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(self.mean) + rng.standard_normal((reps, 2)) / math.sqrt(n)


@dataclass(frozen=True)
class MineqStats:
    phi1: np.ndarray
    phi2: float
    phi1_naive: np.ndarray
    phi2_naive: float
    rem1: np.ndarray
    rem2: float


def mineq_stats(t) -> MineqStats:
    """Projection distance onto the positive quadrant and its naive (m2 > 0, m1 = 0) approximation."""
    t1, t2 = (float(v) for v in np.asarray(t, dtype=float).reshape(2))
    phi1 = np.array([max(-t1, 0.0), max(-t2, 0.0)])
    phi2 = (t1**2 if t1 <= 0 else 0.0) + (t2**2 if t2 <= 0 else 0.0)
    naive1 = np.array([max(-t1, 0.0), 0.0])
    naive2 = t1**2 if t1 <= 0 else 0.0
    return MineqStats(phi1, phi2, naive1, naive2, phi1 - naive1, phi2 - naive2)


def _rem_batch(T: np.ndarray):
    t2 = T[:, 1]
    return np.maximum(-t2, 0.0), np.where(t2 <= 0, t2**2, 0.0)


MINEQ_DRIFTS = {
    "inv_sqrt_n": lambda n: 1.0 / math.sqrt(n),
    "inv_n": lambda n: 1.0 / n,
}


def mineq_limit_study(n_list: Sequence[int], reps: int, seed: int, drift: str = "inv_sqrt_n",
                      n_boot: int = 0) -> dict:
    """Remainder of the naive approximation along m_n = (0, drift(n)).

    Compares n * rem2 with Z^2 1(Z <= 0) where Z ~ N(c, 1), c = lim sqrt(n) m_n2
    (c = 1 for ``inv_sqrt_n``, c = 0 for ``inv_n``), and reports the fixed
    m2 = 1 contrast where the remainder vanishes.
    """
    if drift not in MINEQ_DRIFTS:
        raise ValueError(f"unknown drift {drift!r}; choose from {sorted(MINEQ_DRIFTS)}")
    c = 1.0 if drift == "inv_sqrt_n" else 0.0
    rows = []
    for n in n_list:
        rng = substream(seed, 10, n)
        m2 = MINEQ_DRIFTS[drift](n)
        T = MomentIneqScenario((0.0, m2)).sample_Tn(n, reps, rng)
        rem1_2, rem2 = _rem_batch(T)
        Z = c + rng.standard_normal(reps)
        target2 = np.where(Z <= 0, Z**2, 0.0)
        ks2 = ks_distance(EmpiricalSample(n * rem2), EmpiricalSample(target2), seed=seed, n_boot=n_boot)
        ks1 = ks_distance(EmpiricalSample(math.sqrt(n) * rem1_2), EmpiricalSample(np.maximum(-Z, 0.0)),
                          seed=seed, n_boot=n_boot)
        fixed = MomentIneqScenario((0.0, 1.0)).sample_Tn(n, reps, rng)
        _, rem2_fixed = _rem_batch(fixed)
        rows.append({
            "n": int(n), "m2": m2, "limit_mean_Z": c,
            "ks_rem2": ks2.as_dict(), "ks_rem1": ks1.as_dict(),
            "fixed_m2_1_p_nonzero": float(np.mean(rem2_fixed != 0)),
            "fixed_m2_1_oracle": float(stats.norm.cdf(-math.sqrt(n))),
        })
    rng = substream(seed, 11, 0)
    Z = 1.0 + rng.standard_normal(reps)
    pos = np.maximum(Z, 0.0)
    summary = {
        "mean_max_Z_0": float(pos.mean()),
        "mean_max_Z_0_stderr": float(pos.std(ddof=1) / math.sqrt(reps)),
        "mean_max_Z_0_oracle": float(stats.norm.cdf(1.0) + stats.norm.pdf(1.0)),
    }
    return {"drift": drift, "reps": reps, "seed": seed, "rows": rows, "summary": summary}


# -- minimum distance -------------------------------------------------------


def _fd1(f, x, h=1e-5):
    return (f(x + h) - f(x - h)) / (2 * h)


@dataclass(frozen=True)
class MinDistModel:
    name: str
    m: Callable[[float], np.ndarray]
    x_range: tuple
    dm: Optional[Callable[[float], np.ndarray]] = None
    d2m: Optional[Callable[[float], np.ndarray]] = None
    curvature: str = ""

    def point(self, x: float) -> np.ndarray:
        return np.asarray(self.m(x), dtype=float)

    def d1(self, x: float) -> np.ndarray:
        return np.asarray(self.dm(x) if self.dm else _fd1(self.m, x), dtype=float)

    def d2(self, x: float) -> np.ndarray:
        if self.d2m:
            return np.asarray(self.d2m(x), dtype=float)
        return np.asarray(_fd1(self.d1, x, 1e-4), dtype=float)


def _parabola(k: float, name: str, curvature: str) -> MinDistModel:
    return MinDistModel(name, lambda x: np.array([x, k * x * x]), (-2.0, 2.0),
                        lambda x: np.array([1.0, 2 * k * x]), lambda x: np.array([0.0, 2 * k]), curvature)


MODELS = {
    "flat": MinDistModel("flat", lambda x: np.array([x, 0.0]), (-2.0, 2.0),
                         lambda x: np.array([1.0, 0.0]), lambda x: np.array([0.0, 0.0]), "zero"),
    "parabola": _parabola(1.0, "parabola", "moderate"),
    "sharp_parabola": _parabola(10.0, "sharp_parabola", "high"),
    "circle": MinDistModel("circle", lambda x: np.array([math.cos(x), math.sin(x)]), (0.0, math.pi),
                           lambda x: np.array([-math.sin(x), math.cos(x)]),
                           lambda x: np.array([-math.cos(x), -math.sin(x)]), "unit"),
}


def get_model(model) -> MinDistModel:
    if isinstance(model, MinDistModel):
        return model
    try:
        return MODELS[model]
    except KeyError:
        raise UnknownBuiltin(f"no minimum-distance model {model!r}") from None


@dataclass(frozen=True)
class MinDistResult:
    x_hat: float
    e_min: float
    at_boundary: bool


_GOLD = (math.sqrt(5) - 1) / 2


def _golden(f, a: float, b: float, tol: float = 1e-10):
    c, d = b - _GOLD * (b - a), a + _GOLD * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLD * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLD * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def mindist_estimate(model, t, starts: int = 8) -> MinDistResult:
    """argmin_x ||t - m(x)||^2 over the model's x_range by multi-start golden section + Newton polish."""
    model = get_model(model)
    if starts < 3:
        raise ValueError("starts must be >= 3")
    t = np.asarray(t, dtype=float).reshape(2)
    lo, hi = model.x_range

    def e(x):
        r = t - model.point(x)
        return float(r @ r)

    def grad_hess(x):
        r = t - model.point(x)
        d1, d2 = model.d1(x), model.d2(x)
        return -2.0 * float(d1 @ r), -2.0 * (float(d2 @ r) - float(d1 @ d1))

    edges = np.linspace(lo, hi, starts + 1)
    best = None
    for a, b in zip(edges[:-1], edges[1:]):
        x, fx = _golden(e, float(a), float(b))
        # Newton polish on e'(x) = 0; accepted only while it stays in the bracket
        # and shrinks |e'|, since e itself is too flat near the optimum to compare
        g, h = grad_hess(x)
        for _ in range(5):
            if not (h > 0) or g == 0:
                break
            x_new = x - g / h
            if not a <= x_new <= b:
                break
            g_new, h_new = grad_hess(x_new)
            if not abs(g_new) < abs(g):
                break
            x, g, h = x_new, g_new, h_new
        fx = e(x)
        if math.isfinite(fx) and (best is None or fx < best[1]):
            best = (x, fx)
    if best is None:
        raise OptimFail(f"{model.name}: no finite objective value on {model.x_range}")
    x, fx = best
    span = hi - lo
    at_boundary = bool(min(x - lo, hi - x) <= 1e-8 * max(1.0, span))
    if at_boundary:
        x = lo if x - lo < hi - x else hi
        fx = e(x)
    return MinDistResult(float(x), float(fx), at_boundary)


def mindist_slope(model, t, x_hat: float) -> np.ndarray:
    """d x_hat / d t by the implicit function theorem on the first-order condition."""
    model = get_model(model)
    t = np.asarray(t, dtype=float).reshape(2)
    mx = model.point(x_hat)
    d1, d2 = model.d1(x_hat), model.d2(x_hat)
    if np.array_equal(t, mx):
        return d1 / float(d1 @ d1)
    inner = float(d2 @ (t - mx)) - float(d1 @ d1)
    if abs(2.0 * inner) < 1e-10:
        raise SingularHessian(f"{model.name}: d2e/dx2 = {-2 * inner:.3g} at x={x_hat}")
    return -d1 / inner


def mindist_phi(model) -> PhiMap:
    """phi(t) = argmin_x ||t - m(x)||^2; inside where the minimizer is interior and regular."""
    model = get_model(model)
    cache: dict = {}

    def solve(row: np.ndarray):
        key = (float(row[0]), float(row[1]))
        if key not in cache:
            try:
                res = mindist_estimate(model, row)
                slope = mindist_slope(model, row, res.x_hat)
                cache[key] = (res.x_hat, slope, Region.BOUNDARY if res.at_boundary else Region.INSIDE)
            except (OptimFail, SingularHessian):
                cache[key] = (math.nan, np.full(2, math.nan), Region.OUTSIDE)
            if len(cache) > 200_000:
                cache.clear()
        return cache[key]

    def func(t):
        return np.array([[solve(r)[0]] for r in np.atleast_2d(t)])

    def region(t):
        return np.array([int(solve(r)[2]) for r in np.atleast_2d(t)], dtype=int)

    def jac(t):
        return np.array([solve(r)[1][None, :] for r in np.atleast_2d(t)])

    return PhiMap(f"mindist:{model.name}", 2, 1, func=func, region=region, jacobian_analytic=jac)


def mindist_delta_scan(model, x_grid: GridSpec, t_grid: GridSpec, tube: float = 0.5) -> RemainderField:
    """Delta(t, m(x)) for on-curve m and t within ``tube`` of the curve; other cells are masked."""
    model = get_model(model)
    phi = mindist_phi(model)
    xs = x_grid.points()[:, 0]
    mp = np.array([model.point(x) for x in xs])
    tp = t_grid.points()
    curve = np.array([model.point(x) for x in np.linspace(*model.x_range, 4001)])
    dist_to_curve = np.min(np.linalg.norm(tp[:, None, :] - curve[None, :, :], axis=2), axis=1)
    nt, nm = len(tp), len(mp)
    values = np.full((nt, nm), np.nan)
    mask = np.full((nt, nm), OUTSIDE_DOMAIN)
    near = np.flatnonzero(dist_to_curve <= tube)
    if near.size:
        tt = np.repeat(tp[near], nm, axis=0)
        mm = np.tile(mp, (near.size, 1))
        v, c = delta_batch(phi, tt, mm)
        c[c > DEGENERATE] = DEGENERATE
        values[near] = v.reshape(near.size, nm)
        mask[near] = c.reshape(near.size, nm)
    field_ = RemainderField(t_grid, x_grid, tp, mp, values, mask, phi.name)
    return field_
