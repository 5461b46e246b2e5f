"""Monte Carlo engine: triangular-array draws of T_n, the normalized statistic
X_n = r_n E(mu) (phi(T_n) - phi(mu)), its delta-method limit X = E(mu) D(mu) S,
studentized pivots, and studies along drifting parameter sequences.

Random streams are keyed by (master seed, stream id, n, chunk index) with a
fixed chunk size, so results do not depend on how chunks are scheduled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from ._parallel import ordered_map
from .errors import DomainError, EmptyError, NotPSDError
from .funcspace import PhiMap, eval_batch, jacobian, normalizer
from .metrics import DistanceReport, EmpiricalSample, coverage, dudley_1d, ks_distance, sliced_bl

CHUNK = 8192
PRIMITIVE_BUDGET = 2_000_000  # max primitive draws held per chunk
EIG_FLOOR = 1e-12

STREAM_T = 0
STREAM_LIMIT = 1
STREAM_METRIC = 2


def substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def _chunks(reps: int, size: int):
    return [(start, min(reps, start + size)) for start in range(0, reps, size)]


@dataclass(frozen=True)
class ParamFamily:
    """theta -> (mu(theta), Sigma(theta), sampler).

    ``primitive(theta, shape, rng)`` draws i.i.d. Y_i with trailing dim d.
    ``exact(theta, n, reps, rng)`` optionally returns (T_n draws, Sigma-hat draws) directly.
    ``limit_S(theta, reps, rng)`` optionally overrides the N(0, Sigma) limit of S_n.
    """

    name: str
    theta_lo: tuple
    theta_hi: tuple
    mu: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    primitive: Optional[Callable] = None
    exact: Optional[Callable] = None
    limit_S: Optional[Callable] = None

    def check(self, theta) -> np.ndarray:
        th = np.atleast_1d(np.asarray(theta, dtype=float))
        lo, hi = np.asarray(self.theta_lo, float), np.asarray(self.theta_hi, float)
        if th.shape != lo.shape or np.any(th < lo) or np.any(th > hi):
            raise DomainError(f"{self.name}: theta={th.tolist()} outside [{lo.tolist()}, {hi.tolist()}]")
        return th

    @property
    def d(self) -> int:
        return int(np.atleast_1d(self.mu(np.asarray(self.theta_lo, float))).size)


@dataclass(frozen=True)
class ParamSeq:
    family: ParamFamily
    rule: Callable[[int], np.ndarray]
    label: str = ""

    def theta(self, n: int) -> np.ndarray:
        return self.family.check(self.rule(n))


def sqrt_rate(n: float) -> float:
    return math.sqrt(n)


@dataclass(frozen=True)
class SimConfig:
    master_seed: int = 20240101
    reps: int = 100_000
    n_list: tuple = (100, 1000, 10_000)
    r_rule: Callable[[float], float] = sqrt_rate
    n_boot: int = 200
    workers: Optional[int] = None

    def __post_init__(self):
        if not self.n_list:
            raise ValueError("n_list is empty")
        if list(self.n_list) != sorted(self.n_list):
            raise ValueError("n_list must be increasing")


# -- families ---------------------------------------------------------------


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if not np.allclose(S, S.T, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise NotPSDError("covariance is not symmetric")
    vals, vecs = np.linalg.eigh(S)
    if vals.min() < -1e-10 * max(1.0, abs(vals).max()):
        raise NotPSDError(f"covariance has negative eigenvalue {vals.min():.3g}")
    return vecs @ np.diag(np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _wishart_cov(Sigma: np.ndarray, n: int, reps: int, rng: np.random.Generator) -> np.ndarray:
    """Sample covariance matrices (ddof=1) of n normal draws."""
    d = Sigma.shape[0]
    if d == 1:
        return (Sigma[0, 0] * rng.chisquare(n - 1, size=reps) / (n - 1)).reshape(reps, 1, 1)
    W = stats.wishart.rvs(df=n - 1, scale=Sigma, size=reps, random_state=rng)
    return np.asarray(W).reshape(reps, d, d) / (n - 1)


def normal_mean_family(sigma: float = 1.0, lo: float = -10.0, hi: float = 10.0) -> ParamFamily:
    """Means of i.i.d. N(theta, sigma^2); exact shortcut via the normal/chi-square pair."""
    def exact(theta, n, reps, rng):
        T = theta[0] + sigma / math.sqrt(n) * rng.standard_normal((reps, 1))
        V = sigma**2 * rng.chisquare(n - 1, size=reps) / (n - 1) if n > 1 else np.full(reps, sigma**2)
        return T, V.reshape(reps, 1, 1)

    return ParamFamily(
        "normal-mean", (lo,), (hi,),
        mu=lambda th: np.array([th[0]]),
        sigma=lambda th: np.array([[sigma**2]]),
        primitive=lambda th, shape, rng: th[0] + sigma * rng.standard_normal(shape + (1,)),
        exact=exact,
    )


def mvnormal_mean_family(Sigma, lo=None, hi=None) -> ParamFamily:
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    d = Sigma.shape[0]
    root = _psd_sqrt(Sigma)
    lo = tuple([-10.0] * d) if lo is None else tuple(lo)
    hi = tuple([10.0] * d) if hi is None else tuple(hi)

    def exact(theta, n, reps, rng):
        T = theta + rng.standard_normal((reps, d)) @ root.T / math.sqrt(n)
        return T, _wishart_cov(Sigma, n, reps, rng) if n > d else np.broadcast_to(Sigma, (reps, d, d)).copy()

    return ParamFamily(
        "mvnormal-mean", lo, hi,
        mu=lambda th: np.asarray(th, dtype=float),
        sigma=lambda th: Sigma,
        primitive=lambda th, shape, rng: th + rng.standard_normal(shape + (d,)) @ root.T,
        exact=exact,
    )


def bernoulli_mean_family() -> ParamFamily:
    def exact(theta, n, reps, rng):
        k = rng.binomial(n, theta[0], size=reps)
        T = k / n
        V = k * (n - k) / (n * (n - 1.0)) if n > 1 else np.zeros(reps)
        return T.reshape(reps, 1), V.reshape(reps, 1, 1)

    return ParamFamily(
        "bernoulli-mean", (0.0,), (1.0,),
        mu=lambda th: np.array([th[0]]),
        sigma=lambda th: np.array([[th[0] * (1 - th[0])]]),
        primitive=lambda th, shape, rng: (rng.random(shape + (1,)) < th[0]).astype(float),
        exact=exact,
    )


def chi2_mean_family(lo: float = 0.0, hi: float = 10.0) -> ParamFamily:
    """T_n = theta + S / sqrt(n) with S ~ chi-square(1): keeps T_n >= 0 for the sqrt map."""
    def exact(theta, n, reps, rng):
        S = rng.chisquare(1, size=(reps, 1))
        return theta[0] + S / math.sqrt(n), np.full((reps, 1, 1), 2.0)

    return ParamFamily(
        "chi2-mean", (lo,), (hi,),
        mu=lambda th: np.array([th[0]]),
        sigma=lambda th: np.array([[2.0]]),
        exact=exact,
        limit_S=lambda th, reps, rng: rng.chisquare(1, size=(reps, 1)),
    )


FAMILIES = {
    "normal-mean": normal_mean_family,
    "bernoulli-mean": bernoulli_mean_family,
    "chi2-mean": chi2_mean_family,
}


# -- sampling ---------------------------------------------------------------


def sample_Tn(family: ParamFamily, theta, n: int, reps: int, seed: int, exact: bool = True,
              with_cov: bool = False, workers: Optional[int] = None):
    """``reps`` draws of T_n (mean of n primitives, or the family's exact shortcut)."""
    theta = family.check(theta)
    if reps <= 0:
        raise EmptyError("reps must be positive")
    if n < 1:
        raise ValueError("n must be >= 1")
    use_exact = exact and family.exact is not None
    if not use_exact and family.primitive is None:
        raise ValueError(f"{family.name} has no primitive sampler")
    size = CHUNK if use_exact else max(1, min(CHUNK, PRIMITIVE_BUDGET // n))

    def draw(span):
        k = span[0] // size
        rng = substream(seed, STREAM_T, n, k)
        c = span[1] - span[0]
        if use_exact:
            T, V = family.exact(theta, n, c, rng)
            return np.asarray(T, float).reshape(c, -1), np.asarray(V, float)
        Y = family.primitive(theta, (c, n), rng)
        T = Y.mean(axis=1)
        if n > 1:
            dev = Y - T[:, None, :]
            V = np.einsum("cni,cnj->cij", dev, dev) / (n - 1)
        else:
            V = np.broadcast_to(family.sigma(theta), (c,) + (T.shape[1],) * 2).copy()
        return T, V

    parts = ordered_map(draw, _chunks(reps, size), workers)
    T = np.concatenate([p[0] for p in parts])
    meta = {"family": family.name, "theta": theta.tolist(), "n": n, "reps": reps, "seed": seed,
            "sampler": "exact" if use_exact else "primitive"}
    sample = EmpiricalSample(T, meta)
    if with_cov:
        return sample, np.concatenate([p[1] for p in parts])
    return sample


def _unit_rows(phi: PhiMap, mu):
    nj = normalizer(jacobian(phi, mu))
    norms = np.linalg.norm(nj.ED, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-12), "ED rows must have unit norm"
    return nj


def build_Xn(phi: PhiMap, Tn, mu, r_n: float) -> EmpiricalSample:
    """X_n = r_n E(mu) (phi(T_n) - phi(mu)); draws outside the domain are dropped and counted."""
    Tn = Tn if isinstance(Tn, EmpiricalSample) else EmpiricalSample(Tn)
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    nj = _unit_rows(phi, mu)
    f_mu = phi.func(mu[None, :])[0]
    vals, ok = eval_batch(phi, Tn.data)
    X = r_n * (vals[ok] - f_mu) @ nj.E.T
    rejected = int(np.count_nonzero(~ok))
    if X.shape[0] == 0:
        raise EmptyError("every draw of T_n left the domain")
    meta = dict(Tn.meta, rejected=rejected, r_n=r_n, mu=mu.tolist(), phi=phi.name)
    return EmpiricalSample(X, meta)


def sample_limit_X(phi: PhiMap, mu, Sigma, reps: int, seed: int, S_sampler: Optional[Callable] = None,
                   key: int = 0) -> EmpiricalSample:
    """Draws of X = E(mu) D(mu) S, S ~ N(0, Sigma) unless ``S_sampler(reps, rng)`` is given."""
    if reps <= 0:
        raise EmptyError("reps must be positive")
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    nj = _unit_rows(phi, mu)
    rng = substream(seed, STREAM_LIMIT, key)
    if S_sampler is None:
        root = _psd_sqrt(Sigma)
        S = rng.standard_normal((reps, phi.d_in)) @ root.T
    else:
        S = np.asarray(S_sampler(reps, rng), dtype=float).reshape(reps, phi.d_in)
    return EmpiricalSample(S @ nj.ED.T, {"mu": mu.tolist(), "phi": phi.name, "reps": reps, "seed": seed})


def _inv_sqrt_psd(A: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(A)
    vals = np.maximum(vals, EIG_FLOOR)
    return np.einsum("...ij,...j,...kj->...ik", vecs, 1.0 / np.sqrt(vals), vecs)


def pivot_Zn(phi: PhiMap, Tn, Sigma_hat, Xn, mu) -> EmpiricalSample:
    """Studentized statistic (dphi(T_n) Sigma-hat dphi(T_n)')^(-1/2) r_n (phi(T_n) - phi(mu)).

    ``Xn`` is the normalized statistic from ``build_Xn`` on the same draws;
    the E(mu) scaling is undone before studentizing.  ``Sigma_hat`` is one
    matrix (pooled) or one per draw.
    """
    Tn = Tn if isinstance(Tn, EmpiricalSample) else EmpiricalSample(Tn)
    Xn = Xn if isinstance(Xn, EmpiricalSample) else EmpiricalSample(Xn)
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    nj = _unit_rows(phi, mu)
    _, ok = eval_batch(phi, Tn.data)
    T = Tn.data[ok]
    if T.shape[0] != Xn.N:
        raise ValueError("Xn must come from build_Xn on the same T_n draws")
    S = np.asarray(Sigma_hat, dtype=float)
    if S.ndim == 2:
        S = np.broadcast_to(S, (Tn.N,) + S.shape)
    S = S[ok]
    raw = Xn.data / np.diag(nj.E)[None, :]
    from .remainder import _jacobians
    from .funcspace import StepRule

    D, jac_ok = _jacobians(phi, T, StepRule())
    row_norms = np.linalg.norm(D, axis=2)
    good = jac_ok & np.all(row_norms > 0, axis=1)
    V = np.einsum("nij,njk,nlk->nil", D[good], S[good], D[good])
    Z = np.einsum("nij,nj->ni", _inv_sqrt_psd(V), raw[good])
    meta = dict(Xn.meta, rank_rejected=int(np.count_nonzero(~good)))
    return EmpiricalSample(Z, meta)


# -- studies ----------------------------------------------------------------


@dataclass
class StudyRow:
    n: int
    theta: list
    mu: list
    distance: Optional[DistanceReport] = None
    ks: Optional[DistanceReport] = None
    rejected: int = 0
    error: str = ""
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"n": self.n, "theta": self.theta, "mu": self.mu,
                "distance": self.distance.as_dict() if self.distance else None,
                "ks": self.ks.as_dict() if self.ks else None,
                "rejected": self.rejected, "error": self.error, "extra": self.extra}


def _limit_sampler(family: ParamFamily, theta):
    if family.limit_S is None:
        return None
    return lambda reps, rng: family.limit_S(theta, reps, rng)


def xn_and_limit(phi: PhiMap, seq: ParamSeq, n: int, cfg: SimConfig):
    theta = seq.theta(n)
    fam = seq.family
    mu = np.atleast_1d(fam.mu(theta))
    Tn = sample_Tn(fam, theta, n, cfg.reps, cfg.master_seed, workers=cfg.workers)
    Xn = build_Xn(phi, Tn, mu, cfg.r_rule(n))
    X = sample_limit_X(phi, mu, fam.sigma(theta), cfg.reps, cfg.master_seed, _limit_sampler(fam, theta), key=n)
    return theta, mu, Xn, X


def sequence_study(phi: PhiMap, seq: ParamSeq, cfg: SimConfig, n_projections: int = 32) -> list:
    rows = []
    for n in cfg.n_list:
        try:
            theta, mu, Xn, X = xn_and_limit(phi, seq, n, cfg)
        except Exception as exc:  # per-n failure, study continues
            rows.append(StudyRow(int(n), [], [], error=f"{type(exc).__name__}: {exc}"))
            continue
        seed = int(np.random.SeedSequence(cfg.master_seed, spawn_key=(STREAM_METRIC, n)).generate_state(1)[0])
        if phi.d_out == 1:
            dist = dudley_1d(Xn, X, seed=seed, n_boot=cfg.n_boot)
            ks = ks_distance(Xn, X, seed=seed, n_boot=cfg.n_boot)
        else:
            dist = sliced_bl(Xn, X, n_projections, seed=seed, n_boot=cfg.n_boot)
            ks = ks_distance(EmpiricalSample(Xn.data[:, :1]), EmpiricalSample(X.data[:, :1]), seed=seed,
                             n_boot=cfg.n_boot)
            ks.meta["coordinate"] = 0
        rows.append(StudyRow(int(n), theta.tolist(), mu.tolist(), dist, ks, Xn.meta["rejected"],
                             extra={"xn_quantiles": np.quantile(Xn.data[:, 0], [0.05, 0.25, 0.5, 0.75, 0.95]).tolist()}))
    return rows


@dataclass
class CmtRow:
    n: int
    theta: float
    psi_x: float
    psi_y: float
    gap: float

    def as_dict(self) -> dict:
        return {"n": self.n, "theta": self.theta, "psi_x": self.psi_x, "psi_y": self.psi_y, "gap": self.gap}


def cmt_counterexample(n_list: Sequence[int], theta_rule: Optional[Callable[[int], float]] = None) -> list:
    """psi(x) = 1/x applied to X_n = theta_n and Y_n = X_n + 1/n (theta_n = 1/n by default)."""
    rule = theta_rule or (lambda n: 1.0 / n)
    rows = []
    for n in n_list:
        if n < 1:
            raise ValueError("n must be >= 1")
        theta = float(rule(n))
        x = theta
        y = x + 1.0 / n
        psi_x, psi_y = 1.0 / x, 1.0 / y
        rows.append(CmtRow(int(n), theta, psi_x, psi_y, abs(psi_x - psi_y)))
    return rows


def ci_study(phi: PhiMap, seq: ParamSeq, cfg: SimConfig, alpha: float = 0.05) -> list:
    """Coverage of phi(T_n) +- z sqrt(dphi(T_n) Sigma-hat dphi(T_n)') / r_n for phi(mu(theta_n))."""
    if phi.d_out != 1:
        raise ValueError("interval coverage needs a scalar phi")
    from .funcspace import StepRule
    from .remainder import _jacobians

    z = float(stats.norm.ppf(1 - alpha / 2))
    out = []
    for n in cfg.n_list:
        theta = seq.theta(n)
        mu = np.atleast_1d(seq.family.mu(theta))
        truth = float(phi.func(mu[None, :])[0, 0])
        Tn, V = sample_Tn(seq.family, theta, n, cfg.reps, cfg.master_seed, with_cov=True, workers=cfg.workers)
        vals, ok = eval_batch(phi, Tn.data)
        D, jac_ok = _jacobians(phi, Tn.data[ok], StepRule())
        se = np.sqrt(np.einsum("nij,njk,nik->n", D, V[ok], D)) / cfg.r_rule(n)
        keep = jac_ok & np.isfinite(se)
        centre = vals[ok][keep, 0]
        half = z * se[keep]
        rep = coverage(np.stack([centre - half, centre + half], axis=1), truth)
        rep.meta = {"n": int(n), "theta": theta.tolist(), "truth": truth, "alpha": alpha,
                    "rejected": int(cfg.reps - keep.sum()), "seed": cfg.master_seed, "reps": cfg.reps}
        out.append(rep)
    return out


def tightness(family: ParamFamily, thetas: Sequence, n: int, reps: int, seed: int,
              r_rule: Callable[[float], float] = sqrt_rate, q: float = 0.999) -> list:
    """Empirical q-quantile of ||S_n|| = r_n ||T_n - mu(theta)|| per theta."""
    out = []
    for th in thetas:
        th = family.check(th)
        Tn = sample_Tn(family, th, n, reps, seed)
        S = r_rule(n) * (Tn.data - np.atleast_1d(family.mu(th)))
        out.append(float(np.quantile(np.linalg.norm(S, axis=1), q)))
    return out
