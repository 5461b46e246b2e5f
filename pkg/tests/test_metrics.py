import numpy as np
import pytest
from scipy import optimize, stats

from uniform_delta.errors import DimensionError, EmptyError
from uniform_delta.metrics import (EmpiricalSample, chain_lp_max, coverage, dudley_1d, ks_distance, sliced_bl)


def linprog_oracle(x, w) -> float:
    """Same LP solved densely by HiGHS."""
    K = len(x)
    rows, rhs = [], []
    for i in range(K - 1):
        g = x[i + 1] - x[i]
        e = np.zeros(K)
        e[i + 1], e[i] = 1.0, -1.0
        rows += [e, -e]
        rhs += [g, g]
    res = optimize.linprog(-np.asarray(w), A_ub=np.array(rows) if rows else None, b_ub=rhs or None,
                           bounds=[(-1, 1)] * K, method="highs")
    assert res.status == 0
    return -res.fun


@pytest.mark.parametrize("K", [1, 2, 3, 5, 10, 40, 200])
def test_chain_lp_matches_linprog(K, rng):
    for _ in range(10):
        x = np.sort(rng.choice(np.linspace(-5, 5, 4001), size=K, replace=False))
        x = x * rng.choice([0.05, 1.0, 3.0])
        w = rng.normal(size=K)
        assert chain_lp_max(x, w) == pytest.approx(linprog_oracle(x, w), abs=1e-9)


def test_chain_lp_input_checks():
    with pytest.raises(ValueError):
        chain_lp_max([0.0, 0.0], [1.0, -1.0])
    with pytest.raises(DimensionError):
        chain_lp_max([0.0, 1.0], [1.0])
    assert chain_lp_max([], []) == 0.0


def test_dudley_identical_and_bounded(rng):
    a = rng.normal(size=300)
    assert dudley_1d(a, a.copy(), n_boot=0).value == 0.0
    big = rng.normal(size=5000)
    assert dudley_1d(big, big.copy(), cap=512, n_boot=0).value == 0.0
    far = dudley_1d(a, a + 100.0, n_boot=0).value
    assert far == pytest.approx(2.0, abs=1e-12)


def test_dudley_shift_small():
    # translating a measure by c < the spacing: sup = c (h(x) = x locally)
    assert dudley_1d([0.0, 10.0], [0.25, 10.25], n_boot=0).value == pytest.approx(0.25, abs=1e-12)


def test_dudley_subsampling_meta(rng):
    rep = dudley_1d(rng.normal(size=5000), rng.normal(size=100), cap=512, n_boot=20, seed=4)
    assert rep.meta["used_p"] == 512 and rep.meta["subsampled"]
    assert rep.mc_stderr > 0
    again = dudley_1d(rng.normal(size=10), rng.normal(size=10), n_boot=0)
    assert again.mc_stderr == 0.0


def test_dudley_seed_determinism(rng):
    a, b = rng.normal(size=2000), rng.normal(0.3, 1, size=2000)
    r1, r2 = dudley_1d(a, b, seed=9), dudley_1d(a, b, seed=9)
    assert (r1.value, r1.mc_stderr) == (r2.value, r2.mc_stderr)


def test_ks_examples():
    r = np.random.default_rng(2024)
    z = r.standard_normal(100_000)
    assert ks_distance(z, z.copy(), n_boot=0).value == 0.0
    # DKW: P(sup > 0.01) <= 2 exp(-2 * 1e5 * 1e-4) ~ 4e-9
    assert ks_distance(z, stats.norm.cdf, n_boot=0).value <= 0.01
    az = np.abs(r.standard_normal(10_000))
    assert ks_distance(az, stats.norm.cdf, n_boot=0).value >= 0.45


def test_ks_one_vs_two_sample_agree(rng):
    a = rng.normal(size=400)
    b = rng.normal(size=400)
    exact = stats.ks_2samp(a, b).statistic
    assert ks_distance(a, b, n_boot=0).value == pytest.approx(exact, abs=1e-15)
    assert ks_distance(a, stats.norm.cdf, n_boot=0).value == pytest.approx(stats.kstest(a, "norm").statistic,
                                                                           abs=1e-15)


def test_sliced_bl(rng):
    p = rng.normal(size=(10_000, 2))
    q = rng.normal(size=(10_000, 2)) + [3.0, 0.0]
    assert sliced_bl(p, p.copy(), n_boot=0).value == 0.0
    assert sliced_bl(p, q, n_projections=32, n_boot=0).value >= 0.8
    empty = sliced_bl(p, q, n_projections=0)
    assert empty.value == 0.0 and "warning" in empty.meta
    with pytest.raises(DimensionError):
        sliced_bl(p, q[:, :1])


def test_empirical_sample_invariants():
    s = EmpiricalSample([[1.0], [2.0]])
    assert (s.N, s.d) == (2, 1)
    with pytest.raises(ValueError):
        s.data[0, 0] = 5.0
    with pytest.raises(ValueError):
        EmpiricalSample([1.0, np.nan])
    with pytest.raises(EmptyError):
        EmpiricalSample(np.empty((0, 1)))


def test_coverage_examples(rng):
    assert coverage([(-1, 1)] * 10, 0.0).coverage == 1.0
    iv = [(-1, 1) if i % 2 else (2, 3) for i in range(1000)]
    assert coverage(iv, 0.0).coverage == 0.5
    n = 400
    T = rng.normal(0.0, 1 / np.sqrt(n), size=100_000)
    half = 1.96 / np.sqrt(n)
    rep = coverage(np.stack([T - half, T + half], axis=1), 0.0)
    assert abs(rep.coverage - 0.95) <= 0.01
    assert rep.band[0] < rep.coverage < rep.band[1]
    with pytest.raises(EmptyError):
        coverage(np.empty((0, 2)), 0.0)
