import math

import numpy as np
import pytest
from scipy import stats

from uniform_delta.applications import (MODELS, MinDistModel, MomentIneqScenario, WeakIVScenario,
                                        iv_delta_certificate, mindist_delta_scan, mindist_estimate, mindist_phi,
                                        mindist_slope, mineq_limit_study, mineq_stats)
from uniform_delta.errors import SingularHessian
from uniform_delta.remainder import DEGENERATE, VALID, DivergenceCertificate, GridSpec


# -- weak instruments -------------------------------------------------------

def test_weak_iv_moments_match_simulation():
    sc = WeakIVScenario(beta=0.7, pi=0.4, rho=0.5)
    P = sc.primitives(0.4, (400_000,), np.random.default_rng(5)).reshape(-1, 2)
    np.testing.assert_allclose(P.mean(axis=0), sc.mu(), atol=0.01)
    np.testing.assert_allclose(np.cov(P, rowvar=False), sc.sigma(), rtol=0.02)


def test_weak_iv_family_ratio_is_beta():
    sc = WeakIVScenario(beta=1.5, pi=2.0)
    mu = sc.family().mu([2.0])
    assert mu[0] / mu[1] == pytest.approx(1.5)


def test_iv_certificate_lattice_margin():
    # the lattice minimum stays near 2 for every n, so the sqrt(n) margin is never met
    verdicts = iv_delta_certificate((100, 10_000))
    assert [v.n for v in verdicts] == [100, 10_000]
    assert all(1.5 < v.min_delta < 2.5 for v in verdicts)


def test_iv_certificate_rejects_origin_box():
    from uniform_delta import builtin
    with pytest.raises(ValueError):
        DivergenceCertificate(builtin("iv_ratio"), math.sqrt, math.sqrt, lambda n: np.array([1.0, 0.1]),
                              ((-0.5, -1.0), (0.5, 1.0)), (100,))


# -- moment inequalities ----------------------------------------------------

def test_mineq_worked_values():
    s = mineq_stats([-1.0, -2.0])
    np.testing.assert_array_equal(s.phi1, [1.0, 2.0])
    assert (s.phi2, s.phi2_naive, s.rem2) == (5.0, 1.0, 4.0)
    np.testing.assert_array_equal(s.rem1, [0.0, 2.0])
    for t in ([1.0, 2.0], [0.0, 0.0]):
        s = mineq_stats(t)
        assert not np.any(s.phi1) and s.phi2 == 0.0 and s.rem2 == 0.0 and not np.any(s.rem1)


def test_mineq_scenario_validation():
    with pytest.raises(ValueError):
        MomentIneqScenario((1.0, 1.0))
    with pytest.raises(ValueError):
        MomentIneqScenario((0.0, 0.0))


def test_mineq_fixed_contrast_and_oracles():
    out = mineq_limit_study([10_000], 100_000, 17)
    row = out["rows"][0]
    assert row["fixed_m2_1_p_nonzero"] <= 0.001
    assert row["fixed_m2_1_oracle"] == pytest.approx(stats.norm.cdf(-100.0))
    assert row["ks_rem2"]["value"] <= 0.02
    assert abs(out["summary"]["mean_max_Z_0"] - 1.0833) <= 0.01
    with pytest.raises(ValueError):
        mineq_limit_study([10], 10, 1, drift="bogus")


# -- minimum distance -------------------------------------------------------

def test_mindist_exact_fit_on_diagonal():
    diag = MinDistModel("diag", lambda x: np.array([x, x]), (-3.0, 3.0))
    res = mindist_estimate(diag, [2.0, 2.0])
    assert res.x_hat == pytest.approx(2.0, abs=1e-8)
    assert res.e_min == pytest.approx(0.0, abs=1e-14)


def test_mindist_parabola_against_grid():
    res = mindist_estimate("parabola", [0.0, 1.0])
    x = np.linspace(-2.0, 2.0, 1_000_001)
    e = x**2 + (x**2 - 1) ** 2
    assert res.e_min <= e.min() + 1e-12
    assert abs(abs(res.x_hat) - abs(x[np.argmin(e)])) <= 1e-5


def test_mindist_boundary_clamp():
    flat = MinDistModel("flat-short", lambda x: np.array([x, 0.0]), (-1.0, 1.0))
    res = mindist_estimate(flat, [5.0, 0.0])
    assert res.x_hat == 1.0 and res.at_boundary
    with pytest.raises(ValueError):
        mindist_estimate(flat, [0.0, 0.0], starts=2)


@pytest.mark.parametrize("name", sorted(MODELS))
def test_mindist_on_curve_exact(name, rng):
    model = MODELS[name]
    lo, hi = model.x_range
    for x in rng.uniform(lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo), 100):
        assert mindist_estimate(model, model.point(x)).x_hat == pytest.approx(x, abs=1e-8)


def test_mindist_slope_on_curve():
    np.testing.assert_allclose(mindist_slope("parabola", [0.0, 0.0], 0.0), [1.0, 0.0])
    np.testing.assert_allclose(mindist_slope("flat", [0.7, 0.0], 0.7), [1.0, 0.0])


def test_mindist_slope_singular():
    # t at the centre of the unit circle: every x is a minimizer
    with pytest.raises(SingularHessian):
        mindist_slope("circle", [0.0, 0.0], 1.0)


@pytest.mark.parametrize("name", ["parabola", "sharp_parabola", "circle"])
def test_mindist_slope_finite_difference(name, rng):
    model = MODELS[name]
    phi = mindist_phi(model)
    h = 1e-5
    checked = 0
    for _ in range(20):
        lo, hi = model.x_range
        x = rng.uniform(lo + 0.3 * (hi - lo), hi - 0.3 * (hi - lo))
        t = model.point(x) + rng.normal(scale=0.05, size=2)
        res = mindist_estimate(model, t)
        if res.at_boundary:
            continue
        try:
            slope = mindist_slope(model, t, res.x_hat)
        except SingularHessian:
            continue
        fd = [(phi.func(t + h * e)[0, 0] - phi.func(t - h * e)[0, 0]) / (2 * h) for e in np.eye(2)]
        np.testing.assert_allclose(slope, fd, atol=1e-4)
        checked += 1
    assert checked >= 10


def test_mindist_scan_flat_is_zero():
    field = mindist_delta_scan("flat", GridSpec.uniform(-1.0, 1.0, 9), GridSpec.uniform(-1.0, 1.0, 9, dim=2))
    assert np.any(field.valid)
    assert np.max(np.abs(field.values[field.valid])) < 1e-9


def test_mindist_scan_curvature_and_masks():
    xg = GridSpec.uniform(-0.2, 0.2, 9)
    tg = GridSpec.uniform(-0.3, 0.3, 13, dim=2)
    sharp = mindist_delta_scan("sharp_parabola", xg, tg, tube=0.3)
    mild = mindist_delta_scan("parabola", xg, tg, tube=0.3)
    assert np.nanmax(np.where(sharp.valid, sharp.values, np.nan)) > np.nanmax(np.where(mild.valid, mild.values, np.nan))
    # x = 0 is on both the x grid and the t grid, so t = m(0) = (0, 0) is a cell
    it = np.flatnonzero(np.all(sharp.t_points == 0.0, axis=1))
    im = np.flatnonzero(np.all(sharp.m_points == 0.0, axis=1))
    assert it.size == 1 and im.size == 1
    assert sharp.mask[it[0], im[0]] == DEGENERATE
    assert np.sum(sharp.mask == VALID) > 0
