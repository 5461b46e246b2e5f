import math

import numpy as np
import pytest

from uniform_delta import (DegenerateError, DomainError, GridSpec, builtin, check_divergence, delta, delta_analytic,
                           divergence_preset, envelope, scan)
from uniform_delta.errors import DimensionError, UnknownBuiltin
from uniform_delta.exprlang import compile_phi
from uniform_delta.funcspace import FINITE_DIFF, affine
from uniform_delta.remainder import (DEGENERATE, OUTSIDE_DOMAIN, VALID, Axis, DivergenceCertificate, delta_batch,
                                     delta_components)


@pytest.mark.parametrize("name,t,m,expected", [
    ("reciprocal", 2.0, 1.0, 0.5),
    ("square", 2.0, 1.0, 0.5),
    ("absval", -0.01, 0.01, 1.0),
    ("absval", 2.0, 1.0, 0.0),
    ("sqrt", 1.0, 4.0, 1 / 3),
])
def test_worked_values(name, t, m, expected):
    assert delta(builtin(name), [t], [m]) == pytest.approx(expected, rel=1e-12, abs=1e-15)
    assert delta_analytic(name, [t], [m]) == pytest.approx(expected, rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("n", [1, 7, 100, 10**4])
def test_sqrt_scale_free(n):
    assert delta(builtin("sqrt"), [1 / n**2], [4 / n**2]) == pytest.approx(1 / 3, rel=1e-9)


def test_iv_ratio_worked_value():
    # direct: phi(t)-phi(m)-D(t-m) = 1 - 0.5 - 0.25 = 0.25, ||D|| = sqrt(5)/4, ||t-m|| = 1
    t, m = [1.0, 1.0], [1.0, 2.0]
    expected = 0.25 / (math.sqrt(5) / 4)
    assert expected == pytest.approx(1 / math.sqrt(5))
    assert delta(builtin("iv_ratio"), t, m) == pytest.approx(expected, rel=1e-14)
    assert delta_analytic("iv_ratio", t, m) == pytest.approx(expected, rel=1e-14)
    assert delta(builtin("iv_ratio"), t, m, FINITE_DIFF) == pytest.approx(expected, rel=1e-8)


def test_errors():
    with pytest.raises(DegenerateError):
        delta(builtin("square"), [1.0], [1.0])
    with pytest.raises(DomainError):
        delta(builtin("reciprocal"), [0.0], [1.0])
    with pytest.raises(DomainError):
        delta(builtin("reciprocal"), [1.0], [0.0])
    with pytest.raises(UnknownBuiltin):
        delta_analytic("mineq_phi1", [1.0, 1.0], [2.0, 2.0])


def test_affine_zero(rng):
    phi = affine(rng.normal(size=(3, 2)) + 0.1, [1.0, -2.0, 0.5])
    t, m = rng.normal(size=(200, 2)), rng.normal(size=(200, 2))
    v, c = delta_batch(phi, t, m)
    assert np.all(c == VALID)
    assert np.max(v) < 1e-12


def test_components_debug_output():
    phi = compile_phi(["t1^2", "t2^2"])
    per = delta_components(phi, [2.0, 3.0], [1.0, 1.0])
    assert per.shape == (2,)
    t, m = np.array([2.0, 3.0]), np.array([1.0, 1.0])
    # scaled remainder per coordinate: (t_i - m_i)^2 / (2 |m_i|) / ||t - m||
    np.testing.assert_allclose(per, (t - m) ** 2 / 2 / np.linalg.norm(t - m), rtol=1e-12)
    assert delta(phi, t, m) == pytest.approx(np.linalg.norm(per), rel=1e-12)


@pytest.mark.parametrize("name", ["reciprocal", "square", "sqrt", "iv_ratio"])
def test_differentiability_limit(name, rng):
    phi = builtin(name)
    m = np.full(phi.d_in, 1.3)
    u = rng.normal(size=phi.d_in)
    u /= np.linalg.norm(u)
    vals = [delta(phi, m + e * u, m) for e in (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-3


def test_axis_invariants():
    with pytest.raises(ValueError):
        Axis(1.0, 1.0, 5)
    with pytest.raises(ValueError):
        Axis(0.0, 1.0, 1)
    with pytest.raises(ValueError):
        Axis(0.0, 1.0, 5, "log")
    np.testing.assert_allclose(Axis(1.0, 100.0, 3, "log").points(), [1.0, 10.0, 100.0])
    assert GridSpec.uniform(0, 1, 4, dim=2).points().shape == (16, 2)


def test_scan_reciprocal():
    g = GridSpec.uniform(0.1, 2.0, 100)
    field = scan(builtin("reciprocal"), g, g)
    assert field.values.shape == (100, 100)
    assert not np.any(field.mask == OUTSIDE_DOMAIN)
    # diagonal is degenerate, everything else valid
    np.testing.assert_array_equal(np.diag(field.mask), DEGENERATE)
    assert int(field.valid.sum()) == 100 * 99
    i, _ = np.unravel_index(np.nanargmax(np.where(field.valid, field.values, -1)), field.values.shape)
    assert i == 0  # the ridge sits at the smallest |t|


def test_scan_absval_indicator():
    g = GridSpec.uniform(-1.0, 1.0, 60)
    field = scan(builtin("absval"), g, g)
    tm = np.outer(field.t_points[:, 0], field.m_points[:, 0])
    assert np.all(field.values[field.valid & (tm > 0)] == 0.0)
    assert np.all(field.values[field.valid & (tm < 0)] > 0.0)


def test_scan_dimension_check():
    with pytest.raises(DimensionError):
        scan(builtin("iv_ratio"), GridSpec.uniform(0, 1, 3), GridSpec.uniform(0, 1, 3))


def test_scan_workers_identical():
    g = GridSpec.uniform(0.1, 2.0, 300)
    a = scan(builtin("reciprocal"), g, g, workers=1)
    b = scan(builtin("reciprocal"), g, g, workers=4)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.mask, b.mask)


def test_envelope_affine_zero():
    env = envelope(affine([[2.0]]), ([-1.0], [1.0]), [0.5, 0.1], samples_per_eps=2000)
    assert max(env.delta_hat) < 1e-12


def test_envelope_against_dense_grid():
    # the sampled envelope is a lower bound and should sit close to a dense-grid sup
    phi = builtin("reciprocal")
    env = envelope(phi, ([0.5], [2.0]), [0.1], samples_per_eps=20000, seed=3)
    m = np.linspace(0.5, 2.0, 1001)
    r = np.linspace(-0.1, 0.1, 1001)
    t = (m[:, None] + r[None, :]).ravel()
    mm = np.repeat(m, r.size)
    keep = np.abs(t - mm) > 0
    dense = np.max(np.abs((t[keep] - mm[keep]) / t[keep]))
    assert env.delta_hat[0] <= dense + 1e-12
    assert env.delta_hat[0] >= 0.95 * dense


def test_envelope_validation():
    with pytest.raises(ValueError):
        envelope(builtin("reciprocal"), ([0.5], [2.0]), [0.1, 0.2])
    with pytest.raises(DomainError):
        envelope(builtin("reciprocal"), ([-1.0], [2.0]), [0.1])


def test_certificate_square_holds():
    verdicts = check_divergence(divergence_preset("square"))
    assert [v.n for v in verdicts] == [100, 10**4, 10**6]
    assert all(v.holds for v in verdicts)


def test_certificate_absval_fails():
    verdicts = check_divergence(divergence_preset("absval"))
    assert not any(v.holds for v in verdicts)
    assert all(v.min_delta <= 2.0 for v in verdicts)
    assert verdicts[0].witness is not None and "eps'" in verdicts[0].reason


def test_certificate_rejects_box_at_origin():
    with pytest.raises(ValueError):
        DivergenceCertificate(builtin("iv_ratio"), math.sqrt, math.sqrt, lambda n: np.array([1.0, 0.1]),
                              ((-0.5, -2.0), (0.5, 1.0)), (100,))
    with pytest.raises(ValueError):
        DivergenceCertificate(builtin("square"), math.sqrt, lambda n: 1.0, lambda n: np.array([1.0]),
                              ((1.0,), (2.0,)), (100, 1000))


def test_certificate_lattice_interior():
    cert = divergence_preset("iv", (100,), grid_per_axis=17)
    s = cert.lattice()
    assert s.shape == (17 * 17, 2)
    assert np.all((s[:, 0] > -0.5) & (s[:, 0] < 0.5) & (s[:, 1] > -2) & (s[:, 1] < -1))


def test_certificate_reciprocal_intermediate_behaviour():
    # along m_n = 1/sqrt(n) + 1/n the lattice remainder stays O(1):
    # Delta = |s| / |1 + 1/sqrt(n) + s| for t = m_n + s/sqrt(n)
    for v in check_divergence(divergence_preset("reciprocal")):
        n = v.n
        s = np.arange(1, 18) / 18 * 1.0 - 2.0
        exact = np.min(np.abs(s) / np.abs(1 + 1 / math.sqrt(n) + s))
        assert v.min_delta == pytest.approx(exact, rel=1e-9)
        assert 2.0 < v.min_delta < 2.5
