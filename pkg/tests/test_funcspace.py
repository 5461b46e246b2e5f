import numpy as np
import pytest

from uniform_delta import BUILTINS, DomainError, RankError, Region, builtin, eval_phi, jacobian, normalizer
from uniform_delta.errors import DimensionError, UnknownBuiltin
from uniform_delta.funcspace import FINITE_DIFF, StepRule, affine, normalized_jacobian, scaled, without_analytic


def test_catalog_names():
    assert BUILTINS == ("reciprocal", "square", "absval", "sqrt", "iv_ratio", "mineq_phi1", "mineq_phi2", "mindist")
    with pytest.raises(UnknownBuiltin):
        builtin("cube")


@pytest.mark.parametrize("name,t,expected", [
    ("reciprocal", [1.0], [1.0]),
    ("iv_ratio", [1.0, 2.0], [0.5]),
    ("square", [-3.0], [9.0]),
    ("absval", [-2.5], [2.5]),
    ("sqrt", [4.0], [2.0]),
])
def test_eval_points(name, t, expected):
    assert eval_phi(builtin(name), t) == pytest.approx(expected, abs=0)


def test_domain_errors():
    with pytest.raises(DomainError):
        eval_phi(builtin("reciprocal"), [0.0])
    with pytest.raises(DomainError):
        eval_phi(builtin("sqrt"), [-1.0])
    with pytest.raises(DomainError):
        eval_phi(builtin("iv_ratio"), [1.0, 0.0])
    with pytest.raises(DimensionError):
        eval_phi(builtin("iv_ratio"), [1.0])


def test_region_codes():
    phi = builtin("reciprocal")
    assert phi.domain_pred([0.0]) is Region.OUTSIDE
    assert phi.domain_pred([1e-10]) is Region.BOUNDARY
    assert phi.domain_pred([0.5]) is Region.INSIDE
    assert builtin("sqrt").domain_pred([0.0]) is Region.BOUNDARY
    assert builtin("absval").domain_pred([0.0]) is not Region.INSIDE


@pytest.mark.parametrize("name,m,expected", [
    ("square", [3.0], [[6.0]]),
    ("reciprocal", [2.0], [[-0.25]]),
    ("iv_ratio", [1.0, 2.0], [[0.5, -0.25]]),
])
@pytest.mark.parametrize("rule", [StepRule(), FINITE_DIFF], ids=["analytic", "finite-diff"])
def test_jacobian_points(name, m, expected, rule):
    tol = 1e-14 if rule.prefer_analytic else 1e-8
    np.testing.assert_allclose(jacobian(builtin(name), m, rule), expected, atol=tol)


@pytest.mark.parametrize("name", ["reciprocal", "square", "sqrt", "iv_ratio", "mineq_phi2"])
def test_analytic_matches_finite_difference(name, rng):
    phi = builtin(name)
    for _ in range(25):
        m = rng.uniform(0.3, 2.0, phi.d_in) * rng.choice([-1, 1], phi.d_in)
        if name == "sqrt":
            m = np.abs(m)
        np.testing.assert_allclose(jacobian(phi, m), jacobian(phi, m, FINITE_DIFF), rtol=1e-7, atol=1e-9)


def test_stencil_leaving_domain():
    with pytest.raises(DomainError):
        jacobian(builtin("sqrt"), [1e-9], FINITE_DIFF)


def test_normalizer_examples():
    nj = normalizer([[3.0, 4.0]])
    np.testing.assert_allclose(nj.E, [[0.2]])
    np.testing.assert_allclose(nj.ED, [[0.6, 0.8]])
    nj = normalizer(np.eye(2))
    np.testing.assert_array_equal(nj.E, np.eye(2))
    np.testing.assert_array_equal(nj.ED, np.eye(2))
    with pytest.raises(RankError):
        normalizer([[0.0, 0.0]])


def test_normalized_rows_unit(rng):
    for _ in range(50):
        D = rng.normal(size=(3, 4))
        nj = normalizer(D)
        np.testing.assert_allclose(np.linalg.norm(nj.ED, axis=1), 1.0, atol=1e-12)
    nj = normalized_jacobian(builtin("iv_ratio"), [1.0, 2.0])
    assert np.linalg.norm(nj.ED) == pytest.approx(1.0, abs=1e-12)


def test_mineq_identities(rng):
    p1, p2 = builtin("mineq_phi1"), builtin("mineq_phi2")
    t = rng.normal(size=(500, 2)) * 2
    f1, f2 = p1.func(t), p2.func(t)
    np.testing.assert_allclose(f2[:, 0], np.sum(f1**2, axis=1), rtol=0, atol=1e-12)
    proj = f1 + t
    assert np.all(proj >= 0)
    np.testing.assert_array_equal(proj, np.maximum(t, 0.0))


def test_helpers():
    A = [[1.0, 2.0], [0.0, -1.0]]
    phi = affine(A, [1.0, 1.0])
    np.testing.assert_array_equal(eval_phi(phi, [1.0, 1.0]), [4.0, 0.0])
    np.testing.assert_array_equal(jacobian(phi, [5.0, -2.0]), A)
    s = scaled(builtin("square"), 3.0)
    assert eval_phi(s, [2.0])[0] == 12.0
    assert jacobian(s, [2.0])[0, 0] == 12.0
    assert without_analytic(builtin("square")).jacobian_analytic is None
