import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uniform_delta import Region, builtin, jacobian
from uniform_delta.errors import DimensionError
from uniform_delta.exprlang import (ArityError, BinOp, Call, ExprSyntaxError, Neg, Num, UnknownFunction, Var,
                                    compile_phi, evaluate, gradient, parse, to_text, variables)
from uniform_delta.funcspace import FINITE_DIFF
from uniform_delta.remainder import GridSpec, delta_batch


def ev(src, *t):
    return float(evaluate(parse(src), [list(t)])[0])


@pytest.mark.parametrize("src,t,expected", [
    ("t1/t2", (1, 2), 0.5),
    ("-t1^2", (3,), -9.0),
    ("2^3^2", (), 512.0),
    ("2*3+4", (), 10.0),
    ("2*(3+4)", (), 14.0),
    ("8/4/2", (), 1.0),
    ("1-2-3", (), -4.0),
    ("--t1", (2,), 2.0),
    ("2^-1", (), 0.5),
    ("min(t1, t2) + max(t1, t2)", (3, -1), 2.0),
    ("sqrt(abs(t1)) * sign(t1)", (-4,), -2.0),
    ("log(exp(1.5))", (), 1.5),
    ("1.5e2 + .5", (), 150.5),
])
def test_evaluation(src, t, expected):
    assert ev(src, *t) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("src,offset,kind", [
    ("sqrt(", 5, ExprSyntaxError),
    ("t1 +", 4, ExprSyntaxError),
    ("(t1", 3, ExprSyntaxError),
    ("t1 $ 2", 3, ExprSyntaxError),
    ("foo(t1)", 0, UnknownFunction),
    ("min(t1)", 6, ArityError),
    ("sqrt(t1, t2)", 11, ArityError),
    ("", 0, ExprSyntaxError),
    ("t1 t2", 3, ExprSyntaxError),
])
def test_syntax_errors(src, offset, kind):
    with pytest.raises(kind) as info:
        parse(src)
    assert info.value.offset == offset


def test_offsets_are_bytes():
    with pytest.raises(ExprSyntaxError) as info:
        parse("t1 + é")
    assert info.value.offset == 5
    with pytest.raises(ExprSyntaxError) as info:
        parse("é")
    assert info.value.offset == 0


def test_variables():
    assert variables(parse("t1 + t3*t1")) == {1, 3}
    assert variables(parse("2")) == set()


@pytest.mark.parametrize("src,t,region", [
    ("1/t1", 0.0, Region.OUTSIDE),
    ("1/t1", 1e-10, Region.BOUNDARY),
    ("sqrt(t1)", -1.0, Region.OUTSIDE),
    ("sqrt(t1)", 0.0, Region.BOUNDARY),
    ("log(t1)", 0.0, Region.OUTSIDE),
    ("t1^0.5", -1.0, Region.OUTSIDE),
    ("t1^-1", 0.0, Region.OUTSIDE),
    ("t1^2", -1.0, Region.INSIDE),
    ("exp(t1)", 1000.0, Region.OUTSIDE),
])
def test_guards(src, t, region):
    assert compile_phi([src]).domain_pred([t]) is region


def test_vector_compile_and_contiguity():
    phi = compile_phi(["t1 + t2", "t1*t2"])
    assert (phi.d_in, phi.d_out) == (2, 2)
    np.testing.assert_array_equal(phi([2.0, 3.0]), [5.0, 6.0])
    with pytest.raises(DimensionError):
        compile_phi(["t1", "t3"])


@pytest.mark.parametrize("src,name,lo,hi,dim", [
    ("t1/t2", "iv_ratio", 0.25, 2.0, 2),
    ("abs(t1)", "absval", -2.0, 2.0, 1),
    ("1/t1", "reciprocal", 0.1, 2.0, 1),
    ("t1^2", "square", -2.0, 2.0, 1),
    ("sqrt(t1)", "sqrt", 0.01, 2.0, 1),
])
def test_matches_builtin_on_grid(src, name, lo, hi, dim):
    e, b = compile_phi([src]), builtin(name)
    pts = GridSpec.uniform(lo, hi, 21 if dim == 2 else 101, dim=dim).points()
    np.testing.assert_allclose(e.func(pts), b.func(pts), rtol=1e-12, atol=0)
    np.testing.assert_array_equal(e.region(pts), b.region(pts))
    t = np.repeat(pts, len(pts), axis=0)
    m = np.tile(pts, (len(pts), 1))
    ve, ce = delta_batch(e, t, m)
    vb, cb = delta_batch(b, t, m)
    np.testing.assert_array_equal(ce, cb)
    np.testing.assert_allclose(ve[ce == 0], vb[cb == 0], rtol=1e-12, atol=1e-15)


def test_gradient_against_finite_differences(rng):
    phi = compile_phi(["t1^t2", "exp(t1)*log(t2)", "sqrt(t1*t2)/(1 + t2^2)", "-t1/t2 + 3*t1"])
    for _ in range(20):
        m = rng.uniform(0.5, 2.0, 2)
        np.testing.assert_allclose(jacobian(phi, m), jacobian(phi, m, FINITE_DIFF), rtol=1e-7, atol=1e-9)


def test_gradient_kink_conventions():
    np.testing.assert_array_equal(gradient(parse("abs(t1)"), [[0.0], [-2.0], [3.0]])[:, 0], [0.0, -1.0, 1.0])
    np.testing.assert_array_equal(gradient(parse("min(t1, t2)"), [[1.0, 1.0], [2.0, 1.0]]), [[1, 0], [0, 1]])


# -- round trip -------------------------------------------------------------

_leaf = st.one_of(
    st.floats(min_value=0, max_value=1e6, allow_nan=False, allow_infinity=False).map(Num),
    st.integers(1, 4).map(Var),
)


def _grow(children):
    return st.one_of(
        children.map(Neg),
        st.tuples(st.sampled_from("+-*/^"), children, children).map(lambda a: BinOp(*a)),
        st.tuples(st.sampled_from(["sqrt", "abs", "exp", "log", "sign"]), children).map(lambda a: Call(a[0], (a[1],))),
        st.tuples(st.sampled_from(["min", "max"]), children, children).map(lambda a: Call(a[0], (a[1], a[2]))),
    )


trees = st.recursive(_leaf, _grow, max_leaves=25)


@settings(max_examples=300, deadline=None)
@given(trees)
def test_print_parse_round_trip(tree):
    assert parse(to_text(tree)) == tree


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="t12()+-*/^,. sqrtminabx0e", max_size=30))
def test_parser_never_crashes(src):
    try:
        parse(src)
    except ExprSyntaxError:
        pass


@settings(max_examples=150, deadline=None)
@given(trees, st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_inside_points_evaluate_finite(tree, point):
    phi = compile_phi([to_text(tree)]) if variables(tree) == set(range(1, max(variables(tree) or {1}) + 1)) else None
    if phi is None:
        return
    t = np.array(point[: phi.d_in])
    if phi.domain_pred(t) is Region.INSIDE:
        assert np.all(np.isfinite(phi(t)))
