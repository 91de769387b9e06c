from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from funnelkit.polyalg import (VarSet, Poly, VarSetMismatch, add, sub, mul, scale, differentiate,
                               substitute, evaluate, monomials_up_to, n_monomials, quadratic_form)

XY = VarSet(["x", "y"])
XYZ = VarSet(["x", "y", "z"])


def polys(vs, max_deg=3, max_terms=5, coeff=st.integers(-5, 5)):
    mono = st.tuples(*[st.integers(0, max_deg) for _ in vs.names])
    return st.dictionaries(mono, coeff, max_size=max_terms).map(lambda d: Poly(vs, d))


# -- arithmetic examples ------------------------------------------------------

def test_add_cancellation():
    x = XY.var("x")
    assert add(x + 1, x - 1) == 2 * x


def test_difference_of_squares():
    x, y = XY.vars("x", "y")
    assert mul(x + y, x - y) == x * x - y * y


def test_scale_by_zero_is_empty():
    x = XY.var("x")
    z = scale(x * x + 1, 0)
    assert z.terms == {}
    assert z.is_zero()


def test_mismatched_varsets_raise():
    a = VarSet(["x"]).var("x")
    b = VarSet(["y"]).var("y")
    with pytest.raises(VarSetMismatch):
        add(a, b)
    with pytest.raises(VarSetMismatch):
        mul(a, b)


def test_duplicate_names_rejected():
    with pytest.raises(ValueError):
        VarSet(["x", "x"])


# -- differentiation ----------------------------------------------------------

def test_diff_cube():
    x = VarSet(["x"]).var("x")
    assert differentiate(x ** 3, "x") == 3 * x ** 2


def test_diff_absent_variable():
    vs = VarSet(["x", "t"])
    x = vs.var("x")
    assert differentiate(x * x, "t").is_zero()


def test_diff_mixed():
    x, y = XY.vars("x", "y")
    assert differentiate(x * x * y + x, "x") == 2 * x * y + 1


def test_diff_unknown_variable():
    x = XY.var("x")
    with pytest.raises(KeyError):
        differentiate(x, "w")


# -- substitution -------------------------------------------------------------

def test_subs_poly_binding():
    vs = VarSet(["x", "u"])
    x, u = vs.vars("x", "u")
    got = substitute(x * x + u, {"u": -x})
    assert got == x * x - x


def test_subs_constants():
    x, y = XY.vars("x", "y")
    got = substitute(x * y, {"x": 2, "y": 3})
    assert got.is_constant() and got.constant_term() == 6


def test_subs_fixed_reference_reduction():
    vs = VarSet(["t", "x", "x_r"])
    t, x, xr = vs.vars("t", "x", "x_r")
    V = (1 + t) * (x - xr) ** 2
    got = substitute(V, {"x_r": 0.0})
    assert got.varset.names == ("t", "x")
    tx = VarSet(["t", "x"])
    tt, xx = tx.vars("t", "x")
    assert got == (1 + tt) * xx * xx


# -- evaluation ---------------------------------------------------------------

def test_eval_examples():
    x, y = XY.vars("x", "y")
    assert evaluate(x * x + y * y, [3, 4]) == 25
    assert evaluate(Poly(XY), [1.5, -2]) == 0


def test_eval_dimension_mismatch():
    x = XY.var("x")
    with pytest.raises(ValueError):
        evaluate(x, [1.0])


def test_eval_matches_subs_on_random_polys():
    rng = np.random.default_rng(3)
    for _ in range(100):
        terms = {tuple(rng.integers(0, 4, 3)): rng.normal() for _ in range(6)}
        p = Poly(XYZ, terms)
        pt = rng.uniform(-2, 2, 3)
        via_subs = p.subs({n: float(v) for n, v in zip(XYZ.names, pt)})
        assert via_subs.is_constant()
        assert np.isclose(p.evaluate(pt), via_subs.constant_term(), rtol=1e-12, atol=1e-12)


def _exact_eval(p: Poly, pt):
    fp = [Fraction(float(v)) for v in pt]
    total = Fraction(0)
    scale_ = Fraction(0)
    for m, c in p.terms.items():
        term = Fraction(c)
        for v, e in zip(fp, m):
            term *= v ** e
        total += term
        scale_ += abs(term)
    return total, scale_


def test_eval_accuracy_degree8():
    # error bound relative to sum |c_m z^m|, the scale of the term sum
    rng = np.random.default_rng(11)
    vs = VarSet(["a", "b", "c"])
    worst = 0.0
    for _ in range(200):
        mons = monomials_up_to(3, 8)
        pick = rng.choice(len(mons), 12, replace=False)
        p = Poly(vs, {mons[k]: rng.uniform(-1e3, 1e3) for k in pick})
        pts = rng.uniform(-1.5, 1.5, (5, 3))
        vals = p.evaluate_many(pts)
        for v, pt in zip(vals, pts):
            exact, sc = _exact_eval(p, pt)
            worst = max(worst, abs(Fraction(float(v)) - exact) / sc)
    assert worst <= 1e-12


# -- serialization ------------------------------------------------------------

def test_dumps_format():
    x, y = XY.vars("x", "y")
    text = (2 * x * y * y - 0.5).dumps()
    lines = text.strip().splitlines()
    assert lines[0] == "vars x y"
    assert sorted(lines[1:]) == sorted(["-0.5 0 0", "2.0 1 2"])


def test_loads_bad_header():
    with pytest.raises(ValueError):
        Poly.loads("0.5 1 2\n")


@given(polys(XYZ, coeff=st.floats(-1e3, 1e3, allow_nan=False)))
def test_serialization_round_trip(p):
    q = Poly.loads(p.dumps())
    assert q.varset == p.varset
    assert set(q.terms) == set(p.terms)
    for m, c in p.terms.items():
        assert abs(q.terms[m] - c) <= 1e-15 * max(1.0, abs(c))


# -- properties ---------------------------------------------------------------

@given(polys(XYZ), polys(XYZ), polys(XYZ))
def test_ring_associativity_distributivity(a, b, c):
    assert (a + b) + c == a + (b + c)
    assert a * (b + c) == a * b + a * c
    assert a * b == b * a


@given(polys(XYZ), polys(XYZ), st.sampled_from(XYZ.names))
def test_product_rule(a, b, v):
    assert differentiate(a * b, v) == differentiate(a, v) * b + a * differentiate(b, v)


@given(polys(XYZ), polys(XY, max_deg=2), st.lists(st.floats(-2, 2), min_size=2, max_size=2))
@settings(max_examples=60)
def test_substitution_consistency(p, img, pt):
    # z := img(x, y); evaluating the composition equals evaluating p at the extended point
    q = p.subs({"x": XY.var("x"), "y": XY.var("y"), "z": img})
    zval = img.evaluate(pt)
    lhs = q.evaluate(pt)
    rhs = p.evaluate([pt[0], pt[1], zval])
    assert np.isclose(lhs, rhs, rtol=1e-9, atol=1e-9 * (1 + abs(rhs)))


@given(polys(XYZ))
def test_canonical_no_zero_terms(p):
    assert all(c != 0 for c in (p - p).terms.values())
    assert (p - p).is_zero()
    assert all(abs(c) >= 1e-14 for c in p.terms.values())


def test_monomial_count():
    for k in range(1, 5):
        for d in range(0, 5):
            assert len(monomials_up_to(k, d)) == n_monomials(k, d)


def test_quadratic_form():
    P = np.array([[2.0, 0.5], [0.5, 1.0]])
    q = quadratic_form(XY, ["x", "y"], P)
    e = np.array([0.3, -0.7])
    assert np.isclose(q.evaluate(e), e @ P @ e)
