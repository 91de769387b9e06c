import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from funnelkit import sosc
from funnelkit.polyalg import Poly, VarSet, monomials_up_to

X1 = VarSet(["x"])
XY = VarSet(["x", "y"])


def random_poly(rng, vs, deg):
    mons = monomials_up_to(len(vs), deg)
    k = min(len(mons), int(rng.integers(2, 7)))
    pick = rng.choice(len(mons), k, replace=False)
    return Poly(vs, {mons[i]: rng.normal() for i in pick})


def planted_sos(rng, nvars, max_half=3):
    vs = VarSet(["x", "y", "z"][:nvars])
    d = int(rng.integers(1, max_half + 1))
    qs = [random_poly(rng, vs, d) for _ in range(int(rng.integers(1, 4)))]
    return sum((q * q for q in qs), Poly(vs))


def exact_value(p, pt):
    total = Fraction(0)
    for m, c in p.terms.items():
        t = Fraction(c)
        for v, e in zip(pt, m):
            t *= Fraction(v) ** e
        total += t
    return total


# -- gram_basis ---------------------------------------------------------------

def test_gram_basis_examples():
    assert sosc.gram_basis(X1, 4) == [(0,), (1,), (2,)]
    assert sosc.gram_basis(XY, 2) == [(0, 0), (1, 0), (0, 1)]


def test_gram_basis_odd_degree():
    with pytest.raises(ValueError):
        sosc.gram_basis(X1, 3)


@pytest.mark.parametrize("k,d", [(1, 1), (2, 2), (3, 2), (3, 3), (4, 1)])
def test_gram_basis_count(k, d):
    vs = VarSet([f"v{i}" for i in range(k)])
    assert len(sosc.gram_basis(vs, 2 * d)) == math.comb(k + d, d)


# -- compile / solve ----------------------------------------------------------

def test_perfect_square():
    x = X1.var("x")
    r = sosc.is_sos(x * x + 2 * x + 1)
    assert r.ok
    basis, Q = r.gram[0]
    assert basis == [(0,), (1,)]
    assert np.allclose(Q, [[1, 1], [1, 1]], atol=1e-6)


def test_negative_at_origin_rejected():
    x = X1.var("x")
    assert not sosc.is_sos(x * x - 1).ok


def test_quartic_gram_reconstruction():
    x, y = XY.vars("x", "y")
    p = 2 * x ** 4 + 2 * x ** 3 * y - x ** 2 * y ** 2 + 5 * y ** 4
    r = sosc.is_sos(p)
    assert r.ok
    assert r.min_gram_eig >= -1e-7
    rec = sosc.gram_reconstruct(XY, *r.gram[0])
    assert (rec - p).max_abs_coeff() <= 1e-7


def test_univariate_lower_bound():
    # x^4 - 3x^2 has minimum -9/4 at x^2 = 3/2; univariate nonnegative = SOS
    x = X1.var("x")
    prog = sosc.SosProgram(X1)
    g = prog.scalar("g")
    prog.add_sos(x ** 4 - 3 * x ** 2 + g)
    prog.minimize(g)
    r = sosc.solve(prog)
    assert r.ok
    assert abs(r.scalars["g"] - 2.25) <= 1e-6
    # the recovered scalar equals the reported SDP objective
    assert abs(r.objective - r.sdp.primal_objective) <= 1e-9
    assert abs(r.objective - r.scalars["g"]) <= 1e-12


def test_bilinear_product_named():
    x = X1.var("x")
    prog = sosc.SosProgram(X1)
    a = prog.free_poly("a", [(0,), (1,)])
    b = prog.scalar("b")
    with pytest.raises(sosc.BilinearError, match="a#0|b"):
        prog.add_sos(a * b + x * x)


def test_recover_fixed_target():
    x, y = XY.vars("x", "y")
    target = 3 * x * x - x * y + 0.5
    prog = sosc.SosProgram(XY)
    q = prog.free_poly("q", monomials_up_to(2, 2))
    prog.add_eq(q - target)
    r = sosc.solve(prog)
    assert r.ok
    assert r.polys["q"].allclose(target, atol=1e-8)


def test_strict_margin_enforced():
    # x^2 is SOS but not strictly: x^2 - 1e-4 (1 + x^2) fails at 0
    x = X1.var("x")
    prog = sosc.SosProgram(X1)
    prog.add_sos(x * x, strict=True)
    assert not sosc.solve(prog).ok
    prog = sosc.SosProgram(X1)
    prog.add_sos(x * x + 1, strict=True)
    assert sosc.solve(prog).ok


def test_round_trip_recheck():
    # recovered decisions re-substituted give constant programs that stay feasible
    x, y = XY.vars("x", "y")
    prog = sosc.SosProgram(XY)
    s = prog.sos_poly("s", sosc.gram_basis(XY, 2))
    g = prog.scalar("g")
    prog.add_sos(x ** 4 + y ** 4 - s * 1.0 + g)
    prog.add_sos(s - 0.1 * (x * x + y * y))
    prog.minimize(g)
    r = sosc.solve(prog)
    assert r.ok
    checks = sosc.check_constraints(prog, r.values)
    assert all(eig >= -1e-7 for _, eig in checks), checks


def test_reduced_basis_drops_unmatchable():
    # x^4 + y^2: half-degree monomial x*y cannot appear, 1 is not needed either
    basis = sosc.reduced_basis({(4, 0), (0, 2)}, 2)
    assert (1, 1) not in basis
    assert (2, 0) in basis and (0, 1) in basis


# -- properties ---------------------------------------------------------------

@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 3))
@settings(max_examples=25, deadline=None)
def test_planted_sos_accepted(seed, nvars):
    rng = np.random.default_rng(seed)
    p = planted_sos(rng, nvars)
    r = sosc.is_sos(p)
    assert r.ok
    rec = sosc.gram_reconstruct(p.varset, *r.gram[0])
    assert (rec - p).max_abs_coeff() <= 1e-7


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=15, deadline=None)
def test_certified_negative_rejected(seed):
    rng = np.random.default_rng(seed)
    p = planted_sos(rng, 2)
    pt = rng.uniform(-1, 1, 2)
    shift = float(exact_value(p, pt)) + 0.05
    q = p - shift
    assert exact_value(q, pt) < 0
    assert not sosc.is_sos(q).ok


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=15, deadline=None)
def test_accepted_is_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p = planted_sos(rng, 3) - 0.01 * float(rng.uniform())
    r = sosc.is_sos(p)
    if r.ok:
        vals = p.evaluate_many(rng.uniform(-2, 2, (10_000, 3)))
        assert vals.min() >= -1e-6
