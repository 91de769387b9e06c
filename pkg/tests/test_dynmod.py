import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from funnelkit import dynmod
from funnelkit.polyalg import Poly, VarSet


def test_taylor_sin_cos():
    vs = VarSet(["x"])
    x = vs.var("x")
    assert dynmod.taylorize("sin", "x", 0.0, 3).poly.allclose(x - x ** 3 * (1 / 6), atol=1e-15)
    assert dynmod.taylorize("cos", "x", 0.0, 2).poly.allclose(1 - x * x * 0.5, atol=1e-15)


def test_taylor_rejects_degree_zero():
    with pytest.raises(ValueError):
        dynmod.taylorize("sin", "x", 0.0, 0)


def test_sin_remainder_grid():
    tp = dynmod.taylorize("sin", "x", 0.0, 3)
    xs = np.linspace(-0.7, 0.7, 20001)
    err = np.abs(np.sin(xs) - tp.poly.evaluate_many(xs[:, None]))
    bound = tp.remainder_bound(0.7)
    assert abs(bound - 0.7 ** 5 / 120) <= 1e-15
    assert err.max() <= bound <= 1.41e-3


@given(st.sampled_from(["sin", "cos"]), st.floats(-3, 3), st.integers(1, 5), st.floats(0.05, 1.0))
@settings(max_examples=40)
def test_taylor_remainder_holds(func, center, degree, radius):
    tp = dynmod.taylorize(func, "x", center, degree)
    xs = center + np.linspace(-radius, radius, 2001)
    exact = np.sin(xs) if func == "sin" else np.cos(xs)
    err = np.abs(exact - tp.poly.evaluate_many(xs[:, None]))
    assert err.max() <= tp.remainder_bound(radius) * (1 + 1e-9) + 1e-15


# -- pendulum -----------------------------------------------------------------

def test_pendulum_preset_values():
    plant, ref, em = dynmod.preset_pendulum()
    assert plant.input_box["u"] == (-1.15, 1.15)
    assert em.tracking_box == {"e_th": 0.2, "e_om": 0.2}
    assert np.allclose(plant.eval_field([0.0, 1.0], [0.0]), [1.0, 0.0])
    assert np.allclose(plant.f([0.0, 1.0], [0.0]), [1.0, 0.0])


def test_pendulum_poly_field_within_remainder():
    plant, _, em = dynmod.preset_pendulum(theta_envelope=1.1)
    R = em.envelope["sin_remainder"]
    rng = np.random.default_rng(0)
    x = np.column_stack([rng.uniform(-1.1, 1.1, 10_000), rng.uniform(-2, 2, 10_000)])
    u = rng.uniform(-1.15, 1.15, (10_000, 1))
    vs = plant.varset
    pts = np.hstack([x, u, np.zeros((10_000, 1))])
    poly = np.column_stack([f.evaluate_many(pts) for f in plant.field])
    exact = plant.f(x, u)
    dev = np.abs(poly - exact)
    assert dev[:, 0].max() <= 0.2 * R + 1e-15
    assert dev[:, 1].max() <= R + 1e-15


def test_pendulum_zero_error_not_invariant():
    # reference dynamics differ from the plant, so e = 0 is not invariant under u = u_r
    _, _, em = dynmod.preset_pendulum()
    vs = em.varset
    bind = {"e_th": 0.0, "e_om": 0.0, "rho": 0.0, "u": Poly.var(vs, "u_r")}
    res = [f.subs(bind, vs) for f in em.field]
    assert not all(r.is_zero() for r in res)


# -- bicycle ------------------------------------------------------------------

def test_bicycle_preset_values():
    plant, ref, em = dynmod.preset_bicycle()
    assert plant.disturbance_box["d"] == (-0.05, 0.05)
    assert dynmod.BICYCLE_L == 0.3
    assert dynmod.BICYCLE_TASKS["maneuver"]["v_nominal"] == 1.5
    assert plant.input_box == {"u1": (-1.0, 1.0), "u2": (-5.0, 5.0)}
    xdot = plant.f([0.0, 0.0, 0.0, 1.0], [0.0, 0.0])
    assert np.allclose(xdot[:2], [0.0, 1.0])


def test_bicycle_zero_error_invariant():
    plant, ref, em = dynmod.preset_bicycle()
    # f(x_r, u_r, 0) - f_r(x_r, u_r) == 0 symbolically
    rvs = ref.varset
    bind = {"x": Poly.var(rvs, "x_r"), "y": Poly.var(rvs, "y_r"), "th": Poly.var(rvs, "th_r"),
            "v": Poly.var(rvs, "v_r"), "u1": Poly.var(rvs, "u_r1"), "u2": Poly.var(rvs, "u_r2"), "d": 0.0}
    for f, fr in zip(plant.field, ref.field):
        assert (f.subs(bind, rvs) - fr).is_zero()
    # and in error coordinates with u = u_r, d = 0
    vs = em.varset
    ebind = {"e_f": 0.0, "e_l": 0.0, "e_th": 0.0, "e_v": 0.0, "d_f": 0.0, "d_l": 0.0,
             "u1": Poly.var(vs, "u_r1"), "u2": Poly.var(vs, "u_r2")}
    for f in em.field:
        assert f.subs(ebind, vs).is_zero()


def test_bicycle_error_map_inverse():
    _, _, em = dynmod.preset_bicycle()
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 4))
    xr = rng.normal(size=(200, 4))
    e = em.to_error(x, xr)
    assert np.allclose(em.from_error(e, xr), x, atol=1e-12)


def test_bicycle_error_field_matches_exact_dynamics():
    # finite-difference oracle: d/dt to_error(x, x_r) along exact plant and reference
    plant, ref, em = dynmod.preset_bicycle(sin_degree=1, cos_degree=2)
    rng = np.random.default_rng(2)
    h = 1e-6
    rho_s, rho_c = em.envelope["sin_remainder"], em.envelope["cos_remainder"]
    for _ in range(200):
        xr = np.array([rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(0.5, 2.5)])
        ur = rng.uniform(-0.5, 0.5, 2)
        e = rng.uniform(-0.3, 0.3, 4)
        e[2] = rng.uniform(-0.35, 0.35)
        u = rng.uniform(-1, 1, 2)
        x = em.from_error(e, xr)
        x1 = x + h * plant.f(x, u)
        xr1 = xr + h * ref.f(xr, ur)
        x0 = x - h * plant.f(x, u)
        xr0 = xr - h * ref.f(xr, ur)
        edot = (em.to_error(x1, xr1) - em.to_error(x0, xr0)) / (2 * h)
        F = em.eval_field(e, xr, ur, u, [0.0, 0.0])
        v = xr[3] + e[3]
        tol = np.array([v * rho_c, v * rho_s, 0, 0]) + 1e-5
        assert np.all(np.abs(edot - F) <= tol), (edot, F)


def test_model_file_round_trip():
    plant, ref, em = dynmod.preset_pendulum()
    p2 = dynmod.load_model(dynmod.dump_model(plant))
    assert p2.state == plant.state and p2.input_box == plant.input_box
    assert all(a == b for a, b in zip(p2.field, plant.field))
    r2 = dynmod.load_model(dynmod.dump_model(ref))
    assert r2.box == ref.box
    e2 = dynmod.load_model(dynmod.dump_model(em))
    assert e2["tracking_box"] == em.tracking_box
    assert all(a == b for a, b in zip(e2["field"], em.field))


def test_field_length_invariant():
    vs = VarSet(["x", "u"])
    with pytest.raises(ValueError):
        dynmod.DynamicsModel("bad", ("x",), ("u",), (), (vs.var("x"), vs.var("u")), {"u": (-1, 1)}, {})
    with pytest.raises(ValueError):
        dynmod.DynamicsModel("bad", ("x",), ("u",), (), (VarSet(["x", "w"]).var("w"),), {"u": (-1, 1)}, {})
