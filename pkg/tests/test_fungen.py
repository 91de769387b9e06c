import dataclasses
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from funnelkit import dynmod, fungen, synth
from funnelkit.fungen import (AdmissibleRegion, Certificate, CertificateError, FunnelSetup, Reference,
                              RegionError, check_membership, instantiate, levelset_box, quad_box)
from funnelkit.plan import straight_reference
from funnelkit.polyalg import Poly, VarSet, VarSetMismatch

ROOT = Path(__file__).resolve().parents[1]
CERTS = ROOT / "certificates"
SHIPPED = sorted(p.name for p in CERTS.glob("*.cert"))


def load(name):
    return Certificate.load(CERTS / name)


def integrator_model():
    # x' = u tracked by x_r' = u_r: e' = u - u_r
    vs = VarSet(["x", "u"])
    plant = dynmod.DynamicsModel("int", ("x",), ("u",), (), (vs.var("u"),), {"u": (-10, 10)}, {})
    rvs = VarSet(["x_r", "u_r"])
    ref = dynmod.ReferenceModel(("x_r",), ("u_r",), (rvs.var("u_r"),), {"x_r": (-1, 1), "u_r": (-1, 1)})
    return dynmod.identity_error_model(plant, ref, ("e",), {"e": 2.0})


def linear_setup(name="first_order", half=0.1, track=2.0):
    params = {f"track_e_{n}": track for n in dynmod.LINEAR_PRESETS[name][2]}
    em = fungen.build_model(name, params)
    names = em.ref.state + em.ref.inputs
    n = len(names)
    region = AdmissibleRegion.constant(names, [0] * n, [-half] * n, [half] * n, [-1] * n, [1] * n, 1.0)
    return FunnelSetup(em, region, model=(name, params))


def pendulum_setup(cert):
    return FunnelSetup(cert.error_model(), cert.region, cert.grid, cert.degrees,
                       stationary=cert.stationary, model=(cert.model, cert.model_params))


# -- Lie derivative -----------------------------------------------------------

def test_lie_derivative_stable_scalar():
    setup = linear_setup()
    em = setup.em
    e = Poly.var(setup.Ze, "e_x")
    V = e * e
    # u = u_r: e' = -e
    dv = fungen.lie_derivative(V, em, setup.full_inputs([Poly(setup.Z)]), [], target=setup.Z)
    assert dv == (Poly.var(setup.Z, "e_x") ** 2) * -2.0


def test_lie_derivative_feedforward_cancels():
    em = integrator_model()
    Z = VarSet(em.errors + em.ref.state + em.ref.inputs)
    e, ur = Poly.var(Z, "e"), Poly.var(Z, "u_r")
    dv = fungen.lie_derivative(Poly.var(VarSet(["e"]), "e") ** 2, em, [ur - e], [], target=Z)
    assert dv == e * e * -2.0


def test_lie_derivative_varset_mismatch():
    setup = linear_setup()
    with pytest.raises(VarSetMismatch):
        fungen.lie_derivative(VarSet(["w"]).var("w") ** 2, setup.em, setup.full_inputs([Poly(setup.Z)]), [],
                              target=setup.Z)


def test_lie_derivative_pendulum_finite_difference():
    cert = load("pendulum_region1.cert")
    em = cert.error_model()
    setup = pendulum_setup(cert)
    U = cert.U_at(0.0)
    dv = fungen.lie_derivative(cert.V_at(0.0), em, setup.full_inputs(U), None)
    tp = dynmod.taylorize("sin", "th", 0.0, 3).poly
    P = cert.P_at(0.0)
    lo, hi = cert.region.box_at(0.0)
    rng = np.random.default_rng(0)
    Zi = [dv.varset.index(n) for n in em.errors + em.ref.state + em.ref.inputs + em.disturbances]

    def closed(z, ur):
        x, xr = z[:2], z[2:]
        e = x - xr
        u = ur + np.array([Ui.evaluate(np.concatenate([e, xr, ur])) for Ui in U])
        return np.concatenate([em.plant.f(x, u), [xr[1], ur[0]]])

    def rk4(z, ur, h):
        k1 = closed(z, ur)
        k2 = closed(z + h / 2 * k1, ur)
        k3 = closed(z + h / 2 * k2, ur)
        k4 = closed(z + h * k3, ur)
        return z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    def Vz(z):
        e = z[:2] - z[2:]
        return e @ P @ e

    errs = {}
    for h in (2e-3, 1e-3):
        worst = 0.0
        rng = np.random.default_rng(0)
        for _ in range(100):
            xr = rng.uniform(lo[:2] * 0.8, hi[:2] * 0.8)
            ur = rng.uniform(lo[2:] * 0.8, hi[2:] * 0.8)
            e0 = rng.normal(size=2)
            e0 *= rng.uniform(0.2, 0.9) / math.sqrt(e0 @ P @ e0)
            z = np.concatenate([xr + e0, xr])
            for _ in range(20):  # move along the closed-loop trajectory first
                z = rk4(z, ur, 0.01)
            fd = (Vz(rk4(z, ur, h)) - Vz(rk4(z, ur, -h))) / (2 * h)
            th = z[0]
            rho = math.sin(th) - tp.evaluate([th])
            pt = np.zeros(len(dv.varset))
            pt[Zi] = np.concatenate([z[:2] - z[2:], z[2:], ur, [rho]])
            worst = max(worst, abs(fd - dv.evaluate(pt)))
        errs[h] = worst
    assert errs[1e-3] <= 1e-5
    # second-order agreement: halving h quarters the discrepancy (up to roundoff)
    assert errs[1e-3] <= errs[2e-3] / 3 or errs[1e-3] <= 1e-9


# -- boundary programs --------------------------------------------------------

def test_linear_controller_step_gamma():
    setup = linear_setup()
    V = [Poly.var(setup.Ze, "e_x") ** 2]
    r = synth.step_controller(setup, V)
    assert r.ok
    assert r.gamma <= -2.0 * 1.0
    # the feedback part is negative error feedback
    K = r.slot.U[0][0].coefficient(tuple(1 if n == "e_x" else 0 for n in setup.Z.names))
    assert K < 0


def test_pendulum_region1_knot_feasible():
    cert = load("pendulum_region1.cert")
    r = synth.step_controller(pendulum_setup(cert), cert.V)
    assert r.ok and r.gamma < 0
    assert abs(r.gamma - cert.gamma) <= 1e-3 * abs(cert.gamma) + 1e-6


def test_pendulum_tracking_box_too_small():
    # e_th' = e_om - 0.2 sin(th): holding |e_th| tiny at th_r = 0.5 needs |e_om| near 0.2 sin(0.5) > 0.01
    assert 0.2 * math.sin(0.5 - 0.01) > 0.01
    cert = load("pendulum_region1.cert")
    params = dict(cert.model_params, track_e_th=0.01, track_e_om=0.01)
    em = fungen.build_model("pendulum", params)
    setup = FunnelSetup(em, cert.region, cert.grid, cert.degrees, stationary=True, model=("pendulum", params))
    res = synth.alternate(setup, synth.lqr_seed(setup), synth.AltOptions(max_rounds=4))
    assert not res.success
    assert res.gamma > 0


# -- instantiate --------------------------------------------------------------

def paper_region1(cert):
    names = cert.region.names
    return AdmissibleRegion.constant(names, [0, 0, 0], [-10, -10, -1], [10, 10, 1],
                                     [-0.5, -1, -0.7], [0.5, 1, 0.7], 1.0)


def test_nominal_reference_has_zero_value():
    cert = load("pendulum_region1.cert")
    ref = Reference([0.0, 0.5, 1.0], np.zeros((3, 2)), np.zeros((2, 1)))
    inst = instantiate(cert, ref)
    for t in np.linspace(0, 1, 11):
        xr, _ = inst.reference_at(t)
        assert inst.V(t, xr) < cert.beta


def test_constant_input_reference_membership():
    cert = load("pendulum_region1.cert")
    em = cert.error_model()
    paper = dataclasses.replace(cert, region=paper_region1(cert))
    ok = straight_reference(em.ref, [0.0, 0.0], [0.69], 1.0, 10)
    assert check_membership(paper, ok) is None
    instantiate(paper, ok)
    bad = straight_reference(em.ref, [0.0, 0.0], [0.8], 1.0, 10)
    with pytest.raises(RegionError, match="u_r"):
        instantiate(paper, bad)
    # the synthesized region is slightly narrower than the printed one
    hw = cert.region.half_width("u_r")
    instantiate(cert, straight_reference(em.ref, [0.0, 0.0], [hw - 0.01], 1.0, 10))
    with pytest.raises(RegionError, match="sample"):
        instantiate(cert, bad)


def test_feedback_is_clamped():
    cert = load("pendulum_region1.cert")
    inst = instantiate(cert, Reference([0.0, 1.0], np.zeros((2, 2)), np.zeros((1, 1))))
    u = inst.control(0.0, np.array([[0.4, -3.0], [-0.4, 3.0]]))
    assert np.all(np.abs(u) <= 1.15 + 1e-12)


# -- level-set boxes ----------------------------------------------------------

def test_quad_box_examples():
    assert np.allclose(quad_box(np.eye(2)), [1, 1])
    assert np.allclose(quad_box(np.diag([4.0, 1.0])), [0.5, 1.0])
    with pytest.raises(CertificateError):
        quad_box(np.diag([1.0, -1.0]))


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=20, deadline=None)
def test_quad_box_contains_level_set(seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(3, 3))
    P = M @ M.T + 0.05 * np.eye(3)
    box = quad_box(P)
    L = np.linalg.cholesky(P)
    d = rng.normal(size=(10_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    E = np.linalg.solve(L.T, d.T).T
    assert np.all(np.abs(E) <= box * (1 + 1e-12))


# -- regions ------------------------------------------------------------------

def test_region_invariants():
    names = ("a", "b")
    with pytest.raises(ValueError, match="contain 0"):
        AdmissibleRegion.constant(names, [0, 0], [0.1, -1], [1, 1], [-1, -1], [1, 1])
    with pytest.raises(ValueError, match="empty"):
        AdmissibleRegion.constant(names, [2, 0], [-1, -1], [1, 1], [-1, -1], [1, 1], 0.5)


def test_free_coordinate_unbounded():
    r = AdmissibleRegion.constant(("a", "b"), [0, 1], [-np.inf, -1], [np.inf, 1], [-np.inf, 0], [np.inf, 2], 0.0)
    lo, hi = r.box_at(0.0)
    assert lo[0] == -np.inf and hi[0] == np.inf
    assert lo[1] == hi[1] == 1


@given(st.floats(0, 3), st.floats(0, 3))
def test_region_monotone_in_p(p1, p2):
    p1, p2 = sorted((p1, p2))
    r = AdmissibleRegion.constant(("a", "b", "c"), [0, 0.5, 0], [-1, -0.3, 0], [1, 0.2, 0], [-0.8, -5, -1],
                                  [0.8, 5, 1])
    lo1, hi1 = r.with_p(p1).box_at(0)
    lo2, hi2 = r.with_p(p2).box_at(0)
    assert np.all(lo2 <= lo1) and np.all(hi1 <= hi2)


# -- shipped certificates -----------------------------------------------------

@pytest.mark.parametrize("name", SHIPPED)
def test_master_sampling_property(name):
    cert = load(name)
    a = fungen.audit(cert, 100_000, seed=0)
    assert a.ok, a
    assert a.n_points >= 100_000 - 200
    assert a.worst_decrease <= cert.gamma / 2 < 0


@pytest.mark.parametrize("name", SHIPPED)
def test_origin_and_containment(name):
    cert = load(name)
    em = cert.error_model()
    widths = np.array([em.tracking_box[n] for n in em.errors])
    knots = [0.0] if cert.stationary else list(cert.grid.knots)
    mids = [] if cert.stationary else [(a + b) / 2 for a, b in zip(knots, knots[1:])]
    for t in knots + mids:
        assert cert.V_at(t).constant_term() <= cert.beta - 1e-4
        assert np.all(levelset_box(cert, t) <= widths)


@pytest.mark.parametrize("name", SHIPPED)
def test_feedback_within_input_bounds(name):
    cert = load(name)
    em = cert.error_model()
    rng = np.random.default_rng(1)
    P = cert.P_at(0.0)
    L = np.linalg.cholesky(P)
    d = rng.normal(size=(20_000, P.shape[0]))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    E = np.linalg.solve(L.T, d.T).T * rng.uniform(0, 1, (20_000, 1))
    lo, hi = cert.region.box_at(0.0)
    lo, hi = np.where(np.isfinite(lo), lo, -10), np.where(np.isfinite(hi), hi, 10)
    R = rng.uniform(lo, hi, (20_000, len(lo)))
    U = R[:, len(em.ref.state):] + np.stack([u.evaluate_many(np.hstack([E, R])) for u in cert.U_at(0.0)], 1)
    for i, n in enumerate(em.plant.inputs):
        a, b = em.plant.input_box[n]
        assert U[:, i].min() >= a - 1e-7 and U[:, i].max() <= b + 1e-7


def test_certificate_round_trip(tmp_path):
    cert = load("pendulum_region1.cert")
    text = cert.dumps()
    again = Certificate.loads(text)
    assert again.dumps() == text
    assert again.V[0] == cert.V[0]
    assert again.region.p == cert.region.p


def test_corrupt_certificate_rejected():
    text = load("pendulum_region1.cert").dumps()
    with pytest.raises(CertificateError):
        Certificate.loads(text.replace("[V 0]", "[W 0]"))
    with pytest.raises(CertificateError):
        Certificate.loads(text.replace("beta = 1.0", "beta = one"))
