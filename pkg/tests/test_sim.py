import dataclasses
import math
from pathlib import Path

import numpy as np
import pytest

from funnelkit import dynmod, fungen, sim, synth
from funnelkit.fungen import AdmissibleRegion, Certificate, FunnelSetup
from funnelkit.plan import plan_waypoints, straight_reference
from funnelkit.polyalg import VarSet

ROOT = Path(__file__).resolve().parents[1]


def oscillator():
    vs = VarSet(["x", "v"])
    x, v = vs.vars("x", "v")
    return dynmod.DynamicsModel("osc", ("x", "v"), (), (), (v, -x), {}, {})


@pytest.fixture(scope="module")
def linear_cert():
    em = fungen.build_model("first_order", {})
    names = em.ref.state + em.ref.inputs
    region = AdmissibleRegion.constant(names, [0, 0], [-0.5, -0.5], [0.5, 0.5], [-1, -1], [1, 1], 1.0)
    st = FunnelSetup(em, region, model=("first_order", {}))
    res = synth.alternate(st, synth.lqr_seed(st))
    assert res.success
    return synth.make_certificate(st, res)


# -- integration --------------------------------------------------------------

def test_oscillator_accuracy():
    r = sim.integrate(oscillator(), None, [1.0, 0.0], 10.0, 1e-3)
    assert np.max(np.abs(r.x[:, 0] - np.cos(r.t))) <= 1e-8


def test_rk4_fourth_order():
    errs = []
    for dt in (0.1, 0.05):
        r = sim.integrate(oscillator(), None, [1.0, 0.0], 2.0, dt)
        errs.append(np.max(np.abs(r.x[-1] - [math.cos(2.0), -math.sin(2.0)])))
    assert 14 <= errs[0] / errs[1] <= 18


def test_constant_dynamics_stay_put():
    vs = VarSet(["x", "u"])
    m = dynmod.DynamicsModel("zero", ("x",), ("u",), (), (vs.var("u") * 0.0,), {"u": (-1, 1)}, {})
    r = sim.integrate(m, lambda t, x: [0.7], [0.3], 1.0, 0.1)
    assert np.all(r.x == 0.3)


def test_feedback_is_clamped():
    vs = VarSet(["x", "u"])
    m = dynmod.DynamicsModel("int", ("x",), ("u",), (), (vs.var("u"),), {"u": (-1, 1)}, {})
    r = sim.integrate(m, lambda t, x: [5.0], [0.0], 1.0, 0.1)
    assert np.isclose(r.x[-1, 0], 1.0)
    assert np.all(r.u <= 1.0)


# -- sampling helpers ---------------------------------------------------------

def test_initial_errors_inside_and_on_boundary():
    rng = np.random.default_rng(0)
    P = np.array([[2.0, 0.3], [0.3, 1.0]])
    E = sim.sample_initial_errors(P, 1.0, 2000, rng)
    V = np.einsum("ni,ij,nj->n", E, P, E)
    assert V.max() <= 1 + 1e-12
    frac = np.mean(np.abs(V - 1) <= 1e-12)
    assert 0.4 <= frac <= 0.6


def test_disturbance_vertices():
    D, kinds = sim.disturbance_schedules([(-0.5, 0.5)], 8, 3, np.random.default_rng(0))
    assert kinds[:2] == ["vertex_max", "vertex_min"]
    assert np.all(D[0] == 0.5) and np.all(D[1] == -0.5)
    assert np.all(np.abs(D) <= 0.5)


# -- Monte Carlo --------------------------------------------------------------

def test_mc_linear_no_violations(linear_cert):
    rep = sim.mc_invariance(linear_cert, trials=100, seed=0)
    assert rep.trials == 100
    assert rep.violations == 0
    assert rep.worst_margin <= 1e-9


def test_mc_deterministic(linear_cert, tmp_path):
    a = sim.mc_invariance(linear_cert, trials=20, seed=3)
    b = sim.mc_invariance(linear_cert, trials=20, seed=3)
    a.write_csv(tmp_path / "a.csv")
    b.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()


def test_mc_sign_flipped_feedback_violates(linear_cert):
    # negative control: destabilizing feedback must be caught
    flipped = dataclasses.replace(linear_cert, U=[[-u for u in row] for row in linear_cert.U])
    rep = sim.mc_invariance(flipped, trials=50, seed=0)
    assert rep.violations > 0
    assert rep.worst_margin > 0


def test_mc_rejects_zero_trials(linear_cert):
    with pytest.raises(ValueError):
        sim.mc_invariance(linear_cert, trials=0)


def test_pendulum_from_reference_stays_inside():
    # model mismatch moves the state off x = x_r, but never out of the funnel
    cert = Certificate.load(ROOT / "certificates" / "pendulum_region1.cert")
    em = cert.error_model()
    ref = straight_reference(em.ref, [0.3, 0.0], [0.0], 2.0, 10)
    inst = fungen.instantiate(cert, ref)
    r = sim.integrate(em.plant, None, ref.x[0], 2.0, 0.01, instance=inst)
    assert r.V[0] == 0.0
    assert r.V.max() < cert.beta
    assert r.V.max() > 0


def test_rollout_plan_stays_in_funnels():
    cert = Certificate.load(ROOT / "certificates" / "pendulum_region1.cert")
    pl = plan_waypoints([0.0, 0.0], [0.0, 0.0], [(2.0, np.array([0.3, np.nan]))], {"r1": cert}, t_goal=4.0)
    em = cert.error_model()
    P = cert.P_at(0.0)
    e0 = np.array([0.05, -0.05])
    e0 *= 0.95 / math.sqrt(e0 @ P @ e0)
    outs = sim.rollout_plan(pl, em.plant, e0)
    assert len(outs) == 2
    for r in outs:
        assert r.V.max() <= cert.beta + 1e-6
    assert abs(outs[1].t[0] - outs[0].t[-1]) <= 1e-12
