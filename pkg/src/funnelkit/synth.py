"""Offline certificate search: bilinear alternation and the line search over p."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from . import sdp as sdpmod
from .fungen import (AdmissibleRegion, Certificate, CertSlot, Degrees, FunnelSetup, TimeGrid,
                     audit, boundary_program, quad_matrix)
from .polyalg import Poly, quadratic_form
from .sosc import compile as sos_compile, recover

log = logging.getLogger(__name__)

DEFAULT_TOL = sdpmod.Tolerances(feas_tol=1e-8, gap_tol=1e-8, max_iter=150)
RELAXED_TOL = sdpmod.Tolerances(feas_tol=1e-6, gap_tol=1e-6, max_iter=300)


class SynthesisError(RuntimeError):
    pass


@dataclass
class StepResult:
    step: str
    status: str
    gamma: float
    solve_time: float
    slot: CertSlot | None = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")


@dataclass
class AltOptions:
    max_rounds: int = 25
    stall_tol: float = 1e-6
    stall_rounds: int = 3
    eps: float = 1e-4          # success when gamma < -eps
    backend: str = "ipm"
    freeze_v: bool = False     # controller steps only (shared-V certificates for chaining)
    tolerances: sdpmod.Tolerances = field(default_factory=lambda: DEFAULT_TOL)


@dataclass
class AltResult:
    success: bool
    reason: str
    gamma: float
    slot: CertSlot | None
    trace: list  # (round, step, gamma, solve_time, status)

    def gamma_trace(self) -> list[float]:
        return [g for (_, _, g, _, _) in self.trace]


def _solve(prog, opts: AltOptions):
    P, rec = sos_compile(prog)
    t0 = time.perf_counter()
    sol = sdpmod.solve(P, opts.tolerances, backend=opts.backend)
    if sol.status == "max_iter":
        sol = sdpmod.solve(P, RELAXED_TOL, backend=opts.backend)
    dt = time.perf_counter() - t0
    if not sol.ok:
        return sol.status, None, dt
    return sol.status, recover(prog, rec, sol), dt


def step_controller(setup: FunnelSetup, V: Sequence[Poly], opts: AltOptions | None = None) -> StepResult:
    """V fixed; search feedback, multipliers and gamma."""
    opts = opts or AltOptions()
    h = boundary_program(setup, CertSlot(V=list(V)), "V")
    status, res, dt = _solve(h.prog, opts)
    if res is None:
        return StepResult("controller", status, math.inf, dt, detail="SDP did not solve")
    U = [[res.polys[f"U{k}:{i}"] for i in range(len(setup.input_pairs))] for k in range(setup.n_knots)]
    lam = {key: lp.fix(res.values) for key, lp in h.lam.items()}
    s_in = {key: sp.fix(res.values) for key, sp in h.s_in.items()}
    return StepResult("controller", status, res.scalars["gamma"], dt, CertSlot(list(V), U, lam, s_in))


def step_certificate(setup: FunnelSetup, slot: CertSlot, opts: AltOptions | None = None) -> StepResult:
    """Feedback and multipliers fixed; search V and gamma."""
    opts = opts or AltOptions()
    h = boundary_program(setup, slot, "U")
    status, res, dt = _solve(h.prog, opts)
    if res is None:
        return StepResult("certificate", status, math.inf, dt, detail="SDP did not solve")
    V = [res.polys[f"V{k}"].lift(setup.Ze) for k in range(setup.n_knots)]
    return StepResult("certificate", status, res.scalars["gamma"], dt, CertSlot(V, slot.U, slot.lam, slot.s_in))


def evaluate_gamma(setup: FunnelSetup, slot: CertSlot, opts: AltOptions | None = None) -> float:
    """Best gamma with every certificate part frozen (only face multipliers searched)."""
    opts = opts or AltOptions()
    h = boundary_program(setup, slot, "all")
    status, res, _ = _solve(h.prog, opts)
    return res.scalars["gamma"] if res is not None else math.inf


def alternate(setup: FunnelSetup, V0: Sequence[Poly], opts: AltOptions | None = None,
              log_rows: list | None = None, tag: str = "") -> AltResult:
    """Alternate controller and certificate steps until gamma < -eps, a stall, or the round cap."""
    opts = opts or AltOptions()
    V = list(V0)
    trace = []
    best = math.inf
    best_slot = None
    stall = 0
    prev = math.inf
    for rnd in range(1, opts.max_rounds + 1):
        for which in (("controller",) if opts.freeze_v else ("controller", "certificate")):
            if which == "controller":
                r = step_controller(setup, V, opts)
            else:
                r = step_certificate(setup, best_slot, opts)
            trace.append((rnd, which, r.gamma, r.solve_time, r.status))
            if log_rows is not None:
                log_rows.append({"tag": tag, "round": rnd, "step": which, "gamma": r.gamma,
                                 "solve_time": r.solve_time, "status": r.status})
            log.info("%s round %d %s: gamma=%.6g (%s, %.2fs)", tag, rnd, which, r.gamma, r.status, r.solve_time)
            if not r.ok:
                if best_slot is not None and which == "certificate":
                    # keep the last valid pair and report the failing step
                    return AltResult(best < -opts.eps, f"{which} step failed: {r.status}", best, best_slot, trace)
                return AltResult(False, f"{which} step failed in round {rnd}: {r.status}", best, best_slot, trace)
            if r.gamma <= best + opts.stall_tol:
                best = min(best, r.gamma)
                best_slot = r.slot
            if best < -opts.eps:
                return AltResult(True, f"gamma < 0 in round {rnd} ({which})", best, best_slot, trace)
            if which == "certificate":
                V = best_slot.V
        if opts.freeze_v:
            return AltResult(False, "controller step with frozen V did not reach gamma < 0", best, best_slot, trace)
        if abs(prev - best) < opts.stall_tol:
            stall += 1
            if stall >= opts.stall_rounds:
                return AltResult(False, f"stalled after round {rnd}", best, best_slot, trace)
        else:
            stall = 0
        prev = best
    return AltResult(False, f"round cap {opts.max_rounds} reached", best, best_slot, trace)


# ---------------------------------------------------------------------------
# seeds


def linearize(setup: FunnelSetup, t: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Error dynamics Jacobians at e = 0, d = 0, u = u_r and the nominal reference."""
    em = setup.em
    r = setup.region.nominal_at(t)
    r = np.where(np.isfinite(r), r, 0.0)
    ne, nu = len(em.errors), len(em.plant.inputs)
    pt = np.concatenate([np.zeros(ne), r, r[len(em.ref.state):], np.zeros(len(em.disturbances))])
    A = np.array([[F.diff(e).evaluate(pt) for e in em.errors] for F in em.field])
    B = np.array([[F.diff(u).evaluate(pt) for u in em.plant.inputs] for F in em.field])
    assert B.shape == (ne, nu)
    return A, B


def lqr_seed(setup: FunnelSetup, Q=None, R=None, fill: float = 0.7) -> list[Poly]:
    """LQR cost-to-go shapes scaled so the level set fills ``fill`` of the tracking box."""
    em = setup.em
    ne = len(em.errors)
    Q = np.eye(ne) if Q is None else np.asarray(Q, float)
    out = []
    times = [0.0] if setup.stationary else list(setup.grid.knots)
    w = np.array([em.tracking_box[n] for n in em.errors])
    for t in times:
        A, B = linearize(setup, t)
        Rm = np.eye(B.shape[1]) if R is None else np.atleast_2d(np.asarray(R, float))
        S = scipy.linalg.solve_continuous_are(A, B, Q, Rm)
        Si = np.linalg.inv(S)
        c = np.max(np.diag(Si) / (fill * w) ** 2)
        out.append(quadratic_form(setup.Ze, em.errors, c * S))
    return out


def scaled_seed(P: np.ndarray, setup: FunnelSetup, fill: float = 0.9) -> list[Poly]:
    """Quadratic seed of a given shape, rescaled to fit in the tracking box."""
    em = setup.em
    w = np.array([em.tracking_box[n] for n in em.errors])
    Pi = np.linalg.inv(P)
    c = np.max(np.diag(Pi) / (fill * w) ** 2)
    return [quadratic_form(setup.Ze, em.errors, c * P)] * setup.n_knots


# ---------------------------------------------------------------------------
# certificates from slots


def make_certificate(setup: FunnelSetup, result: AltResult, info: dict | None = None) -> Certificate:
    slot = result.slot
    mult = {}
    for (j, v), lam in slot.lam.items():
        mult[f"lam_{j}_{v}"] = lam
    for (j, i, face), s in slot.s_in.items():
        mult[f"s_{j}_{i}_{face}"] = s
    return Certificate(setup.model_name, dict(setup.model_params), setup.grid, setup.region,
                       list(slot.V), [list(u) for u in slot.U], gamma=float(result.gamma),
                       degrees=setup.degrees, multipliers=mult, stationary=setup.stationary,
                       info=dict(info or {}))


# ---------------------------------------------------------------------------
# line search over p


@dataclass
class ExpandResult:
    p: float
    certificate: Certificate
    history: list  # (p, success, gamma, rounds)
    log_rows: list


def expand_region(make_setup: Callable[[float], FunnelSetup], seed: Callable[[FunnelSetup], list],
                  opts: AltOptions | None = None, p_tol: float = 0.01, p_start: float = 0.1,
                  p_max: float = 64.0, audit_points: int = 20_000, seed_rng: int = 0) -> ExpandResult:
    """Largest p with a certificate: doubling from ``p_start`` then bisection.

    ``make_setup(p)`` builds the setup for a given p; ``seed(setup)`` gives
    the initial V for the first attempt. Later attempts warm-start from the
    last feasible certificate. Bisection stops when the bracket is within
    ``p_tol`` relative. Every accepted certificate must pass the sampling audit.
    """
    opts = opts or AltOptions()
    rows: list = []
    history = []

    def attempt(p, V0):
        st = make_setup(p)
        res = alternate(st, V0, opts, rows, tag=f"p={p:.6g}")
        cert = None
        if res.success:
            cert = make_certificate(st, res, {"p": p, "reason": res.reason})
            a = audit(cert, audit_points, seed=seed_rng)
            if not a.ok:
                log.warning("audit rejected p=%g: %s", p, a)
                res = AltResult(False, f"audit failed: {a.detail}", res.gamma, res.slot, res.trace)
                cert = None
        history.append((p, res.success, res.gamma, len(res.trace)))
        return res, cert, st

    st0 = make_setup(0.0)
    res0, cert0, _ = attempt(0.0, seed(st0))
    if cert0 is None:
        raise SynthesisError(f"nominal funnel (p = 0) not certified: {res0.reason}; fix the nominal funnel first")
    best_p, best_cert = 0.0, cert0
    p = p_start
    bad = None
    while p <= p_max:
        res, cert, st = attempt(p, best_cert.V)
        if cert is None:
            bad = p
            break
        best_p, best_cert = p, cert
        if st.region.saturated(2 * p):
            return ExpandResult(p, cert, history, rows)
        p *= 2
    if bad is None:
        return ExpandResult(best_p, best_cert, history, rows)
    lo, hi = best_p, bad
    while (hi - lo) > p_tol * max(lo, 1e-12) and (hi - lo) > 1e-6:
        mid = 0.5 * (lo + hi)
        res, cert, st = attempt(mid, best_cert.V)
        if cert is None:
            hi = mid
        else:
            lo, best_cert = mid, cert
    return ExpandResult(lo, best_cert, history, rows)


def write_log(rows: Sequence[dict], path) -> None:
    fields = ["tag", "round", "step", "gamma", "solve_time", "status"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in fields})
