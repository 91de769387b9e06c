"""Closed-loop rollouts and Monte Carlo invariance checks."""
from __future__ import annotations

import concurrent.futures
import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import plan as planmod
from .fungen import Certificate, FunnelInstance, Reference, check_membership

GROSS = 1e-3
EVENT_TOL = 1e-6


class SimulationError(RuntimeError):
    pass


@dataclass
class Rollout:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    xr: np.ndarray | None = None
    V: np.ndarray | None = None


def _rk4(f, t, x, h):
    k1 = f(t, x)
    k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = f(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(model, feedback: Callable | None, x0, t_end: float, dt: float, t0: float = 0.0,
              disturbance: Callable | None = None, instance: FunnelInstance | None = None) -> Rollout:
    """Fixed-step RK4 of ``x' = f(x, clamp(feedback(t, x, ...)), d(t))``.

    Without an instance, ``feedback(t, x)`` gives the input (or None for an
    input-free model). With an instance, the reference is integrated
    alongside the plant under its held input, the instance's feedback is used
    (``feedback`` is ignored) and ``V`` is recorded at every step.
    """
    n_steps = int(round((t_end - t0) / dt))
    if n_steps < 1:
        raise ValueError("empty integration interval")
    h = (t_end - t0) / n_steps
    nd = len(model.disturbances)
    dist = disturbance or (lambda t: np.zeros(nd))
    x = np.asarray(x0, float).copy()
    ts = [t0]
    xs = [x.copy()]
    us = []
    if instance is None:
        nu = len(model.inputs)

        def u_of(t, xx):
            if feedback is None or nu == 0:
                return np.zeros(nu)
            return model.clamp(np.asarray(feedback(t, xx), float)) if nu else np.zeros(0)

        def rhs(t, xx):
            return model.f(xx, u_of(t, xx), dist(t))

        for i in range(n_steps):
            t = t0 + i * h
            us.append(u_of(t, x))
            x = _rk4(rhs, t, x, h)
            if not np.all(np.isfinite(x)):
                raise SimulationError(f"state blew up at t={t + h:.6g}")
            ts.append(t + h)
            xs.append(x.copy())
        us.append(u_of(ts[-1], x))
        return Rollout(np.array(ts), np.array(xs), np.array(us))

    ref = instance.ref
    em = instance.em
    n = len(x)
    xr = ref.state_at(t0, em.ref)
    z = np.concatenate([x, xr])

    def rhs(t, zz, ur, d):
        xx, rr = zz[:n], zz[n:]
        u = instance.control(t, xx, rr, ur)
        return np.concatenate([model.f(xx, u, d), em.ref.f(rr, ur)])

    Vs = [float(instance.V(t0, x, xr))]
    xrs = [xr.copy()]
    for i in range(n_steps):
        t = t0 + i * h
        ur = ref.input_at(t + 0.5 * h)
        d = dist(t)
        us.append(instance.control(t, z[:n], z[n:], ur))
        z = _rk4(lambda tt, zz: rhs(tt, zz, ur, d), t, z, h)
        if not np.all(np.isfinite(z)):
            raise SimulationError(f"state blew up at t={t + h:.6g}")
        ts.append(t + h)
        xs.append(z[:n].copy())
        xrs.append(z[n:].copy())
        Vs.append(float(instance.V(t + h, z[:n], z[n:])))
    us.append(instance.control(ts[-1], z[:n], z[n:], ref.input_at(ts[-1])))
    return Rollout(np.array(ts), np.array(xs), np.array(us), np.array(xrs), np.array(Vs))


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass
class TrialRecord:
    trial: int
    worst_margin: float      # max over time of V - beta
    t_worst: float
    target: str
    kind: str


@dataclass
class MCReport:
    trials: int
    violations: int
    gross: int
    worst_margin: float
    records: list = field(default_factory=list)
    rejected_references: int = 0

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "worst_margin", "t_worst", "reference_target", "disturbance"])
            for r in self.records:
                w.writerow([r.trial, f"{r.worst_margin:.9e}", f"{r.t_worst:.4f}", r.target, r.kind])


def sample_initial_errors(P: np.ndarray, beta: float, n: int, rng, boundary_frac: float = 0.5) -> np.ndarray:
    """Errors with ``e^T P e <= beta``; a fraction lies exactly on the boundary."""
    ne = P.shape[0]
    L = np.linalg.cholesky(P)
    dirs = rng.normal(size=(n, ne))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rad = np.where(rng.random(n) < boundary_frac, 1.0, rng.random(n) ** (1.0 / ne))
    z = dirs * rad[:, None] * math.sqrt(beta)
    return np.linalg.solve(L.T, z.T).T


def disturbance_schedules(box: Sequence[tuple[float, float]], n_trials: int, n_int: int, rng):
    """Per-trial held disturbances: all-max, all-min, then random 10 Hz draws."""
    nd = len(box)
    lo = np.array([b[0] for b in box]) if nd else np.zeros(0)
    hi = np.array([b[1] for b in box]) if nd else np.zeros(0)
    D = rng.uniform(lo, hi, size=(n_trials, n_int, nd)) if nd else np.zeros((n_trials, n_int, 0))
    kinds = []
    for i in range(n_trials):
        if i % 4 == 0:
            D[i] = hi
            kinds.append("vertex_max")
        elif i % 4 == 1:
            D[i] = lo
            kinds.append("vertex_min")
        else:
            kinds.append("random")
    return D, kinds


def mc_invariance(cert: Certificate, trials: int = 1000, seed: int = 0, T: float | None = None,
                  dt: float = 0.01, n_intervals: int | None = None, beta_override: float | None = None,
                  references: Sequence[Reference] | None = None, threads: int = 1) -> MCReport:
    """Monte Carlo check of finite-time invariance for a certificate.

    Each trial draws an admissible reference (random target, random input
    preference), an initial error in the funnel (half on its boundary) and a
    held disturbance schedule at 10 Hz (vertex runs included). Plants run on
    the exact dynamics. A trial violates when ``V > beta + 1e-6`` at any step.
    ``beta_override`` tests the conditions at a different level without
    re-synthesis (negative control). ``threads > 1`` draws references in
    worker processes; results do not depend on the worker count.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng([seed, 0])
    em = cert.error_model()
    beta = cert.beta if beta_override is None else beta_override
    if T is None:
        T = min(2.0, cert.horizon)
    if n_intervals is None:
        n_intervals = max(1, int(round(T / 0.2)))
    h_ref = T / n_intervals
    sub = max(1, int(math.ceil(h_ref / dt)))
    h = h_ref / sub
    refs: list[Reference] = []
    targets: list[str] = []
    rejected = 0
    if references is not None:
        refs = list(references)[:trials]
        targets = ["given"] * len(refs)
    todo = list(range(len(refs), trials))
    if todo:
        args = [(cert, seed, i, T, n_intervals) for i in todo]
        if threads > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as ex:
                drawn = list(ex.map(_draw_reference, args, chunksize=max(1, len(args) // (4 * threads))))
        else:
            drawn = [_draw_reference(a) for a in args]
        for r, tgt, rej in drawn:
            refs.append(r)
            targets.append(tgt)
            rejected += rej
    n = len(em.plant.state)
    P0 = cert.P_at(0.0)
    E0 = sample_initial_errors(P0, beta, trials, rng)
    Xr = np.array([r.x[0] for r in refs])
    X = em.from_error(E0, Xr)
    Ur = np.array([r.u for r in refs])  # (trials, n_int, m)
    box = [em.plant.disturbance_box[dn] for dn in em.plant.disturbances]
    D, kinds = disturbance_schedules(box, trials, n_intervals, rng)
    inst = FunnelInstance(cert, refs[0])
    worst = np.full(trials, -np.inf)
    t_worst = np.zeros(trials)

    def V_of(tl, X, Xr):
        e = em.to_error(X, Xr)
        P = cert.P_at(tl) if not cert.stationary else P0
        return np.einsum("ni,ij,nj->n", e, P, e)

    def track(tl, X, Xr):
        v = V_of(tl, X, Xr) - beta
        upd = v > worst
        worst[upd] = v[upd]
        t_worst[upd] = tl

    track(0.0, X, Xr)
    f_ref = em.ref.f
    for k in range(n_intervals):
        ur = Ur[:, k, :]
        d = D[:, k, :]
        for j in range(sub):
            t = k * h_ref + j * h

            def rhs(tt, z):
                x, xr = z[:, :n], z[:, n:]
                u = inst.control(tt, x, xr, ur) if cert.stationary else _control_tv(cert, tt, x, xr, ur, em)
                return np.concatenate([em.plant.f(x, u, d), f_ref(xr, ur)], axis=1)

            z = _rk4(rhs, t, np.concatenate([X, Xr], axis=1), h)
            if not np.all(np.isfinite(z)):
                raise SimulationError(f"state blew up near t={t + h:.4g}")
            X, Xr = z[:, :n], z[:, n:]
            track(t + h, X, Xr)
    records = [TrialRecord(i, float(worst[i]), float(t_worst[i]), targets[i], kinds[i]) for i in range(trials)]
    viol = int(np.sum(worst > EVENT_TOL))
    gross = int(np.sum(worst > GROSS))
    return MCReport(trials, viol, gross, float(worst.max()), records, rejected)


def _draw_reference(args):
    """Reference for one trial from its own seed stream (independent of worker count)."""
    cert, seed, i, T, n_intervals = args
    rng = np.random.default_rng([seed, i, 1])
    for attempt in range(50):
        r, tgt = planmod.random_reference(cert, rng, T, n_intervals)
        if r is not None:
            return r, tgt, attempt
    raise RuntimeError(f"could not draw an admissible reference for trial {i}")


def _control_tv(cert, t, x, xr, ur, em):
    e = em.to_error(x, xr)
    pts = np.concatenate([e, xr, ur], axis=1)
    U = cert.U_at(t)
    u = ur + np.stack([Ui.evaluate_many(pts) for Ui in U], axis=1)
    return em.plant.clamp(u)


def rollout_plan(plan, model, x0, dt: float = 0.01, disturbance: Callable | None = None) -> list[Rollout]:
    """Roll a plan out segment by segment; each segment starts where the last ended."""
    outs = []
    x = np.asarray(x0, float)
    for seg in plan.segments:
        inst = seg.instance
        r = integrate(model, None, x, inst.t_end, dt, t0=inst.t_start, disturbance=disturbance, instance=inst)
        outs.append(r)
        x = r.x[-1]
    return outs
