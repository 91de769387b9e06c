"""Funnel-aware planning: reference generation, padded collision checks,
funnel concatenation, waypoint back-chaining and an RRT over funnels."""
from __future__ import annotations

import configparser
import csv
import io
import itertools
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.optimize

from .fungen import (Certificate, FunnelInstance, Reference, RegionError, check_membership, instantiate,
                     levelset_box)

REF_SUBSTEPS = 4
DEFECT_TOL = 1e-6


class PlanningFailure(RuntimeError):
    def __init__(self, message: str, stats: dict | None = None):
        super().__init__(message)
        self.stats = stats or {}


# ---------------------------------------------------------------------------
# obstacles


@dataclass(frozen=True)
class Obstacle:
    """Axis-aligned box over named plant coordinates, or a disc in two of them.

    ``box`` maps a coordinate to ``(lo, hi)`` (infinite sides allowed);
    unnamed coordinates are unconstrained. A disc is given by ``disc_coords``,
    ``center`` and ``radius``. ``active`` is the time window.
    """
    name: str = "obstacle"
    box: Mapping[str, tuple[float, float]] | None = None
    disc_coords: tuple[str, str] | None = None
    center: tuple[float, float] | None = None
    radius: float = 0.0
    active: tuple[float, float] = (-math.inf, math.inf)

    def __post_init__(self):
        if (self.box is None) == (self.disc_coords is None):
            raise ValueError("an obstacle is either a box or a disc")
        if self.box is not None:
            for k, (lo, hi) in self.box.items():
                if not lo <= hi:
                    raise ValueError(f"obstacle {self.name}: empty interval for {k}")
        elif self.radius <= 0 or self.center is None:
            raise ValueError(f"obstacle {self.name}: disc needs a center and a positive radius")
        if not self.active[0] <= self.active[1]:
            raise ValueError(f"obstacle {self.name}: bad active interval")

    def active_during(self, t0: float, t1: float) -> bool:
        return t1 >= self.active[0] and t0 <= self.active[1]

    def hits_box(self, names: Sequence[str], lo: np.ndarray, hi: np.ndarray) -> bool:
        """Does the axis-aligned box ``[lo, hi]`` (over ``names``) touch the obstacle?"""
        idx = {n: i for i, n in enumerate(names)}
        if self.box is not None:
            for k, (olo, ohi) in self.box.items():
                i = idx[k]
                if hi[i] < olo or lo[i] > ohi:
                    return False
            return True
        a, b = (idx[c] for c in self.disc_coords)
        # distance from the disc center to the box
        dx = max(lo[a] - self.center[0], 0.0, self.center[0] - hi[a])
        dy = max(lo[b] - self.center[1], 0.0, self.center[1] - hi[b])
        return dx * dx + dy * dy <= self.radius ** 2

    def contains_point(self, names: Sequence[str], x: np.ndarray) -> bool:
        return self.hits_box(names, x, x)

    def enlarged(self, margin: float) -> "Obstacle":
        if self.box is not None:
            return Obstacle(self.name, {k: (lo - margin, hi + margin) for k, (lo, hi) in self.box.items()},
                            active=self.active)
        return Obstacle(self.name, disc_coords=self.disc_coords, center=self.center,
                        radius=self.radius + margin, active=self.active)

    def half_space(self):
        """``(coord, side, bound)`` when the obstacle is a one-sided slab, else None."""
        if self.box is None or len(self.box) != 1:
            return None
        (k, (lo, hi)), = self.box.items()
        if math.isinf(lo) and not math.isinf(hi):
            return k, "below", hi
        if math.isinf(hi) and not math.isinf(lo):
            return k, "above", lo
        return None


# ---------------------------------------------------------------------------
# reference generation by multiple shooting


@dataclass
class Infeasible:
    reason: str
    max_violation: float

    def __bool__(self):
        return False


def _shoot(f, X, U, h, sub):
    """End states and intermediate states of each interval (vectorized over intervals)."""
    hs = h / sub
    x = X
    mids = []
    for j in range(sub):
        k1 = f(x, U)
        k2 = f(x + 0.5 * hs * k1, U)
        k3 = f(x + 0.5 * hs * k2, U)
        k4 = f(x + hs * k3, U)
        x = x + (hs / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if j < sub - 1:
            mids.append(x)
    return x, mids


def gen_reference(ref_model, region, start, end, T: float, N: int, t0: float = 0.0, cert_t0: float = 0.0,
                  u_pref: np.ndarray | None = None, soft_end: np.ndarray | None = None, end_weight: float = 0.0,
                  extra_bounds=None, margin: float = 1e-6, maxiter: int = 200,
                  end_free: Sequence[bool] | None = None):
    """Reference from ``start`` to ``end`` over ``N`` held-input intervals of ``T/N``.

    ``end`` entries that are NaN are free. States (at knots and inside each
    interval) and held inputs stay in the region box; ``extra_bounds(t)`` may
    add per-time state bounds ``(lo, hi)``. The objective prefers inputs close
    to ``u_pref`` and, with ``end_weight > 0``, terminal states close to
    ``soft_end`` (NaN entries ignored). Returns a :class:`Reference` or an
    :class:`Infeasible` verdict.
    """
    n, m = len(ref_model.state), len(ref_model.inputs)
    start = np.asarray(start, float)
    end = np.full(n, np.nan) if end is None else np.asarray(end, float)
    h = T / N
    times = t0 + h * np.arange(N + 1)
    sub = REF_SUBSTEPS
    # bounds per knot (state) and per interval (input)
    xlo = np.zeros((N + 1, n))
    xhi = np.zeros((N + 1, n))
    for k, t in enumerate(times):
        lo, hi = region.box_at(cert_t0 + (t - t0))
        xlo[k], xhi[k] = lo[:n], hi[:n]
        if extra_bounds is not None:
            elo, ehi = extra_bounds(t)
            xlo[k] = np.maximum(xlo[k], elo)
            xhi[k] = np.minimum(xhi[k], ehi)
    ulo = np.zeros((N, m))
    uhi = np.zeros((N, m))
    for k in range(N):
        a = region.box_at(cert_t0 + (times[k] - t0))
        b = region.box_at(cert_t0 + (times[k + 1] - t0))
        ulo[k] = np.maximum(a[0][n:], b[0][n:])
        uhi[k] = np.minimum(a[1][n:], b[1][n:])
    if np.any(start < xlo[0] - 1e-9) or np.any(start > xhi[0] + 1e-9):
        return Infeasible("start state outside the region", float(np.max(np.maximum(xlo[0] - start, start - xhi[0]))))
    if np.any(xlo > xhi) or np.any(ulo > uhi):
        return Infeasible("empty bounds (region and obstacle padding conflict)", math.inf)

    def shrink(lo, hi):
        pad = np.where(np.isfinite(lo) & np.isfinite(hi), np.minimum(margin * (1 + np.abs(lo)), 0.25 * (hi - lo)), 0)
        return lo + pad, hi - pad

    sxlo, sxhi = shrink(xlo, xhi)
    sulo, suhi = shrink(ulo, uhi)
    sxlo[0] = sxhi[0] = start
    fixed_end = np.isfinite(end)
    sxlo[N, fixed_end] = end[fixed_end]
    sxhi[N, fixed_end] = end[fixed_end]
    if np.any(sxlo[N] > sxhi[N] + 1e-12):
        return Infeasible("end state outside the region", math.inf)
    nx = (N + 1) * n
    u_pref = np.zeros((N, m)) if u_pref is None else np.asarray(u_pref, float).reshape(N, m)
    soft = None
    if end_weight > 0 and soft_end is not None:
        soft = np.asarray(soft_end, float)
    f = ref_model.f
    u_scale = np.maximum(np.where(np.isfinite(uhi - ulo), uhi - ulo, 1.0), 1e-3)

    def unpack(z):
        return z[:nx].reshape(N + 1, n), z[nx:].reshape(N, m)

    def obj(z):
        X, U = unpack(z)
        du = (U - u_pref) / u_scale
        val = h * np.sum(du * du)
        g = np.zeros_like(z)
        g[nx:] = (2 * h * du / u_scale).ravel()
        if soft is not None:
            msk = np.isfinite(soft)
            r = np.where(msk, X[N] - np.nan_to_num(soft), 0.0)
            val += end_weight * np.sum(r * r)
            gX = np.zeros((N + 1, n))
            gX[N] = 2 * end_weight * r
            g[:nx] += gX.ravel()
        return val, g

    # Jacobians by batched forward differences over the (x_k, u_k) inputs of each interval
    def cons_and_jac(z):
        X, U = unpack(z)
        eps = 1e-7
        # one batched rollout: base, then each state and input perturbation
        Xs = np.tile(X[:-1], (n + m + 1, 1, 1))
        Us = np.tile(U, (n + m + 1, 1, 1))
        for i in range(n):
            Xs[1 + i, :, i] += eps
        for i in range(m):
            Us[1 + n + i, :, i] += eps
        pe, pm = _shoot(f, Xs.reshape(-1, n), Us.reshape(-1, m), h, sub)
        outs = [a.reshape(n + m + 1, N, n) for a in [pe] + pm]
        base = [o[0] for o in outs]
        dX = [[(o[1 + i] - o[0]) / eps for o in outs] for i in range(n)]
        dU = [[(o[1 + n + i] - o[0]) / eps for o in outs] for i in range(m)]
        return X, U, base, dX, dU

    cache = {}

    def evaluate(z):
        key = z.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = cons_and_jac(z)
        return cache[key]

    def eq_fun(z):
        X, U, base, _, _ = evaluate(z)
        return (X[1:] - base[0]).ravel()

    def eq_jac(z):
        X, U, base, dX, dU = evaluate(z)
        J = np.zeros((N * n, nx + N * m))
        for k in range(N):
            rows = slice(k * n, (k + 1) * n)
            J[rows, (k + 1) * n:(k + 2) * n] = np.eye(n)
            for i in range(n):
                J[rows, k * n + i] = -dX[i][0][k]
            for i in range(m):
                J[rows, nx + k * m + i] = -dU[i][0][k]
        return J

    # path constraints on intermediate states (bounded coordinates only)
    bounded = [i for i in range(n) if np.all(np.isfinite(xlo[:, i])) or np.all(np.isfinite(xhi[:, i]))]
    path_lo = np.minimum(sxlo[:-1], sxlo[1:])
    path_hi = np.maximum(sxhi[:-1], sxhi[1:])
    # interval bounds: the looser of the two ends, but never looser than the region
    path_lo = np.maximum(np.minimum(xlo[:-1], xlo[1:]), np.where(np.isfinite(path_lo), path_lo, -np.inf))
    path_hi = np.minimum(np.maximum(xhi[:-1], xhi[1:]), np.where(np.isfinite(path_hi), path_hi, np.inf))

    def in_fun(z):
        X, U, base, _, _ = evaluate(z)
        out = []
        for mid in base[1:]:
            for i in bounded:
                if np.all(np.isfinite(path_lo[:, i])):
                    out.append(mid[:, i] - path_lo[:, i])
                if np.all(np.isfinite(path_hi[:, i])):
                    out.append(path_hi[:, i] - mid[:, i])
        return np.concatenate(out) if out else np.zeros(0)

    def in_jac(z):
        X, U, base, dX, dU = evaluate(z)
        rows = []
        for j in range(1, len(base)):
            for i in bounded:
                for sign, ok in ((1.0, np.all(np.isfinite(path_lo[:, i]))), (-1.0, np.all(np.isfinite(path_hi[:, i])))):
                    if not ok:
                        continue
                    J = np.zeros((N, nx + N * m))
                    for k in range(N):
                        for a in range(n):
                            J[k, k * n + a] = sign * dX[a][j][k][i]
                        for a in range(m):
                            J[k, nx + k * m + a] = sign * dU[a][j][k][i]
                    rows.append(J)
        return np.vstack(rows) if rows else np.zeros((0, nx + N * m))

    # initial guess: straight line in bounded coordinates, forward rollout otherwise
    X0 = np.zeros((N + 1, n))
    U0 = np.clip(u_pref, sulo, suhi)
    x = start.copy()
    X0[0] = x
    for k in range(N):
        x, _ = _shoot(f, x[None, :], U0[k][None, :], h, sub)
        x = x[0]
        X0[k + 1] = x
    tgt = np.where(np.isfinite(end), end, X0[N])
    for k in range(N + 1):
        a = k / N
        X0[k] = np.where(np.isfinite(end), (1 - a) * start + a * tgt, X0[k])
    X0 = np.clip(X0, np.where(np.isfinite(sxlo), sxlo, -1e9), np.where(np.isfinite(sxhi), sxhi, 1e9))
    z0 = np.concatenate([X0.ravel(), U0.ravel()])
    lb = np.concatenate([sxlo.ravel(), sulo.ravel()])
    ub = np.concatenate([sxhi.ravel(), suhi.ravel()])
    bounds = list(zip(np.where(np.isfinite(lb), lb, None), np.where(np.isfinite(ub), ub, None)))
    constraints = [{"type": "eq", "fun": eq_fun, "jac": eq_jac}]
    if bounded and sub > 1:
        constraints.append({"type": "ineq", "fun": in_fun, "jac": in_jac})
    with warnings.catch_warnings():
        # SLSQP clips trial points to the bounds and says so; harmless here
        warnings.filterwarnings("ignore", message="Values in x were outside bounds", category=RuntimeWarning)
        res = scipy.optimize.minimize(obj, z0, jac=True, method="SLSQP", bounds=bounds, constraints=constraints,
                                      options={"maxiter": maxiter, "ftol": 1e-12})
    X, U = unpack(res.x)
    U = np.clip(U, ulo, uhi)
    # re-integrate so the stored states are an exact rollout of the held inputs
    Xr = np.zeros_like(X)
    Xr[0] = start
    for k in range(N):
        xe, _ = _shoot(f, Xr[k][None, :], U[k][None, :], h, sub)
        Xr[k + 1] = xe[0]
    defect = float(np.max(np.abs(Xr - X)))
    viol = 0.0
    viol = max(viol, float(np.max(np.maximum(xlo - Xr, 0.0), initial=0.0)))
    viol = max(viol, float(np.max(np.maximum(Xr - xhi, 0.0), initial=0.0)))
    if np.any(fixed_end):
        viol = max(viol, float(np.max(np.abs(Xr[N, fixed_end] - end[fixed_end]))))
    if defect > DEFECT_TOL or viol > DEFECT_TOL:
        return Infeasible(f"transcription failed ({res.message}); defect {defect:.2e}", max(defect, viol))
    ref = Reference(times, Xr, U)
    return ref


def straight_reference(ref_model, x0, u, T: float, N: int, t0: float = 0.0) -> Reference:
    """Open-loop rollout of constant input ``u``."""
    h = T / N
    X = [np.asarray(x0, float)]
    U = np.tile(np.asarray(u, float), (N, 1))
    for k in range(N):
        xe, _ = _shoot(ref_model.f, X[-1][None, :], U[k][None, :], h, REF_SUBSTEPS)
        X.append(xe[0])
    return Reference(t0 + h * np.arange(N + 1), np.array(X), U)


def random_reference(cert: Certificate, rng, T: float, N: int, tries: int = 3, start_inner: float = 0.5):
    """A random admissible reference steered toward a random target in the region.

    The start is drawn from the inner ``start_inner`` fraction of the bounded
    state box (states near a face may admit no admissible continuation), the
    target from the inner 80%, and the preferred inputs uniformly from the
    input box. Returns ``(Reference | None, target)``.
    """
    em = cert.error_model()
    ref = em.ref
    n = len(ref.state)
    region = cert.region
    lo0, hi0 = region.box_at(0.0)
    loT, hiT = region.box_at(min(T, cert.horizon))

    def draw(lo, hi, inner):
        out = np.full(n, np.nan)
        for i in range(n):
            a, b = lo[i], hi[i]
            if np.isfinite(a) and np.isfinite(b):
                c, w = 0.5 * (a + b), 0.5 * (b - a) * inner
                out[i] = rng.uniform(c - w, c + w)
        return out

    ulo, uhi = lo0[n:], hi0[n:]
    for _ in range(tries):
        start = draw(lo0, hi0, start_inner)
        for i in range(n):
            if np.isnan(start[i]):
                start[i] = rng.uniform(-math.pi, math.pi) if ref.state[i].startswith("th") else 0.0
        target = draw(loT, hiT, 0.8)
        u_pref = rng.uniform(ulo, uhi, size=(N, len(ulo)))
        r = gen_reference(ref, region, start, None, T, N, u_pref=u_pref, soft_end=target, end_weight=5.0,
                          maxiter=100)
        if isinstance(r, Reference) and check_membership(cert, r) is None:
            return r, " ".join(f"{v:.4g}" for v in target)
    return None, ""


# ---------------------------------------------------------------------------
# padded collision checks


def funnel_state_box(inst: FunnelInstance, t: float, xr=None):
    """Axis-aligned bounds on plant states covered by the funnel at time ``t``."""
    w = levelset_box(inst, t)
    if xr is None:
        xr, _ = inst.reference_at(t)
    corners = np.array(list(itertools.product(*[(-a, a) for a in w])))
    X = inst.em.from_error(corners, np.broadcast_to(xr, (len(corners), len(xr))))
    return X.min(axis=0), X.max(axis=0)


@dataclass
class Clearance:
    clear: bool
    time: float | None = None
    obstacle: str | None = None

    def __bool__(self):
        return self.clear


def clearance(inst: FunnelInstance, obstacles: Sequence[Obstacle], substeps: int = 4) -> Clearance:
    """Conservative: the funnel box around the reference, inflated by the
    reference's motion bound between samples, misses every active obstacle."""
    if not obstacles:
        return Clearance(True)
    names = inst.em.plant.state
    ts, xs, us = inst.ref.dense(inst.em.ref, substeps)
    for j in range(len(ts)):
        t = ts[j]
        hstep = (ts[j + 1] - ts[j]) if j + 1 < len(ts) else (ts[j] - ts[j - 1])
        lo, hi = funnel_state_box(inst, t, xs[j])
        rate = np.abs(inst.em.ref.f(xs[j], us[j]))
        pad = 0.5 * hstep * rate * 1.5
        # the funnel box may also change between samples
        t2 = min(t + hstep, inst.t_end)
        lo2, hi2 = funnel_state_box(inst, t2, xs[min(j + 1, len(xs) - 1)])
        blo = np.minimum(lo, lo2) - pad
        bhi = np.maximum(hi, hi2) + pad
        for ob in obstacles:
            if not ob.active_during(t - 0.5 * hstep, t + 0.5 * hstep + hstep):
                continue
            if ob.hits_box(names, blo, bhi):
                return Clearance(False, float(t), ob.name)
    return Clearance(True)


# ---------------------------------------------------------------------------
# concatenation


def _affine_error_map(inst: FunnelInstance, t: float):
    """``e = J (x - c)`` at time ``t`` when the error map is affine in x; else None."""
    xr, _ = inst.reference_at(t)
    em = inst.em
    n = len(xr)
    c = em.from_error(np.zeros(n), xr)
    J = np.zeros((n, n))
    for i in range(n):
        x = c.copy()
        x[i] += 1.0
        J[:, i] = em.to_error(x, xr)
    rng = np.random.default_rng(1)
    for _ in range(3):
        x = c + rng.normal(size=n)
        if not np.allclose(em.to_error(x, xr), J @ (x - c), atol=1e-9):
            return None
    return J, c


def _ellipsoid_matrix(Q, c, beta):
    n = len(c)
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = Q
    M[:n, n] = M[n, :n] = -Q @ c
    M[n, n] = c @ Q @ c - beta
    return M


def ellipsoid_contained(Qa, ca, Qb, cb, beta_a=1.0, beta_b=1.0, tol=1e-9) -> bool:
    """Exact test ``{(x-ca)'Qa(x-ca) <= beta_a} subset {(x-cb)'Qb(x-cb) <= beta_b}``.

    S-lemma: containment iff ``tau*Ma - Mb`` is PSD for some ``tau >= 0``;
    the minimum eigenvalue is concave in tau and maximized numerically.
    """
    Ma = _ellipsoid_matrix(Qa, np.asarray(ca, float), beta_a)
    Mb = _ellipsoid_matrix(Qb, np.asarray(cb, float), beta_b)
    scale = max(np.abs(Mb).max(), 1.0)
    g = lambda tau: -np.linalg.eigvalsh(tau * Ma - Mb)[0]
    hi = 10.0 * np.linalg.eigvalsh(Qb)[-1] / max(np.linalg.eigvalsh(Qa)[0], 1e-300) + 10.0
    r = scipy.optimize.minimize_scalar(g, bounds=(0.0, hi), method="bounded", options={"xatol": 1e-12 * hi})
    best = -r.fun
    # also evaluate the same-shape point tau = beta_b/beta_a-free candidate
    for tau in (1.0, beta_b / beta_a):
        best = max(best, -g(tau))
    return best >= -tol * scale


def concat_check(a: FunnelInstance, ta: float, b: FunnelInstance, tb: float, n_samples: int = 10_000,
                 seed: int = 0) -> bool:
    """Does a's level set at time ``ta`` lie inside b's level set at ``tb``?"""
    A = _affine_error_map(a, ta)
    B = _affine_error_map(b, tb)
    if A is not None and B is not None:
        Ja, ca = A
        Jb, cb = B
        Qa = Ja.T @ a.P(ta) @ Ja
        Qb = Jb.T @ b.P(tb) @ Jb
        return ellipsoid_contained(Qa, ca, Qb, cb, a.cert.beta, b.cert.beta)
    # sampling fallback: boundary points of a must be inside b
    rng = np.random.default_rng(seed)
    Pa = a.P(ta)
    L = np.linalg.cholesky(Pa)
    dirs = rng.normal(size=(n_samples, Pa.shape[0]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    E = np.linalg.solve(L.T, dirs.T).T * math.sqrt(a.cert.beta)
    xr_a, _ = a.reference_at(ta)
    X = a.em.from_error(E, np.broadcast_to(xr_a, E.shape))
    xr_b, _ = b.reference_at(tb)
    return bool(np.all(b.V(tb, X, xr_b) <= b.cert.beta))


# ---------------------------------------------------------------------------
# plans


@dataclass
class Segment:
    cert_id: str
    instance: FunnelInstance

    @property
    def t_start(self) -> float:
        return self.instance.t_start

    @property
    def t_end(self) -> float:
        return self.instance.t_end


@dataclass
class Plan:
    segments: list
    stats: dict = field(default_factory=dict)

    @property
    def switch_times(self) -> list[float]:
        return [s.t_start for s in self.segments[1:]]

    @property
    def cert_sequence(self) -> list[str]:
        return [s.cert_id for s in self.segments]

    def verify(self, obstacles: Sequence[Obstacle], start=None) -> list[str]:
        """Re-check every plan invariant; returns a list of problems (empty if sound)."""
        problems = []
        if start is not None and self.segments:
            inst = self.segments[0].instance
            if not inst.inside(inst.t_start, np.asarray(start, float), 1e-9):
                problems.append("start state outside the first funnel")
        for i, s in enumerate(self.segments):
            bad = check_membership(s.instance.cert, s.instance.ref, s.instance.t0)
            if bad is not None:
                problems.append(f"segment {i} reference leaves its region: {bad}")
            c = clearance(s.instance, obstacles)
            if not c:
                problems.append(f"segment {i} funnel hits {c.obstacle} at t={c.time:.3f}")
        for i in range(len(self.segments) - 1):
            a, b = self.segments[i].instance, self.segments[i + 1].instance
            if not concat_check(a, a.t_end, b, b.t_start):
                problems.append(f"funnels {i} and {i + 1} do not concatenate")
        return problems

    def dumps(self, cert_paths: Mapping[str, str] | None = None, obstacles: Sequence[Obstacle] = ()) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["plan"] = {"segments": str(len(self.segments)),
                      "switch_times": " ".join(f"{t!r}" for t in self.switch_times),
                      "certificates": " ".join(self.cert_sequence)}
        for k, v in self.stats.items():
            cp["plan"][f"stat_{k}"] = str(v)
        if cert_paths:
            cp["certificates"] = dict(cert_paths)
        for ob in obstacles:
            cp[f"obstacle {ob.name}"] = obstacle_fields(ob)
        for i, s in enumerate(self.segments):
            r = s.instance.ref
            cp[f"segment {i}"] = {
                "certificate": s.cert_id, "t0_local": repr(s.instance.t0),
                "times": " ".join(repr(float(t)) for t in r.t),
                "states": "\n" + "\n".join(" ".join(repr(float(v)) for v in row) for row in r.x),
                "inputs": "\n" + "\n".join(" ".join(repr(float(v)) for v in row) for row in r.u),
            }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str, certificates: Mapping[str, Certificate] | None = None) -> "Plan":
        """Parse a plan; certificates default to the paths recorded in the file."""
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp.read_string(text)
        if certificates is None:
            certificates = {k: Certificate.load(v) for k, v in cp["certificates"].items()}
        segs = []
        for i in range(int(cp["plan"]["segments"])):
            sec = cp[f"segment {i}"]
            t = np.array([float(v) for v in sec["times"].split()])
            X = np.array([[float(v) for v in ln.split()] for ln in sec["states"].strip().splitlines()])
            U = np.array([[float(v) for v in ln.split()] for ln in sec["inputs"].strip().splitlines()])
            cert = certificates[sec["certificate"]]
            segs.append(Segment(sec["certificate"], FunnelInstance(cert, Reference(t, X, U), float(sec["t0_local"]))))
        stats = {k[5:]: v for k, v in cp["plan"].items() if k.startswith("stat_")}
        return cls(segs, stats)

    def write_csv(self, path, substeps: int = 4) -> None:
        """Reference samples and funnel state boxes for plotting."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            if not self.segments:
                w.writerow(["segment"])
                return
            em = self.segments[0].instance.em
            names = em.plant.state
            hdr = (["segment", "certificate", "t"] + [f"ref_{n}" for n in em.ref.state + em.ref.inputs]
                   + [f"lo_{n}" for n in names] + [f"hi_{n}" for n in names])
            w.writerow(hdr)
            for i, s in enumerate(self.segments):
                ts, xs, us = s.instance.ref.dense(em.ref, substeps)
                for t, x, u in zip(ts, xs, us):
                    lo, hi = funnel_state_box(s.instance, t, x)
                    w.writerow([i, s.cert_id, f"{t:.6f}"] + [f"{v:.9g}" for v in np.concatenate([x, u, lo, hi])])


def obstacle_fields(ob: Obstacle) -> dict:
    d = {"active": f"{ob.active[0]!r} {ob.active[1]!r}"}
    if ob.box is not None:
        d.update({k: f"{lo!r} {hi!r}" for k, (lo, hi) in ob.box.items()})
    else:
        d.update({"disc": " ".join(ob.disc_coords), "center": f"{ob.center[0]!r} {ob.center[1]!r}",
                  "radius": repr(ob.radius)})
    return d


def _parse_obstacles(cp) -> list:
    obstacles = []
    for sec in cp.sections():
        if not sec.startswith("obstacle"):
            continue
        o = cp[sec]
        name = sec.split(None, 1)[1] if " " in sec else sec
        active = tuple(float(v) for v in o.get("active", "-inf inf").split())
        if "disc" in o:
            c1, c2 = o["disc"].split()
            cx, cy = (float(v) for v in o["center"].split())
            obstacles.append(Obstacle(name, disc_coords=(c1, c2), center=(cx, cy), radius=float(o["radius"]),
                                      active=active))
        else:
            box = {}
            for k, v in o.items():
                if k == "active":
                    continue
                a, b = v.split()
                box[k] = (float(a), float(b))
            obstacles.append(Obstacle(name, box, active=active))
    return obstacles


def load_plan_file(path):
    """``(Plan, obstacles)`` from a plan file written by :meth:`Plan.dumps`."""
    with open(path) as fh:
        text = fh.read()
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    return Plan.loads(text), _parse_obstacles(cp)


def _box_volume(cert: Certificate) -> float:
    return float(np.prod(levelset_box(cert, 0.0)))


def padded_bounds(obstacles: Sequence[Obstacle], cert: Certificate, names: Sequence[str], h: float,
                  rate_bound: np.ndarray | None = None, margin: float = 2e-3):
    """Per-time state bounds that keep a funnel off one-sided slab obstacles.

    Only slab obstacles (one coordinate, one finite side) become bounds; the
    funnel half-width along that coordinate is taken from the certificate's
    level-set box (identity error coordinates along it). Intermediate states
    are bounded too (path constraints), so only the motion between the dense
    clearance samples remains, covered by ``margin``; ``rate_bound`` adds a
    global motion pad over one interval when given.
    """
    w = levelset_box(cert, 0.0)
    em = cert.error_model()
    n = len(names)
    slabs = []
    for ob in obstacles:
        hs = ob.half_space()
        if hs is None:
            continue
        k, side, bound = hs
        # obstacle coordinates are plant states; reference states share their order
        i = list(em.plant.state).index(k)
        width = w[i] if i < len(w) else 0.0
        motion = 0.0 if rate_bound is None else 0.75 * h * rate_bound[i]
        slabs.append((i, side, bound, width + motion + margin, ob.active))

    def bounds(t):
        lo = np.full(n, -np.inf)
        hi = np.full(n, np.inf)
        for i, side, bound, pad, (a, b) in slabs:
            if t < a - 1.5 * h or t > b + 1.5 * h:
                continue
            if side == "below":
                lo[i] = max(lo[i], bound + pad)
            else:
                hi[i] = min(hi[i], bound - pad)
        return lo, hi
    return bounds if slabs else None


def plan_waypoints(start, goal, waypoints: Sequence[tuple[float, np.ndarray]], certificates: Mapping[str, Certificate],
                   obstacles: Sequence[Obstacle] = (), t_goal: float | None = None, intervals_per_sec: int = 10,
                   order: Sequence[str] | None = None) -> Plan:
    """Back-chain funnels from the goal through timed waypoints to the start.

    ``waypoints`` are ``(time, reference state)`` pairs strictly between start
    (time 0) and the goal (time ``t_goal``); NaN entries are free. For each
    segment, from the last backwards, certificates are tried by increasing
    level-set box volume (``order`` overrides); a segment is accepted when its
    reference exists in the certificate's region, its funnel clears the
    obstacles, and it concatenates into the already chosen successor.
    """
    start = np.asarray(start, float)
    pts = [(0.0, start)] + [(float(t), np.asarray(x, float)) for t, x in waypoints]
    if t_goal is None:
        raise ValueError("t_goal is required")
    pts.append((float(t_goal), np.asarray(goal, float)))
    names = order or sorted(certificates, key=lambda k: _box_volume(certificates[k]))
    chosen: list[Segment] = []
    next_start = None
    attempts = []
    for i in range(len(pts) - 2, -1, -1):
        t0, x0 = pts[i]
        t1, x1 = pts[i + 1]
        end = x1 if next_start is None else next_start
        N = max(1, int(round((t1 - t0) * intervals_per_sec)))
        ok = None
        for cid in names:
            cert = certificates[cid]
            em = cert.error_model()
            eb = padded_bounds(obstacles, cert, em.ref.state, (t1 - t0) / N)
            if i == 0:
                x_start = x0
                r = gen_reference(em.ref, cert.region, x_start, end, t1 - t0, N, t0=t0, extra_bounds=eb)
            else:
                r = _gen_free_start(em.ref, cert.region, x0, end, t1 - t0, N, t0, eb)
            if not isinstance(r, Reference):
                attempts.append((i, cid, r.reason))
                continue
            try:
                inst = instantiate(cert, r)
            except RegionError as exc:
                attempts.append((i, cid, str(exc)))
                continue
            c = clearance(inst, obstacles)
            if not c:
                attempts.append((i, cid, f"hits {c.obstacle} at t={c.time:.3f}"))
                continue
            if chosen and not concat_check(inst, inst.t_end, chosen[0].instance, chosen[0].t_start):
                attempts.append((i, cid, "does not concatenate"))
                continue
            ok = Segment(cid, inst)
            break
        if ok is None:
            raise PlanningFailure(f"cannot chain waypoint {i} (t={t0:g}) to waypoint {i + 1} (t={t1:g})",
                                  {"attempts": attempts})
        chosen.insert(0, ok)
        next_start = ok.instance.ref.x[0]
    plan = Plan(chosen, {"attempts": len(attempts)})
    if not plan.segments[0].instance.inside(0.0, start, 1e-9):
        raise PlanningFailure("start state outside the first funnel")
    return plan


def _gen_free_start(ref_model, region, x0, end, T, N, t0, eb):
    """Reference with a partially free start: fixed entries of ``x0`` pinned, NaN free.

    Solved by reversing time is not possible in general, so the free start
    entries are searched by a small outer optimization on a shooting problem
    with the start included in the decision vector.
    """
    x0 = np.asarray(x0, float)
    if np.all(np.isfinite(x0)):
        return gen_reference(ref_model, region, x0, end, T, N, t0=t0, extra_bounds=eb)
    lo, hi = region.box_at(0.0)
    n = len(x0)
    best = None
    # candidates for the free entries: grid over their box
    free = [i for i in range(n) if not np.isfinite(x0[i])]
    grids = []
    for i in free:
        a, b = lo[i], hi[i]
        if not (np.isfinite(a) and np.isfinite(b)):
            a, b = -1.0, 1.0
        grids.append(np.linspace(a + 0.1 * (b - a), b - 0.1 * (b - a), 7))
    for vals in itertools.product(*grids):
        xs = x0.copy()
        xs[free] = vals
        r = gen_reference(ref_model, region, xs, end, T, N, t0=t0, extra_bounds=eb)
        if isinstance(r, Reference):
            cost = float(np.sum(r.u ** 2))
            if best is None or cost < best[0]:
                best = (cost, r)
    if best is None:
        return Infeasible("no start in the free coordinates admits a reference", math.inf)
    return best[1]


def _rate_bound(cert: Certificate, n_samples: int = 2000) -> np.ndarray:
    """Sample bound on |f_r| over the region (for inter-sample padding)."""
    em = cert.error_model()
    lo, hi = cert.region.box_at(0.0)
    lo = np.where(np.isfinite(lo), lo, -math.pi)
    hi = np.where(np.isfinite(hi), hi, math.pi)
    rng = np.random.default_rng(0)
    R = rng.uniform(lo, hi, size=(n_samples, len(lo)))
    corners = np.array(list(itertools.product(*zip(lo, hi))))
    R = np.vstack([R, corners])
    n = len(em.ref.state)
    F = em.ref.f(R[:, :n], R[:, n:])
    return np.max(np.abs(F), axis=0)


# ---------------------------------------------------------------------------
# RRT over funnels


@dataclass
class GoalRegion:
    box: Mapping[str, tuple[float, float]]

    def contains(self, names: Sequence[str], x) -> bool:
        idx = {n: i for i, n in enumerate(names)}
        return all(lo <= x[idx[k]] <= hi for k, (lo, hi) in self.box.items())

    def center(self, names: Sequence[str], default) -> np.ndarray:
        out = np.array(default, float)
        for k, (lo, hi) in self.box.items():
            out[list(names).index(k)] = 0.5 * (lo + hi)
        return out


@dataclass
class _Node:
    x: np.ndarray
    t: float
    parent: int
    segment: Segment | None


def plan_rrt(start, goal: GoalRegion, certificate: Certificate, obstacles: Sequence[Obstacle] = (),
             workspace: Mapping[str, tuple[float, float]] | None = None, max_iter: int = 2000,
             wall_time: float = 60.0, seed: int = 0, horizon: float = 1.0, intervals: int = 5,
             goal_bias: float = 0.2, cert_id: str = "cert") -> Plan:
    """RRT whose edges are funnel segments from a single stationary certificate.

    Each extension steers the reference from the nearest tree node toward a
    sample over a fixed horizon (soft terminal target, region-constrained),
    and is kept only if its funnel clears the obstacles and concatenates
    into the parent's funnel.
    """
    rng = np.random.default_rng(seed)
    em = certificate.error_model()
    # goal and workspace use plant state names; reference states share their order
    names = em.plant.state
    n = len(names)
    start = np.asarray(start, float)
    t_start = time.perf_counter()
    if goal.contains(names, start):
        return Plan([], {"iterations": 0, "nodes": 1})
    workspace = dict(workspace or {})
    region = certificate.region
    lo, hi = region.box_at(0.0)
    nodes = [_Node(start, 0.0, -1, None)]
    extra_goal = goal.center(names, start)
    scale = np.ones(n)
    for i, nm in enumerate(names):
        if nm in workspace:
            a, b = workspace[nm]
            scale[i] = 1.0 / max(b - a, 1e-9)
    it = 0
    for it in range(1, max_iter + 1):
        if time.perf_counter() - t_start > wall_time:
            break
        if rng.random() < goal_bias:
            target = extra_goal.copy()
            for k, (a, b) in goal.box.items():
                target[names.index(k)] = rng.uniform(a, b)
        else:
            target = np.full(n, np.nan)
            for i, nm in enumerate(names):
                if nm in workspace:
                    target[i] = rng.uniform(*workspace[nm])
        msk = np.isfinite(target)
        d = [np.sum(((nd.x - target) * scale)[msk] ** 2) for nd in nodes]
        j = int(np.argmin(d))
        parent = nodes[j]
        ulo = lo[n:]
        uhi = hi[n:]
        u_pref = rng.uniform(ulo, uhi, size=(intervals, len(ulo))) * 0.3
        soft = np.where(msk, target, np.nan)
        r = gen_reference(em.ref, region, parent.x, None, horizon, intervals, t0=parent.t, u_pref=u_pref,
                          soft_end=soft, end_weight=5.0, maxiter=60)
        if not isinstance(r, Reference):
            continue
        try:
            inst = instantiate(certificate, r)
        except RegionError:
            continue
        if not clearance(inst, obstacles):
            continue
        if parent.segment is not None:
            pi = parent.segment.instance
            if not concat_check(pi, pi.t_end, inst, inst.t_start):
                continue
        seg = Segment(cert_id, inst)
        nodes.append(_Node(r.x[-1], float(r.t[-1]), j, seg))
        # goal reached anywhere along the new segment's knots?
        hit = None
        for k in range(len(r.t)):
            if goal.contains(names, r.x[k]):
                hit = k
                break
        if hit is not None:
            if hit == 0:
                hit = 1
            segs = []
            cut = Segment(cert_id, FunnelInstance(certificate, r.slice(r.t[0], r.t[hit]), inst.t0))
            segs.append(cut)
            k = j
            while k > 0:
                segs.append(nodes[k].segment)
                k = nodes[k].parent
            segs.reverse()
            stats = {"iterations": it, "nodes": len(nodes), "time": round(time.perf_counter() - t_start, 3)}
            return Plan(segs, stats)
    raise PlanningFailure("RRT budget exhausted",
                          {"iterations": it, "nodes": len(nodes), "time": round(time.perf_counter() - t_start, 3)})


# ---------------------------------------------------------------------------
# scenario files


@dataclass
class Scenario:
    kind: str                      # "waypoints" or "rrt"
    start: np.ndarray
    goal: np.ndarray | None
    goal_region: GoalRegion | None
    obstacles: list
    certificates: dict             # id -> path
    waypoints: list
    t_goal: float | None
    budget: dict
    workspace: dict
    order: list | None = None
    options: dict = field(default_factory=dict)


def _floats(s: str) -> np.ndarray:
    return np.array([float(v) for v in s.split()])


def load_scenario(text: str) -> Scenario:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    sc = cp["scenario"]
    certs = {k: v for k, v in cp["certificates"].items()}
    obstacles = _parse_obstacles(cp)
    waypoints = []
    if "waypoints" in cp:
        for k, v in cp["waypoints"].items():
            vals = _floats(v)
            waypoints.append((vals[0], vals[1:]))
        waypoints.sort(key=lambda p: p[0])
    goal_region = None
    if "goal_region" in cp:
        goal_region = GoalRegion({k: tuple(float(x) for x in v.split()) for k, v in cp["goal_region"].items()})
    workspace = {}
    if "workspace" in cp:
        workspace = {k: tuple(float(x) for x in v.split()) for k, v in cp["workspace"].items()}
    budget = dict(cp["budget"]) if "budget" in cp else {}
    order = sc.get("order")
    return Scenario(sc.get("kind", "waypoints"), _floats(sc["start"]),
                    _floats(sc["goal"]) if "goal" in sc else None, goal_region, obstacles, certs, waypoints,
                    float(sc["t_goal"]) if "t_goal" in sc else None, budget, workspace,
                    order.split() if order else None,
                    {k: v for k, v in sc.items() if k not in ("kind", "start", "goal", "t_goal", "order")})
