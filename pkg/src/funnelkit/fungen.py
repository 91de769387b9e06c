"""Funnel-generator certificates.

A certificate holds a quadratic-in-error function ``V(t, e)`` and a feedback
``u = u_r + U(t, e, x_r, u_r)`` that together certify, for every reference
inside a box region ``R^s_p(t)``, that the error stays in ``{V <= beta}``.
Conditions are imposed as SOS programs at time samples (knots and interval
midpoints) with piecewise-linear interpolation of coefficients in time; a
stationary certificate has a single time-independent sample.
"""
from __future__ import annotations

import configparser
import io
import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import dynmod
from .polyalg import Poly, VarSet, monomials_up_to
from .sosc import LinPoly, SosProgram, as_lin

BETA = 1.0
DEGENERATE_WIDTH = 1e-12
CONTAIN_MARGIN = 1e-4   # relative tightening of the tracking box in the SOS conditions
INPUT_MARGIN = 1e-5     # relative tightening of the input box


class RegionError(ValueError):
    """A reference leaves the admissible region."""


class CertificateError(ValueError):
    pass


# ---------------------------------------------------------------------------
# time and region


@dataclass(frozen=True)
class TimeGrid:
    knots: tuple[float, ...]

    def __post_init__(self):
        k = tuple(float(t) for t in self.knots)
        object.__setattr__(self, "knots", k)
        if len(k) < 2:
            raise ValueError("a time grid needs at least two knots")
        if k[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if any(b <= a for a, b in zip(k, k[1:])):
            raise ValueError("knots must be strictly increasing")

    @classmethod
    def uniform(cls, T: float, n: int) -> "TimeGrid":
        return cls(tuple(np.linspace(0.0, T, n + 1)))

    @property
    def T(self) -> float:
        return self.knots[-1]

    @property
    def n_intervals(self) -> int:
        return len(self.knots) - 1

    def locate(self, t: float) -> tuple[int, float]:
        """Interval index and local fraction ``s in [0, 1]`` for time ``t``."""
        t = min(max(float(t), 0.0), self.T)
        k = int(np.searchsorted(self.knots, t, side="right") - 1)
        k = min(max(k, 0), self.n_intervals - 1)
        h = self.knots[k + 1] - self.knots[k]
        return k, (t - self.knots[k]) / h


@dataclass(frozen=True)
class AdmissibleRegion:
    """``R^s_p(t) = ({r*(t)} + p * R^expand(t)) intersected with R^max(t)``.

    Per-knot arrays have shape ``(K, nr)`` over the reference coordinates
    ``names``; a single row means time-invariant. Bounds may be infinite.
    """
    names: tuple[str, ...]
    times: tuple[float, ...]
    nominal: np.ndarray
    expand_lo: np.ndarray
    expand_hi: np.ndarray
    max_lo: np.ndarray
    max_hi: np.ndarray
    p: float = 0.0

    def __post_init__(self):
        for f in ("nominal", "expand_lo", "expand_hi", "max_lo", "max_hi"):
            a = np.atleast_2d(np.asarray(getattr(self, f), float))
            if a.shape != (len(self.times), len(self.names)):
                raise ValueError(f"{f} has shape {a.shape}, expected {(len(self.times), len(self.names))}")
            object.__setattr__(self, f, a)
        if self.p < 0:
            raise ValueError("p must be nonnegative")
        if np.any(self.expand_lo > 0) or np.any(self.expand_hi < 0):
            raise ValueError("expansion box must contain 0")
        for k in range(len(self.times)):
            lo, hi = self._box_row(k)
            if np.any(lo > hi + 1e-12):
                j = int(np.argmax(lo > hi + 1e-12))
                raise ValueError(f"region empty at knot {k} in coordinate {self.names[j]}")

    @classmethod
    def constant(cls, names, nominal, expand_lo, expand_hi, max_lo, max_hi, p=0.0) -> "AdmissibleRegion":
        return cls(tuple(names), (0.0,), np.atleast_2d(nominal), np.atleast_2d(expand_lo),
                   np.atleast_2d(expand_hi), np.atleast_2d(max_lo), np.atleast_2d(max_hi), p)

    @property
    def stationary(self) -> bool:
        return len(self.times) == 1

    def with_p(self, p: float) -> "AdmissibleRegion":
        return replace(self, p=float(p))

    def _scaled(self, e):
        # an infinite expansion marks a free coordinate, unbounded for every p
        with np.errstate(invalid="ignore"):
            return np.where(np.isinf(e), e, self.p * e)

    def _box_row(self, k):
        lo = np.maximum(self.nominal[k] + self._scaled(self.expand_lo[k]), self.max_lo[k])
        hi = np.minimum(self.nominal[k] + self._scaled(self.expand_hi[k]), self.max_hi[k])
        return lo, hi

    def _interp(self, arr, t):
        if self.stationary:
            return arr[0]
        return np.array([arr[0, j] if np.all(arr[:, j] == arr[0, j]) else np.interp(t, self.times, arr[:, j])
                         for j in range(arr.shape[1])])

    def box_at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        nom = self._interp(self.nominal, t)
        lo = np.maximum(nom + self._scaled(self._interp(self.expand_lo, t)), self._interp(self.max_lo, t))
        hi = np.minimum(nom + self._scaled(self._interp(self.expand_hi, t)), self._interp(self.max_hi, t))
        return lo, hi

    def nominal_at(self, t: float) -> np.ndarray:
        return self._interp(self.nominal, t)

    def saturated(self, p_next: float) -> bool:
        """True when growing ``p`` to ``p_next`` changes no box."""
        other = self.with_p(p_next)
        for t in self.times:
            a, b = self.box_at(t), other.box_at(t)
            if not (np.allclose(a[0], b[0]) and np.allclose(a[1], b[1])):
                return False
        return True

    def violation(self, t: float, r, tol: float = 1e-9):
        """``None`` if ``r`` lies in the box at ``t``, else ``(name, value, lo, hi)``."""
        lo, hi = self.box_at(t)
        r = np.asarray(r, float)
        for j, n in enumerate(self.names):
            if r[j] < lo[j] - tol or r[j] > hi[j] + tol:
                return n, float(r[j]), float(lo[j]), float(hi[j])
        return None

    def half_width(self, name: str, t: float = 0.0) -> float:
        lo, hi = self.box_at(t)
        j = self.names.index(name)
        return 0.5 * (hi[j] - lo[j])


# ---------------------------------------------------------------------------
# structural degree choices


@dataclass(frozen=True)
class Degrees:
    ctrl_e: int = 1          # max degree of the feedback in the error
    ctrl_r: int = 3          # max degree of the feedback in reference variables
    ctrl_total: int = 3
    ctrl_vars: tuple[str, ...] | None = None  # reference variables the feedback may use
    lam: int = 2             # free multiplier on (V - beta)
    sigma: int = 2           # SOS multipliers on box faces
    s_in: int = 2            # SOS multiplier on (beta - V) in the input conditions
    e_faces: bool = False    # add error-box faces to the S-procedure

    def as_dict(self) -> dict:
        return {k: (" ".join(v) if isinstance(v, tuple) else ("" if v is None else v))
                for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Degrees":
        kw = {}
        for k, v in d.items():
            if k == "ctrl_vars":
                kw[k] = tuple(str(v).split()) if str(v).strip() else None
            elif k == "e_faces":
                kw[k] = str(v).lower() in ("1", "true", "yes")
            else:
                kw[k] = int(v)
        return cls(**kw)


# ---------------------------------------------------------------------------
# models by name (certificate files reference their model this way)


def build_model(name: str, params: Mapping[str, float] | None = None) -> dynmod.ErrorModel:
    params = dict(params or {})
    if name == "pendulum":
        kw = {}
        if "theta_envelope" in params:
            kw["theta_envelope"] = float(params["theta_envelope"])
        if "sin_degree" in params:
            kw["sin_degree"] = int(params["sin_degree"])
        tr = {k[len("track_"):]: float(v) for k, v in params.items() if k.startswith("track_")}
        if tr:
            kw["tracking"] = {**dynmod.PENDULUM_TRACKING, **tr}
        return dynmod.preset_pendulum(**kw)[2]
    if name == "bicycle":
        kw = {}
        for key in ("sin_degree", "cos_degree"):
            if key in params:
                kw[key] = int(params[key])
        if "disturbance" in params:
            kw["disturbance"] = float(params["disturbance"])
        tr = {k[len("track_"):]: float(v) for k, v in params.items() if k.startswith("track_")}
        if tr:
            kw["tracking"] = {**dynmod.BICYCLE_TRACKING, **tr}
        box = {}
        for n in ("u1", "u2"):
            if f"{n}_max" in params:
                b = float(params[f"{n}_max"])
                box[n] = (-b, b)
        if box:
            kw["input_box"] = {**dynmod.BICYCLE_INPUTS, **box}
        return dynmod.preset_bicycle(**kw)[2]
    if name in dynmod.LINEAR_PRESETS:
        kw = {}
        if "input_bound" in params:
            kw["input_bound"] = float(params["input_bound"])
        tr = {k[len("track_"):]: float(v) for k, v in params.items() if k.startswith("track_")}
        if tr:
            kw["tracking"] = tr
        return dynmod.preset_linear(name, **kw)[2]
    raise ValueError(f"unknown model {name!r}")


# ---------------------------------------------------------------------------
# Lie derivative


def directional(V, rates: Mapping[str, object]):
    """``sum_i dV/dz_i * rates[z_i]`` (works for Poly and LinPoly)."""
    out = None
    for name, rate in rates.items():
        dv = V.diff(name)
        if dv.is_zero() if isinstance(dv, Poly) else not dv.terms:
            continue
        term = dv * rate
        out = term if out is None else out + term
    if out is None:
        return V * 0.0
    return out


def lie_derivative(V, em: dynmod.ErrorModel, u_hat: Sequence, d: Sequence | Mapping | None = None,
                   dVdt=None, target: VarSet | None = None):
    """Time derivative of ``V(e)`` along the error dynamics under ``u = u_hat``.

    ``u_hat`` gives the full plant input per input variable (e.g. ``u_r + K e``)
    over ``target`` (default: errors + reference state + reference input).
    ``d`` fixes disturbances (a vertex) or, when None, keeps them symbolic.
    ``dVdt`` is an optional explicit time partial.
    """
    Z = target or VarSet(em.errors + em.ref.state + em.ref.inputs)
    keep_d = d is None
    if keep_d:
        Z = Z.union(VarSet(em.disturbances)) if not all(n in Z for n in em.disturbances) else Z
    if isinstance(d, Mapping):
        d = [d[n] for n in em.disturbances]
    bind = {}
    for n in em.varset.names:
        if n in em.plant.inputs:
            continue
        if n in em.disturbances and not keep_d:
            continue
        bind[n] = Poly.var(Z, n)
    for n, u in zip(em.plant.inputs, u_hat):
        bind[n] = u.lift(Z) if hasattr(u, "lift") else u
    if not keep_d:
        for n, v in zip(em.disturbances, d):
            bind[n] = float(v)
    rates = {}
    dyn = any(isinstance(b, LinPoly) for b in bind.values())
    for e, F in zip(em.errors, em.field):
        rates[e] = F._subs_generic(bind, Z) if dyn else F.subs(bind, Z)
    Vz = V.lift(Z)
    out = directional(Vz, rates)
    if dVdt is not None:
        out = out + dVdt.lift(Z)
    return out


def lie_derivative_raw(V: Poly, plant: dynmod.DynamicsModel, ref: dynmod.ReferenceModel,
                       u_hat: Sequence[Poly]) -> Poly:
    """``grad_x V . f(x, u_hat) + grad_{x_r} V . f_r(x_r, u_r)`` for V over raw states."""
    Z = V.varset
    for n in plant.state + ref.state + ref.inputs + plant.disturbances:
        if n not in Z:
            Z = Z.union(VarSet([n]))
    bind = {n: Poly.var(Z, n) for n in plant.state + plant.disturbances}
    for n, u in zip(plant.inputs, u_hat):
        bind[n] = u.lift(Z)
    rates = {x: f.subs(bind, Z) for x, f in zip(plant.state, plant.field)}
    rbind = {n: Poly.var(Z, n) for n in ref.state + ref.inputs}
    rates.update({x: f.subs(rbind, Z) for x, f in zip(ref.state, ref.field)})
    return directional(V.lift(Z), rates)


# ---------------------------------------------------------------------------
# certificates


@dataclass
class Certificate:
    model: str
    model_params: dict
    grid: TimeGrid
    region: AdmissibleRegion
    V: list            # per knot: Poly over the error variables
    U: list            # per knot: list of Poly (feedback part per input) over Z
    beta: float = BETA
    gamma: float = math.nan
    degrees: Degrees = field(default_factory=Degrees)
    multipliers: dict = field(default_factory=dict)  # name -> Poly over Z
    stationary: bool = True
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        n = 1 if self.stationary else len(self.grid.knots)
        if len(self.V) != n or len(self.U) != n:
            raise CertificateError(f"expected {n} knot polynomials, got {len(self.V)} V and {len(self.U)} U")

    def error_model(self) -> dynmod.ErrorModel:
        return build_model(self.model, self.model_params)

    # interpolation -----------------------------------------------------
    def _weights(self, t: float):
        if self.stationary:
            return [(0, 1.0)], 0.0, None
        k, s = self.grid.locate(t)
        h = self.grid.knots[k + 1] - self.grid.knots[k]
        return [(k, 1.0 - s), (k + 1, s)], h, k

    def P_at(self, t: float) -> np.ndarray:
        """Quadratic form of V at time ``t`` (V is homogeneous quadratic in e)."""
        w, _, _ = self._weights(t)
        return sum(c * quad_matrix(self.V[k]) for k, c in w)

    def V_at(self, t: float) -> Poly:
        w, _, _ = self._weights(t)
        return sum((self.V[k] * c for k, c in w), Poly(self.V[0].varset))

    def U_at(self, t: float) -> list:
        w, _, _ = self._weights(t)
        return [sum((self.U[k][i] * c for k, c in w), Poly(self.U[0][i].varset)) for i in range(len(self.U[0]))]

    def dVdt_at(self, t: float) -> Poly:
        if self.stationary:
            return Poly(self.V[0].varset)
        _, h, k = self._weights(t)
        return (self.V[k + 1] - self.V[k]) * (1.0 / h)

    @property
    def horizon(self) -> float:
        return math.inf if self.stationary else self.grid.T

    # file format -------------------------------------------------------
    def dumps(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        r = self.region
        cp["certificate"] = {
            "model": self.model, "beta": repr(float(self.beta)), "gamma": repr(float(self.gamma)),
            "stationary": str(self.stationary).lower(),
            "inputs": " ".join(f"{len(u)}" for u in self.U[:1]),
        }
        cp["model_params"] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in self.model_params.items()}
        cp["grid"] = {"knots": " ".join(repr(t) for t in self.grid.knots)}
        cp["degrees"] = {k: str(v) for k, v in self.degrees.as_dict().items()}

        def rows(a):
            return "\n" + "\n".join(" ".join(repr(float(x)) for x in row) for row in a)
        cp["region"] = {"names": " ".join(r.names), "times": " ".join(repr(t) for t in r.times),
                        "p": repr(float(r.p)), "nominal": rows(r.nominal), "expand_lo": rows(r.expand_lo),
                        "expand_hi": rows(r.expand_hi), "max_lo": rows(r.max_lo), "max_hi": rows(r.max_hi)}
        cp["info"] = {k: str(v) for k, v in self.info.items()}
        for k, V in enumerate(self.V):
            cp[f"V {k}"] = {"poly": "\n" + V.dumps()}
        for k, us in enumerate(self.U):
            cp[f"U {k}"] = {f"u{i}": "\n" + u.dumps() for i, u in enumerate(us)}
        if self.multipliers:
            cp["multipliers"] = {n: "\n" + p.dumps() for n, p in self.multipliers.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str) -> "Certificate":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
            c = cp["certificate"]
            stationary = c["stationary"] == "true"
            grid = TimeGrid(tuple(float(t) for t in cp["grid"]["knots"].split()))
            rg = cp["region"]

            def arr(key):
                return np.array([[float(x) for x in ln.split()] for ln in rg[key].strip().splitlines()])
            region = AdmissibleRegion(tuple(rg["names"].split()), tuple(float(t) for t in rg["times"].split()),
                                      arr("nominal"), arr("expand_lo"), arr("expand_hi"), arr("max_lo"),
                                      arr("max_hi"), float(rg["p"]))
            params = {}
            for k, v in cp["model_params"].items():
                try:
                    params[k] = float(v)
                except ValueError:
                    params[k] = v
            n = 1 if stationary else len(grid.knots)
            V = [Poly.loads(cp[f"V {k}"]["poly"]) for k in range(n)]
            U = []
            for k in range(n):
                sec = cp[f"U {k}"]
                U.append([Poly.loads(sec[f"u{i}"]) for i in range(len(sec))])
            mult = {n_: Poly.loads(v) for n_, v in cp["multipliers"].items()} if "multipliers" in cp else {}
            deg = Degrees.from_dict(cp["degrees"]) if "degrees" in cp else Degrees()
            info = dict(cp["info"]) if "info" in cp else {}
            return cls(c["model"], params, grid, region, V, U, float(c["beta"]), float(c["gamma"]),
                       deg, mult, stationary, info)
        except (KeyError, ValueError, IndexError, configparser.Error) as exc:
            if isinstance(exc, CertificateError):
                raise
            raise CertificateError(f"malformed certificate file: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "Certificate":
        with open(path) as fh:
            return cls.loads(fh.read())


def quad_matrix(V: Poly, names: Sequence[str] | None = None) -> np.ndarray:
    """Symmetric matrix of the degree-2 homogeneous part of ``V``."""
    names = list(names or V.varset.names)
    idx = [V.varset.index(n) for n in names]
    n = len(names)
    P = np.zeros((n, n))
    for m, c in V.terms.items():
        if sum(m) != 2:
            continue
        nz = [a for a in range(n) if m[idx[a]]]
        if len(nz) == 1:
            P[nz[0], nz[0]] += c
        else:
            P[nz[0], nz[1]] += c / 2
            P[nz[1], nz[0]] += c / 2
    return P


# ---------------------------------------------------------------------------
# SOS program assembly


@dataclass(frozen=True)
class Sample:
    index: int
    interval: int   # knot interval (0 when stationary)
    s: float        # local fraction in the interval
    t: float
    lo: np.ndarray
    hi: np.ndarray


class FunnelSetup:
    """Everything fixed across alternation steps: model, region, grid, degrees."""

    def __init__(self, em: dynmod.ErrorModel, region: AdmissibleRegion, grid: TimeGrid | None = None,
                 degrees: Degrees | None = None, gamma_min: float = -10.0, stationary: bool | None = None,
                 model: tuple[str, dict] | None = None):
        self.em = em
        self.model_name, self.model_params = model or (em.name, {})
        self.region = region
        self.stationary = region.stationary if stationary is None else stationary
        self.grid = grid or TimeGrid((0.0, 1.0))
        self.degrees = degrees or Degrees()
        self.gamma_min = gamma_min
        self.Z = VarSet(em.errors + em.ref.state + em.ref.inputs)
        self.Ze = VarSet(em.errors)
        self.ref_names = em.ref.state + em.ref.inputs
        if tuple(region.names) != self.ref_names:
            raise ValueError(f"region coordinates {region.names} differ from reference {self.ref_names}")
        self.input_pairs = list(zip(em.plant.inputs, em.ref.inputs))
        if len(em.plant.inputs) != len(em.ref.inputs):
            raise ValueError("plant and reference must have the same number of inputs")
        self.n_knots = 1 if self.stationary else len(self.grid.knots)
        self.samples = self._make_samples()
        self.vertices = [tuple(v) for v in itertools.product(*[em.disturbance_box[n] for n in em.disturbances])]
        ctrl = self.degrees.ctrl_vars
        if ctrl is None:
            ctrl = self._data_ref_vars()
        self.ctrl_vars = tuple(ctrl)
        self.u_monos = self._ctrl_monomials()
        self.v_monos = [m for m in self._monos(em.errors, 2, 2)]

    # helpers -----------------------------------------------------------
    def _make_samples(self) -> list[Sample]:
        out = []
        if self.stationary:
            lo, hi = self.region.box_at(0.0)
            return [Sample(0, 0, 0.0, 0.0, lo, hi)]
        for k in range(self.grid.n_intervals):
            t0, t1 = self.grid.knots[k], self.grid.knots[k + 1]
            for s in (0.0, 0.5, 1.0):
                t = t0 + s * (t1 - t0)
                lo, hi = self.region.box_at(t)
                out.append(Sample(len(out), k, s, t, lo, hi))
        return out

    def _monos(self, names: Sequence[str], deg: int, min_deg: int = 0) -> list[tuple[int, ...]]:
        idx = [self.Z.index(n) for n in names]
        out = []
        for m in monomials_up_to(len(idx), deg, min_deg):
            full = [0] * len(self.Z)
            for i, e in zip(idx, m):
                full[i] = e
            out.append(tuple(full))
        return out

    def _data_ref_vars(self) -> list[str]:
        """Reference variables the error dynamics depend on under ``u = u_r``."""
        U0 = [Poly(self.Z)] * len(self.input_pairs)
        V = Poly(self.Ze)
        for e in self.em.errors:
            V = V + Poly.var(self.Ze, e) ** 2
        used = set()
        for v in self.vertices or [()]:
            dv = lie_derivative(V, self.em, self.full_inputs(U0), v, target=self.Z)
            used |= set(dv.variables())
        return [n for n in self.ref_names if n in used]

    def _ctrl_monomials(self) -> list[tuple[int, ...]]:
        d = self.degrees
        eidx = [self.Z.index(n) for n in self.em.errors]
        ridx = [self.Z.index(n) for n in self.ctrl_vars]
        out = []
        for m in self._monos(self.em.errors + self.ctrl_vars, d.ctrl_total):
            de = sum(m[i] for i in eidx)
            dr = sum(m[i] for i in ridx)
            if de <= d.ctrl_e and dr <= d.ctrl_r:
                out.append(m)
        return out

    def full_inputs(self, U: Sequence) -> list:
        """``u_i = u_r,i + U_i`` over Z."""
        return [Ui.lift(self.Z) + Poly.var(self.Z, urn) for (_, urn), Ui in zip(self.input_pairs, U)]

    def knot_weights(self, smp: Sample) -> list[tuple[int, float]]:
        if self.stationary:
            return [(0, 1.0)]
        return [(smp.interval, 1.0 - smp.s), (smp.interval + 1, smp.s)]

    def interval_length(self, smp: Sample) -> float:
        return self.grid.knots[smp.interval + 1] - self.grid.knots[smp.interval]

    def fixed_bindings(self, smp: Sample) -> dict:
        """Reference coordinates with a degenerate box become constants."""
        return {n: float(smp.lo[j]) for j, n in enumerate(self.ref_names)
                if smp.hi[j] - smp.lo[j] <= DEGENERATE_WIDTH}

    def face_polys(self, smp: Sample, used: set) -> list[tuple[str, Poly]]:
        out = []
        for j, n in enumerate(self.ref_names):
            if n not in used:
                continue
            lo, hi = smp.lo[j], smp.hi[j]
            if hi - lo <= DEGENERATE_WIDTH:
                continue
            if not (np.isfinite(lo) and np.isfinite(hi)):
                continue
            z = Poly.var(self.Z, n)
            out.append((n, (z - lo) * (hi - z)))
        if self.degrees.e_faces:
            for n in self.em.errors:
                w = self.em.tracking_box[n]
                z = Poly.var(self.Z, n)
                out.append((n, Poly.const(self.Z, w * w) - z * z))
        return out


@dataclass
class CertSlot:
    """Current values of the certificate parts; ``None`` marks a decision."""
    V: list | None = None            # per knot Poly over Ze
    U: list | None = None            # per knot list of Poly over Z
    lam: dict = field(default_factory=dict)   # (sample, vertex) -> Poly over Z
    s_in: dict = field(default_factory=dict)  # (sample, input, face) -> Poly over Z


@dataclass
class ProgramHandles:
    prog: SosProgram
    gamma: LinPoly
    V: list
    U: list
    lam: dict
    s_in: dict


def _subst(expr, bind: dict, Z: VarSet):
    if not bind:
        return expr
    return expr.subs(bind, Z)


def _vars_of(expr) -> set:
    if isinstance(expr, Poly):
        return set(expr.variables())
    vs = expr.varset.names
    return {vs[i] for (m, _) in expr.terms for i, e in enumerate(m) if e}


def boundary_program(setup: FunnelSetup, slot: CertSlot, frozen: str, knots: Sequence[int] | None = None,
                     prog: SosProgram | None = None) -> ProgramHandles:
    """Assemble the SOS conditions for one alternation step.

    ``frozen="V"``: V fixed, search feedback, multipliers and gamma.
    ``frozen="U"``: feedback and multipliers fixed, search V, face multipliers and gamma.
    ``frozen="all"``: nothing searched but gamma (evaluation).
    ``knots`` restricts to samples on intervals touching these knots.
    """
    if frozen not in ("V", "U", "all"):
        raise ValueError("frozen must be 'V', 'U' or 'all'")
    em, Z, deg = setup.em, setup.Z, setup.degrees
    prog = prog or SosProgram(Z)
    gamma = prog.scalar("gamma")
    prog.add_ge(gamma - setup.gamma_min, "gamma_floor")
    prog.minimize(gamma)
    usable = [s for s in setup.samples if knots is None or s.interval in knots
              or (not setup.stationary and s.interval + 1 in knots)]

    # certificate parts as expressions over Z
    if frozen == "U":
        Vk = [prog.free_poly(f"V{k}", setup.v_monos) for k in range(setup.n_knots)]
        for k, V in enumerate(Vk):
            for n in em.errors:
                w = em.tracking_box[n]
                z = Poly.var(Z, n)
                w = w * (1.0 - CONTAIN_MARGIN)
                prog.add_sos(V - z * z * (setup_beta() / (w * w)), f"contain{k}:{n}")
    else:
        if slot.V is None:
            raise ValueError("V must be given unless it is searched")
        Vk = [as_lin(V.lift(Z)) for V in slot.V]
    if frozen == "V":
        Uk = [[prog.free_poly(f"U{k}:{i}", setup.u_monos) for i in range(len(setup.input_pairs))]
              for k in range(setup.n_knots)]
    else:
        if slot.U is None:
            raise ValueError("U must be given unless it is searched")
        Uk = [[as_lin(u.lift(Z)) for u in us] for us in slot.U]

    lam_out, s_out = {}, {}
    beta = setup_beta()
    for smp in usable:
        w = setup.knot_weights(smp)
        V = sum((Vk[k] * c for k, c in w), LinPoly(Z))
        U = [sum((Uk[k][i] * c for k, c in w), LinPoly(Z)) for i in range(len(setup.input_pairs))]
        dVdt = None
        if not setup.stationary:
            h = setup.interval_length(smp)
            dVdt = (Vk[smp.interval + 1] - Vk[smp.interval]) * (1.0 / h)
        bind = setup.fixed_bindings(smp)
        Vs = _subst(V, bind, Z)
        Us = [_subst(u, bind, Z) for u in U]
        uf = setup.full_inputs(Us)
        uf = [_subst(u, bind, Z) for u in uf]
        for vi, vert in enumerate(setup.vertices or [()]):
            key = (smp.index, vi)
            ld = lie_derivative(V, em, uf, vert, dVdt, target=Z)
            ld = _subst(ld, bind, Z)
            used = _vars_of(ld) | _vars_of(Vs)
            rvars = [n for n in setup.ref_names if n in used]
            lvars = list(em.errors) + rvars
            if frozen == "V":
                lam = prog.free_poly(f"lam{smp.index}:{vi}", setup._monos(lvars, deg.lam))
                lam_out[key] = lam
            else:
                lam = as_lin(slot.lam[key].lift(Z))
            expr = gamma - ld + lam * (Vs - beta)
            for fname, g in setup.face_polys(smp, used):
                sig = prog.sos_poly(f"sig{smp.index}:{vi}:{fname}", setup._monos(lvars, deg.sigma // 2))
                expr = expr - sig * g
            prog.add_sos(expr, f"dec{smp.index}:{vi}")
        # input bounds over the sublevel set
        for i, ((un, urn), u) in enumerate(zip(setup.input_pairs, uf)):
            lo, hi = em.plant.input_box[un]
            lo, hi = lo + INPUT_MARGIN * abs(lo), hi - INPUT_MARGIN * abs(hi)
            used = _vars_of(u) | _vars_of(Vs)
            rvars = [n for n in setup.ref_names if n in used]
            svars = list(em.errors) + rvars
            for face, margin in (("hi", Poly.const(Z, hi) - u), ("lo", u - Poly.const(Z, lo))):
                key = (smp.index, i, face)
                if frozen == "V":
                    s = prog.sos_poly(f"s{smp.index}:{i}:{face}", setup._monos(svars, deg.s_in // 2))
                    s_out[key] = s
                else:
                    s = as_lin(slot.s_in[key].lift(Z))
                expr = as_lin(margin) - s * (beta - Vs)
                for fname, g in setup.face_polys(smp, used):
                    sig = prog.sos_poly(f"isig{smp.index}:{i}:{face}:{fname}", setup._monos(svars, deg.sigma // 2))
                    expr = expr - sig * g
                prog.add_sos(expr, f"input{smp.index}:{i}:{face}")
    return ProgramHandles(prog, gamma, Vk, Uk, lam_out, s_out)


def setup_beta() -> float:
    return BETA


# ---------------------------------------------------------------------------
# runtime instances


def rk4_step(f, x, u, h):
    k1 = f(x, u)
    k2 = f(x + 0.5 * h * k1, u)
    k3 = f(x + 0.5 * h * k2, u)
    k4 = f(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


@dataclass
class Reference:
    """Reference trajectory: knot times, states at knots, inputs held on each interval.

    ``u`` has one row per interval (``len(t) - 1`` rows). States between
    knots follow the reference dynamics under the held input.
    """
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, float)
        self.x = np.atleast_2d(np.asarray(self.x, float))
        self.u = np.atleast_2d(np.asarray(self.u, float))
        if self.x.shape[0] != len(self.t):
            raise ValueError("reference needs one state row per knot")
        if self.u.shape[0] != max(len(self.t) - 1, 1):
            raise ValueError("reference needs one input row per interval")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("reference times must increase")

    @property
    def T(self) -> float:
        return float(self.t[-1] - self.t[0])

    @property
    def t0(self) -> float:
        return float(self.t[0])

    def interval(self, t: float) -> int:
        k = int(np.searchsorted(self.t, t, side="right") - 1)
        return min(max(k, 0), len(self.t) - 2) if len(self.t) > 1 else 0

    def input_at(self, t: float) -> np.ndarray:
        return self.u[self.interval(t)]

    def state_at(self, t: float, ref_model, substeps: int = 10) -> np.ndarray:
        k = self.interval(t)
        x = self.x[k].copy()
        dt = float(t) - self.t[k]
        if dt <= 0:
            return x
        h = dt / substeps
        for _ in range(substeps):
            x = rk4_step(ref_model.f, x, self.u[k], h)
        return x

    def dense(self, ref_model, substeps: int = 10):
        """States at ``substeps`` points per interval (times, states, interval inputs)."""
        ts, xs, us = [], [], []
        for k in range(len(self.t) - 1):
            h = (self.t[k + 1] - self.t[k]) / substeps
            x = self.x[k].copy()
            for j in range(substeps):
                ts.append(self.t[k] + j * h)
                xs.append(x.copy())
                us.append(self.u[k])
                x = rk4_step(ref_model.f, x, self.u[k], h)
        ts.append(self.t[-1])
        xs.append(self.x[-1])
        us.append(self.u[-1])
        return np.array(ts), np.array(xs), np.array(us)

    def shifted(self, dt: float) -> "Reference":
        return Reference(self.t + dt, self.x, self.u)

    def slice(self, t_start: float, t_end: float) -> "Reference":
        """Sub-trajectory between two knot times."""
        i = int(np.argmin(np.abs(self.t - t_start)))
        j = int(np.argmin(np.abs(self.t - t_end)))
        if j <= i:
            raise ValueError("empty slice")
        return Reference(self.t[i:j + 1], self.x[i:j + 1], self.u[i:j])


class FunnelInstance:
    """A certificate bound to one admissible reference.

    ``t0`` is the certificate-local time at the reference's first knot.
    Methods accept batches (leading dimensions) for states.
    """

    def __init__(self, cert: Certificate, reference: Reference, t0: float = 0.0):
        self.cert = cert
        self.ref = reference
        self.t0 = t0
        self.em = cert.error_model()
        self._U_cache: dict = {}
        self._P_cache: dict = {}

    def local(self, t: float) -> float:
        return self.t0 + (float(t) - self.ref.t0)

    def P(self, t: float) -> np.ndarray:
        tl = 0.0 if self.cert.stationary else self.local(t)
        if tl not in self._P_cache:
            self._P_cache[tl] = self.cert.P_at(tl)
        return self._P_cache[tl]

    def _U(self, t: float):
        tl = 0.0 if self.cert.stationary else self.local(t)
        if tl not in self._U_cache:
            self._U_cache[tl] = self.cert.U_at(tl)
        return self._U_cache[tl]

    def reference_at(self, t: float):
        return self.ref.state_at(t, self.em.ref), self.ref.input_at(t)

    def V(self, t: float, x, xr=None):
        if xr is None:
            xr, _ = self.reference_at(t)
        e = self.em.to_error(x, xr)
        return np.einsum("...i,ij,...j->...", e, self.P(t), e)

    def inside(self, t: float, x, tol: float = 0.0):
        return self.V(t, x) <= self.cert.beta + tol

    def control(self, t: float, x, xr=None, ur=None, clamp: bool = True):
        if xr is None or ur is None:
            xr_, ur_ = self.reference_at(t)
            xr = xr_ if xr is None else xr
            ur = ur_ if ur is None else ur
        x = np.asarray(x, float)
        e = self.em.to_error(x, xr)
        xr_b = np.broadcast_to(xr, e.shape[:-1] + (np.shape(xr)[-1],))
        ur_b = np.broadcast_to(ur, e.shape[:-1] + (np.shape(ur)[-1],))
        pts = np.concatenate([e, xr_b, ur_b], axis=-1)
        flat = pts.reshape(-1, pts.shape[-1])
        fb = np.stack([Ui.evaluate_many(flat) for Ui in self._U(t)], axis=-1).reshape(ur_b.shape)
        u = ur_b + fb
        return self.em.plant.clamp(u) if clamp else u

    def error(self, t: float, x):
        xr, _ = self.reference_at(t)
        return self.em.to_error(x, xr)

    def state_from_error(self, t: float, e):
        xr, _ = self.reference_at(t)
        return self.em.from_error(e, xr)

    @property
    def t_start(self) -> float:
        return self.ref.t0

    @property
    def t_end(self) -> float:
        return float(self.ref.t[-1])


def check_membership(cert: Certificate, reference: Reference, t0: float = 0.0, substeps: int = 10):
    """First region violation of a reference as ``(sample, t, name, value, lo, hi)``, or None.

    States are checked at knots and between them; each held input is checked
    against the boxes at both ends of its interval.
    """
    em_ref = cert.error_model().ref
    region = cert.region
    ts, xs, us = reference.dense(em_ref, substeps)
    for j, (t, x, u) in enumerate(zip(ts, xs, us)):
        tl = t0 + (t - reference.t0)
        bad = region.violation(tl, np.concatenate([x, u]))
        if bad is not None:
            return (j, float(t)) + bad
    for k in range(len(reference.t) - 1):
        tl = t0 + (reference.t[k + 1] - reference.t0)
        bad = region.violation(tl, np.concatenate([reference.x[k + 1], reference.u[k]]))
        if bad is not None:
            return (k, float(reference.t[k + 1])) + bad
    return None


def instantiate(cert: Certificate, reference: Reference, t0: float = 0.0) -> FunnelInstance:
    """Bind ``cert`` to ``reference`` after checking region membership along it."""
    if not cert.stationary and t0 + reference.T > cert.grid.T + 1e-9:
        raise RegionError(f"reference lasts {reference.T:.3g}s, certificate horizon is {cert.grid.T:.3g}s")
    bad = check_membership(cert, reference, t0)
    if bad is not None:
        j, t, n, v, lo, hi = bad
        raise RegionError(f"reference leaves the region at sample {j} (t={t:.4g}): "
                          f"{n}={v:.6g} outside [{lo:.6g}, {hi:.6g}]")
    return FunnelInstance(cert, reference, t0)


def levelset_box(cert_or_inst, t: float = 0.0) -> np.ndarray:
    """Half-widths of the tight axis-aligned box around ``{e : V(t, e) <= beta}``."""
    cert = cert_or_inst.cert if isinstance(cert_or_inst, FunnelInstance) else cert_or_inst
    if isinstance(cert_or_inst, FunnelInstance):
        t = cert_or_inst.local(t)
    P = cert.P_at(t)
    return quad_box(P, cert.beta)


def quad_box(P: np.ndarray, beta: float = 1.0) -> np.ndarray:
    P = np.asarray(P, float)
    w = np.linalg.eigvalsh(P)
    if w[0] <= 0:
        raise CertificateError("quadratic part is not positive definite")
    return np.sqrt(beta * np.diag(np.linalg.inv(P)))


# ---------------------------------------------------------------------------
# sampling audit


@dataclass
class AuditResult:
    ok: bool
    worst_decrease: float      # max dV/dt found on the surface V = beta
    worst_input: float         # max input-bound violation over the sublevel set (<= 0 is fine)
    worst_origin: float        # max V(t, 0) - beta
    worst_containment: float   # max over boxes of |half-width| / tracking width - 1
    n_points: int
    detail: str = ""


def audit(cert: Certificate, n_points: int = 100_000, seed: int = 0, margin_frac: float = 0.5) -> AuditResult:
    """Dense sampling check of the certificate conditions.

    Samples (t, e, r, d) with e on ``V = beta``, r inside and on the faces of
    the region, d at vertices and inside its box, and requires
    ``dV/dt <= margin_frac * gamma``. Also samples the sublevel set for the
    input bounds, the origin condition and the tracking containment.
    """
    rng = np.random.default_rng(seed)
    em = cert.error_model()
    ne = len(em.errors)
    nref = len(em.ref.state) + len(em.ref.inputs)
    nd = len(em.disturbances)
    region = cert.region
    if cert.stationary:
        times = np.zeros(n_points)
    else:
        times = rng.uniform(0.0, cert.grid.T, n_points)
        times[: len(cert.grid.knots)] = cert.grid.knots
    # group by time to reuse V(t)
    n_groups = 1 if cert.stationary else 200
    tg = np.zeros(n_groups) if cert.stationary else np.concatenate(
        [np.array(cert.grid.knots), rng.uniform(0.0, cert.grid.T, n_groups - len(cert.grid.knots))])
    per = max(1, n_points // len(tg))
    worst = -math.inf
    worst_in = -math.inf
    worst_org = -math.inf
    worst_box = -math.inf
    detail = ""
    Zvs = VarSet(em.errors + em.ref.state + em.ref.inputs + em.plant.inputs + em.disturbances)
    total = 0
    for t in tg:
        P = cert.P_at(t)
        if np.linalg.eigvalsh(P)[0] <= 0:
            return AuditResult(False, math.inf, math.inf, math.inf, math.inf, total, f"P indefinite at t={t}")
        L = np.linalg.cholesky(P)
        dirs = rng.normal(size=(per, ne))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        E = np.linalg.solve(L.T, dirs.T).T * math.sqrt(cert.beta)  # e^T P e = beta
        lo, hi = region.box_at(t)
        lo_f = np.where(np.isfinite(lo), lo, -1e3)
        hi_f = np.where(np.isfinite(hi), hi, 1e3)
        R = rng.uniform(lo_f, hi_f, size=(per, nref))
        # push a third of the samples onto faces
        face = rng.random((per, nref)) < 0.33
        side = rng.random((per, nref)) < 0.5
        R = np.where(face & side, lo_f, np.where(face, hi_f, R))
        dlo = np.array([em.disturbance_box[n][0] for n in em.disturbances])
        dhi = np.array([em.disturbance_box[n][1] for n in em.disturbances])
        D = rng.uniform(dlo, dhi, size=(per, nd)) if nd else np.zeros((per, 0))
        if nd:
            vert = rng.random((per, nd)) < 0.5
            D = np.where(rng.random((per, 1)) < 0.5, np.where(vert, dlo, dhi), D)
        Upolys = cert.U_at(t)
        pts_c = np.hstack([E, R])
        U = R[:, len(em.ref.state):] + np.stack([u.evaluate_many(pts_c) for u in Upolys], axis=1)
        full = np.hstack([E, R, U, D])
        Ed = np.stack([F.evaluate_many(full) for F in em.field], axis=1)
        Pdot = quad_matrix(cert.dVdt_at(t), em.errors) if not cert.stationary else np.zeros((ne, ne))
        dV = 2 * np.einsum("ni,ij,nj->n", E, P, Ed) + np.einsum("ni,ij,nj->n", E, Pdot, E)
        m = dV.max()
        if m > worst:
            worst = m
            j = int(dV.argmax())
            detail = f"t={t:.4g} e={E[j].round(5).tolist()} r={R[j].round(5).tolist()} d={D[j].round(5).tolist()}"
        # input bounds on the sublevel set: scale surface points inward
        Ei = E * rng.uniform(0, 1, size=(per, 1)) ** (1.0 / ne)
        Ui = R[:, len(em.ref.state):] + np.stack([u.evaluate_many(np.hstack([Ei, R])) for u in Upolys], axis=1)
        Us = np.vstack([U, Ui])
        for i, n in enumerate(em.plant.inputs):
            lo_u, hi_u = em.plant.input_box[n]
            worst_in = max(worst_in, float(np.max(Us[:, i] - hi_u)), float(np.max(lo_u - Us[:, i])))
        worst_org = max(worst_org, cert.V_at(t).constant_term() - cert.beta)
        box = quad_box(P, cert.beta)
        widths = np.array([em.tracking_box[n] for n in em.errors])
        worst_box = max(worst_box, float(np.max(box / widths - 1.0)))
        total += per
    ok = (worst <= margin_frac * cert.gamma and worst_in <= 1e-7 and worst_org < 0 and worst_box <= 1e-7)
    return AuditResult(bool(ok), float(worst), float(worst_in), float(worst_org), float(worst_box), total, detail)
