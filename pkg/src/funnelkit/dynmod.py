"""Polynomial system/reference models, trig polynomialization and presets.

Synthesis works in tracking-error coordinates: an :class:`ErrorModel`
gives the error derivative as a polynomial in (error, reference state,
reference input, system input, disturbance). Taylor remainders of the trig
terms are folded into the disturbance boxes so the polynomial model
over-approximates the true dynamics on the stated envelope.
"""
from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .polyalg import Poly, VarSet

Box = dict  # name -> (lo, hi)


# ---------------------------------------------------------------------------
# Taylor polynomials


@dataclass(frozen=True)
class TaylorPoly:
    poly: Poly
    func: str
    center: float
    degree: int
    order: int  # highest order actually matched (>= degree; next terms may vanish)

    def remainder_bound(self, radius: float) -> float:
        """Bound on |func(x) - poly(x)| for |x - center| <= radius."""
        k = self.order + 1
        return abs(radius) ** k / math.factorial(k)


def _trig_derivs(func: str, c: float, n: int) -> list[float]:
    s, co = math.sin(c), math.cos(c)
    cyc = [s, co, -s, -co] if func == "sin" else [co, -s, -co, s]
    return [cyc[k % 4] for k in range(n + 1)]


def taylorize(func: str, var: str, center: float, degree: int, varset: VarSet | None = None) -> TaylorPoly:
    """Taylor polynomial of ``sin`` or ``cos`` about ``center`` in ``var``."""
    if func not in ("sin", "cos"):
        raise ValueError(f"unsupported function {func!r}")
    if degree < 1:
        raise ValueError("degree must be >= 1")
    vs = varset or VarSet([var])
    x = Poly.var(vs, var) - center
    d = _trig_derivs(func, center, degree + 8)
    out = Poly(vs)
    xk = Poly.const(vs, 1.0)
    for k in range(degree + 1):
        out = out + xk * (d[k] / math.factorial(k))
        xk = xk * x
    order = degree
    while abs(d[order + 1]) < 1e-15 and order < degree + 8:
        order += 1
    return TaylorPoly(out, func, center, degree, order)


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class DynamicsModel:
    name: str
    state: tuple[str, ...]
    inputs: tuple[str, ...]
    disturbances: tuple[str, ...]
    field: tuple[Poly, ...]
    input_box: Box
    disturbance_box: Box
    numeric: Callable | None = None  # exact f(x, u, d) -> xdot, numpy

    def __post_init__(self):
        if len(self.field) != len(self.state):
            raise ValueError("field length must equal state dimension")
        allowed = set(self.state) | set(self.inputs) | set(self.disturbances)
        for f in self.field:
            if not set(f.variables()) <= allowed:
                raise ValueError(f"field uses unknown variables {set(f.variables()) - allowed}")

    @property
    def varset(self) -> VarSet:
        return VarSet(self.state + self.inputs + self.disturbances)

    def eval_field(self, x, u, d=None) -> np.ndarray:
        """Polynomial field at a point (disturbance defaults to zero)."""
        d = np.zeros(len(self.disturbances)) if d is None else d
        pt = np.concatenate([np.atleast_1d(x), np.atleast_1d(u), np.atleast_1d(d)]).astype(float)
        return np.array([f.evaluate(pt) for f in self.field])

    def f(self, x, u, d=None) -> np.ndarray:
        """True dynamics; the polynomial field when no exact form is attached.

        Accepts batches (leading dimensions) when an exact form is attached.
        """
        x = np.asarray(x, float)
        if d is None:
            d = np.zeros(x.shape[:-1] + (len(self.disturbances),))
        if self.numeric is not None:
            return np.asarray(self.numeric(x, np.asarray(u, float), np.asarray(d, float)), float)
        if x.ndim == 1:
            return self.eval_field(x, u, d)
        pts = np.concatenate([x, np.asarray(u, float), np.asarray(d, float)], axis=-1)
        flat = pts.reshape(-1, pts.shape[-1])
        out = np.stack([f.evaluate_many(flat) for f in self.field], axis=-1)
        return out.reshape(x.shape)

    def clamp(self, u) -> np.ndarray:
        lo = np.array([self.input_box[n][0] for n in self.inputs])
        hi = np.array([self.input_box[n][1] for n in self.inputs])
        return np.clip(u, lo, hi)


@dataclass(frozen=True)
class ReferenceModel:
    state: tuple[str, ...]
    inputs: tuple[str, ...]
    field: tuple[Poly, ...]
    box: Box  # R = X_r x U_r

    def __post_init__(self):
        if len(self.field) != len(self.state):
            raise ValueError("reference field length must equal reference state dimension")

    @property
    def varset(self) -> VarSet:
        return VarSet(self.state + self.inputs)

    @property
    def names(self) -> tuple[str, ...]:
        return self.state + self.inputs

    def f(self, xr, ur) -> np.ndarray:
        """Reference field; leading batch dimensions are allowed."""
        xr = np.asarray(xr, float)
        ur = np.asarray(ur, float)
        if xr.ndim == 1:
            pt = np.concatenate([xr, np.atleast_1d(ur)])
            return np.array([g.evaluate(pt) for g in self.field])
        pts = np.concatenate([xr, ur], axis=-1)
        flat = pts.reshape(-1, pts.shape[-1])
        return np.stack([g.evaluate_many(flat) for g in self.field], axis=-1).reshape(xr.shape)

    def f_many(self, xr: np.ndarray, ur: np.ndarray) -> np.ndarray:
        pts = np.hstack([np.atleast_2d(xr), np.atleast_2d(ur)])
        return np.stack([g.evaluate_many(pts) for g in self.field], axis=1)


@dataclass(frozen=True)
class ErrorModel:
    """Tracking-error dynamics ``e' = F(e, x_r, u_r, u, d)``.

    ``to_error``/``from_error`` map between raw states and error coordinates
    for a given reference state (numpy, exact).
    """
    name: str
    errors: tuple[str, ...]
    plant: DynamicsModel
    ref: ReferenceModel
    disturbances: tuple[str, ...]
    field: tuple[Poly, ...]
    disturbance_box: Box
    to_error: Callable
    from_error: Callable
    tracking_box: Box  # half-widths of the tracking specification per error coordinate
    envelope: dict = field(default_factory=dict)  # notes on Taylor validity

    @property
    def varset(self) -> VarSet:
        return VarSet(self.errors + self.ref.state + self.ref.inputs + self.plant.inputs + self.disturbances)

    def eval_field(self, e, xr, ur, u, d) -> np.ndarray:
        pt = np.concatenate([e, xr, ur, u, d]).astype(float)
        return np.array([f.evaluate(pt) for f in self.field])


def identity_error_model(plant: DynamicsModel, ref: ReferenceModel, errors: Sequence[str],
                         tracking_box: Box, name: str | None = None) -> ErrorModel:
    """Error ``e = x - x_r`` when plant and reference share coordinates."""
    errors = tuple(errors)
    if len(errors) != len(plant.state) or len(ref.state) != len(plant.state):
        raise ValueError("identity error map needs matching state dimensions")
    vs = VarSet(errors + ref.state + ref.inputs + plant.inputs + plant.disturbances)
    bind = {x: Poly.var(vs, e) + Poly.var(vs, xr) for x, e, xr in zip(plant.state, errors, ref.state)}
    for n in plant.inputs + plant.disturbances:
        bind[n] = Poly.var(vs, n)
    fields = []
    for f, fr in zip(plant.field, ref.field):
        fields.append(f.subs(bind, vs) - fr.lift(vs))

    def to_error(x, xr):
        return np.asarray(x, float) - np.asarray(xr, float)

    def from_error(e, xr):
        return np.asarray(e, float) + np.asarray(xr, float)

    return ErrorModel(name or plant.name, errors, plant, ref, plant.disturbances, tuple(fields),
                      dict(plant.disturbance_box), to_error, from_error, dict(tracking_box))


# ---------------------------------------------------------------------------
# presets

PENDULUM_INPUT_BOUND = 1.15
PENDULUM_TRACKING = {"e_th": 0.2, "e_om": 0.2}


def preset_pendulum(theta_envelope: float = 1.1, sin_degree: int = 3,
                    tracking: Mapping[str, float] | None = None):
    """Altered inverted pendulum ``th' = om - 0.2 sin th, om' = sin th + u``.

    ``sin`` is replaced by its Taylor polynomial about 0 plus a remainder
    disturbance ``rho`` bounded on ``|th| <= theta_envelope``. Returns
    ``(plant, reference, error_model)``.
    """
    vs = VarSet(["th", "om", "u", "rho"])
    th, om, u, rho = vs.vars("th", "om", "u", "rho")
    tp = taylorize("sin", "th", 0.0, sin_degree, vs)
    s = tp.poly + rho
    R = tp.remainder_bound(theta_envelope)

    def exact(x, uu, d):
        return np.stack([x[..., 1] - 0.2 * np.sin(x[..., 0]), np.sin(x[..., 0]) + uu[..., 0]], axis=-1)

    plant = DynamicsModel(
        "pendulum", ("th", "om"), ("u",), ("rho",), (om - s * 0.2, s + u),
        {"u": (-PENDULUM_INPUT_BOUND, PENDULUM_INPUT_BOUND)}, {"rho": (-R, R)}, exact)
    rvs = VarSet(["th_r", "om_r", "u_r"])
    ref = ReferenceModel(("th_r", "om_r"), ("u_r",), (rvs.var("om_r"), rvs.var("u_r")),
                         {"th_r": (-math.pi, math.pi), "om_r": (-2.0, 2.0), "u_r": (-1.0, 1.0)})
    em = identity_error_model(plant, ref, ("e_th", "e_om"), tracking or PENDULUM_TRACKING, "pendulum")
    em = replace(em, envelope={"theta": theta_envelope, "sin_remainder": R})
    return plant, ref, em


LINEAR_PRESETS = {
    # name: (A, B, state names)
    "first_order": ([[-1.0]], [[1.0]], ("x",)),
    "double_integrator": ([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], ("p", "v")),
}


def preset_linear(name: str, input_bound: float = 10.0, tracking: Mapping[str, float] | None = None):
    """Linear plant ``x' = A x + B u`` tracking a reference with the same field.

    Small analytic test beds: the error dynamics are ``e' = A e + B (u - u_r)``.
    """
    A, B, state = LINEAR_PRESETS[name]
    A, B = np.asarray(A, float), np.asarray(B, float)
    inputs = tuple(f"u{i + 1}" if B.shape[1] > 1 else "u" for i in range(B.shape[1]))
    vs = VarSet(state + inputs)
    z = vs.vars(*state, *inputs)
    fields = tuple(sum((z[j] * A[i, j] for j in range(len(state))), Poly(vs))
                   + sum((z[len(state) + k] * B[i, k] for k in range(len(inputs))), Poly(vs))
                   for i in range(len(state)))
    plant = DynamicsModel(name, state, inputs, (), fields, {u: (-input_bound, input_bound) for u in inputs}, {})
    rstate = tuple(f"{n}_r" for n in state)
    rinputs = tuple(f"{n}_r" for n in inputs)
    rvs = VarSet(rstate + rinputs)
    bind = {n: Poly.var(rvs, m) for n, m in zip(state + inputs, rstate + rinputs)}
    ref = ReferenceModel(rstate, rinputs, tuple(f.subs(bind, rvs) for f in fields),
                         {**{n: (-100.0, 100.0) for n in rstate}, **{n: (-input_bound, input_bound) for n in rinputs}})
    errors = tuple(f"e_{n}" for n in state)
    tr = dict(tracking or {e: 1.0 for e in errors})
    return plant, ref, identity_error_model(plant, ref, errors, tr, name)


BICYCLE_L = 0.3
BICYCLE_D = 0.05
# thrust u1 and steering u2 bounds; overridable through u1_max / u2_max
BICYCLE_INPUTS = {"u1": (-1.0, 1.0), "u2": (-5.0, 5.0)}
BICYCLE_TRACKING = {"e_f": 0.3, "e_l": 0.3, "e_th": 0.35, "e_v": 0.3}


def bicycle_numeric(x, u, d, l: float = BICYCLE_L):
    """Ground vehicle field as printed: heading 0 points along +y.

    Arrays may carry leading batch dimensions; the last axis is the state.
    """
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    d = np.asarray(d, float)
    th, v = x[..., 2], x[..., 3]
    dd = d[..., 0] if d.ndim else d
    return np.stack([v * np.sin(th) + v * np.cos(th) * dd,
                     v * np.cos(th) + v * np.sin(th) * dd,
                     v / l * u[..., 1],
                     u[..., 0]], axis=-1)


def preset_bicycle(heading: float = 0.0, tracking: Mapping[str, float] | None = None,
                   sin_degree: int = 3, cos_degree: int = 2, input_box: Box | None = None,
                   disturbance: float = BICYCLE_D, l: float = BICYCLE_L):
    """Bicycle model, its d = 0 reference, and body-frame error dynamics.

    Error coordinates: ``e_f``/``e_l`` position error along/right of the
    reference heading, ``e_th = th - th_r``, ``e_v = v - v_r``. The world-frame
    slide term ``v d (cos th, sin th)`` has norm ``v |d|`` in any direction, so
    it is covered by independent body-frame terms ``v * d_f``, ``v * d_l``
    with ``|d_f|, |d_l| <= |d|``; trig remainders in ``e_th`` are added to
    those boxes.
    """
    tracking = dict(tracking or BICYCLE_TRACKING)
    inputs = dict(input_box or BICYCLE_INPUTS)
    # raw plant with trig Taylorized about the nominal heading
    vs = VarSet(["x", "y", "th", "v", "u1", "u2", "d"])
    x, y, th, v, u1, u2, d = vs.vars("x", "y", "th", "v", "u1", "u2", "d")
    sn = taylorize("sin", "th", heading, sin_degree, vs).poly
    cs = taylorize("cos", "th", heading, cos_degree, vs).poly
    plant = DynamicsModel(
        "bicycle", ("x", "y", "th", "v"), ("u1", "u2"), ("d",),
        (v * sn + v * cs * d, v * cs + v * sn * d, v * u2 * (1.0 / l), u1),
        inputs, {"d": (-disturbance, disturbance)},
        lambda xx, uu, dd: bicycle_numeric(xx, uu, dd, l))
    rvs = VarSet(["x_r", "y_r", "th_r", "v_r", "u_r1", "u_r2"])
    xr_, yr_, thr_, vr_, ur1_, ur2_ = rvs.vars("x_r", "y_r", "th_r", "v_r", "u_r1", "u_r2")
    # reference uses exact trig numerically; polynomial field only for generic tooling
    snr = taylorize("sin", "th_r", heading, sin_degree, rvs).poly
    csr = taylorize("cos", "th_r", heading, cos_degree, rvs).poly
    ref = ReferenceModel(("x_r", "y_r", "th_r", "v_r"), ("u_r1", "u_r2"),
                         (vr_ * snr, vr_ * csr, vr_ * ur2_ * (1.0 / l), ur1_),
                         {"x_r": (-50, 50), "y_r": (-50, 50), "th_r": (-2 * math.pi, 2 * math.pi),
                          "v_r": (0.0, 3.0), "u_r1": inputs["u1"], "u_r2": inputs["u2"]})
    ref = _ExactBicycleRef(ref, l)

    eth_w = tracking["e_th"]
    tp_s = taylorize("sin", "e_th", 0.0, sin_degree)
    tp_c = taylorize("cos", "e_th", 0.0, cos_degree)
    rho_s = tp_s.remainder_bound(eth_w)
    rho_c = tp_c.remainder_bound(eth_w)
    evs = VarSet(["e_f", "e_l", "e_th", "e_v", "x_r", "y_r", "th_r", "v_r", "u_r1", "u_r2",
                  "u1", "u2", "d_f", "d_l"])
    ef, el, eth, ev, vr, ur1, ur2, uu1, uu2, df, dl = evs.vars(
        "e_f", "e_l", "e_th", "e_v", "v_r", "u_r1", "u_r2", "u1", "u2", "d_f", "d_l")
    S = taylorize("sin", "e_th", 0.0, sin_degree, evs).poly
    C = taylorize("cos", "e_th", 0.0, cos_degree, evs).poly
    vv = vr + ev
    thr_dot = vr * ur2 * (1.0 / l)
    fields = (
        thr_dot * el + vv * C - vr + vv * df,
        -thr_dot * ef + vv * S + vv * dl,
        (vv * uu2 - vr * ur2) * (1.0 / l),
        uu1 - ur1,
    )
    dbox = {"d_f": (-(disturbance + rho_c), disturbance + rho_c),
            "d_l": (-(disturbance + rho_s), disturbance + rho_s)}

    def to_error(xs, xrs):
        xs = np.asarray(xs, float)
        xrs = np.asarray(xrs, float)
        dx, dy = xs[..., 0] - xrs[..., 0], xs[..., 1] - xrs[..., 1]
        c, s = np.cos(xrs[..., 2]), np.sin(xrs[..., 2])
        return np.stack([s * dx + c * dy, c * dx - s * dy, xs[..., 2] - xrs[..., 2], xs[..., 3] - xrs[..., 3]],
                        axis=-1)

    def from_error(es, xrs):
        es = np.asarray(es, float)
        xrs = np.asarray(xrs, float)
        c, s = np.cos(xrs[..., 2]), np.sin(xrs[..., 2])
        dx = s * es[..., 0] + c * es[..., 1]
        dy = c * es[..., 0] - s * es[..., 1]
        return np.stack([xrs[..., 0] + dx, xrs[..., 1] + dy, xrs[..., 2] + es[..., 2], xrs[..., 3] + es[..., 3]],
                        axis=-1)

    em = ErrorModel("bicycle", ("e_f", "e_l", "e_th", "e_v"), plant, ref, ("d_f", "d_l"), fields, dbox,
                    to_error, from_error, tracking,
                    {"e_th": eth_w, "sin_remainder": rho_s, "cos_remainder": rho_c})
    return plant, ref, em


class _ExactBicycleRef(ReferenceModel):
    """Reference model whose numeric field uses exact trig."""

    def __init__(self, base: ReferenceModel, l: float):
        object.__setattr__(self, "state", base.state)
        object.__setattr__(self, "inputs", base.inputs)
        object.__setattr__(self, "field", base.field)
        object.__setattr__(self, "box", base.box)
        object.__setattr__(self, "l", l)

    def f(self, xr, ur):
        return bicycle_numeric(xr, ur, np.zeros(np.shape(xr)[:-1] + (1,)), self.l)

    def f_many(self, xr, ur):
        return self.f(np.atleast_2d(xr), np.atleast_2d(ur))


BICYCLE_TASKS = {
    # nominal speed and reference-input boxes per task (maneuvering is the stationary case)
    "maneuver": {"v_nominal": 1.5},
    "stop": {"v_start": 1.5, "T": 1.0},
    "accelerate": {"v_end": 1.5, "T": 1.0},
}


# ---------------------------------------------------------------------------
# model files


def dump_model(model: DynamicsModel | ReferenceModel | ErrorModel) -> str:
    """Structured text: variable names, boxes and field polynomials."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if isinstance(model, ErrorModel):
        kind = "error"
        cp["model"] = {"kind": kind, "name": model.name, "errors": " ".join(model.errors),
                       "disturbances": " ".join(model.disturbances),
                       "varset": " ".join(model.varset.names)}
        cp["disturbance_box"] = {k: f"{lo!r} {hi!r}" for k, (lo, hi) in model.disturbance_box.items()}
        cp["tracking_box"] = {k: repr(v) for k, v in model.tracking_box.items()}
        names, fields = model.errors, model.field
    elif isinstance(model, DynamicsModel):
        cp["model"] = {"kind": "plant", "name": model.name, "state": " ".join(model.state),
                       "inputs": " ".join(model.inputs), "disturbances": " ".join(model.disturbances)}
        cp["input_box"] = {k: f"{lo!r} {hi!r}" for k, (lo, hi) in model.input_box.items()}
        cp["disturbance_box"] = {k: f"{lo!r} {hi!r}" for k, (lo, hi) in model.disturbance_box.items()}
        names, fields = model.state, model.field
    else:
        cp["model"] = {"kind": "reference", "state": " ".join(model.state), "inputs": " ".join(model.inputs)}
        cp["box"] = {k: f"{lo!r} {hi!r}" for k, (lo, hi) in model.box.items()}
        names, fields = model.state, model.field
    cp["field"] = {n: "\n" + f.dumps() for n, f in zip(names, fields)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load_model(text: str):
    """Inverse of :func:`dump_model` (numeric exact fields are not stored)."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_string(text)
    m = cp["model"]
    kind = m.get("kind")

    def boxes(sec):
        return {k: tuple(float(t) for t in v.split()) for k, v in cp[sec].items()} if sec in cp else {}

    def polys(names):
        return tuple(Poly.loads(cp["field"][n]) for n in names)

    if kind == "plant":
        state = tuple(m["state"].split())
        inputs = tuple(m["inputs"].split())
        dist = tuple(m.get("disturbances", "").split())
        vs = VarSet(state + inputs + dist)
        return DynamicsModel(m["name"], state, inputs, dist, tuple(p.lift(vs) for p in polys(state)),
                             boxes("input_box"), boxes("disturbance_box"))
    if kind == "reference":
        state = tuple(m["state"].split())
        inputs = tuple(m["inputs"].split())
        return ReferenceModel(state, inputs, polys(state), boxes("box"))
    if kind == "error":
        # error models are rebuilt from presets; only the polynomial part is returned
        errors = tuple(m["errors"].split())
        return {"name": m["name"], "errors": errors, "field": polys(errors),
                "disturbance_box": boxes("disturbance_box"),
                "tracking_box": {k: float(v) for k, v in cp["tracking_box"].items()}}
    raise ValueError(f"unknown model kind {kind!r}")
