"""Sum-of-squares programs compiled to block SDPs.

Decision coefficients are carried by :class:`LinPoly`, a polynomial in the
indeterminates whose coefficients are affine combinations of decision
variables. A decision variable key is either ``("s", name)`` (free scalar,
or nonnegative scalar stored in a 1x1 PSD block) or ``("g", block, i, k)``
(entry of a Gram matrix, ``i <= k``). Products of two non-constant LinPolys
raise :class:`BilinearError`; callers must freeze one factor first.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import sdp as sdpmod
from .polyalg import ZERO_TOL, Poly, VarSet, VarSetMismatch, monomials_up_to

log = logging.getLogger(__name__)

STRICT_MARGIN = 1e-4

_Scalar = (int, float, np.floating, np.integer)


class BilinearError(ValueError):
    """A product of two expressions that both depend on decision variables."""


class SosInfeasible(RuntimeError):
    pass


def _key_name(key) -> str:
    if key is None:
        return "1"
    if key[0] == "s":
        return key[1]
    return f"{key[1]}[{key[2]},{key[3]}]"


class LinPoly:
    """Polynomial with coefficients affine in decision variables.

    ``terms`` maps ``(monomial, key)`` to a float, ``key`` being ``None`` for
    the constant (data) part.
    """

    __slots__ = ("varset", "terms")

    def __init__(self, varset: VarSet, terms: Mapping | None = None):
        self.varset = varset
        self.terms = {k: v for k, v in (terms or {}).items() if abs(v) >= ZERO_TOL}

    @classmethod
    def from_poly(cls, p: Poly) -> "LinPoly":
        return cls(p.varset, {(m, None): c for m, c in p.terms.items()})

    @classmethod
    def decision(cls, varset: VarSet, key, monomial=None, coeff: float = 1.0) -> "LinPoly":
        m = varset.zero() if monomial is None else tuple(monomial)
        return cls(varset, {(m, key): coeff})

    def _coerce(self, other):
        if isinstance(other, LinPoly):
            if other.varset != self.varset:
                raise VarSetMismatch(f"{self.varset} vs {other.varset}")
            return other
        if isinstance(other, Poly):
            if other.varset != self.varset:
                raise VarSetMismatch(f"{self.varset} vs {other.varset}")
            return LinPoly.from_poly(other)
        if isinstance(other, _Scalar):
            return LinPoly(self.varset, {(self.varset.zero(), None): float(other)})
        return None

    def __add__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        out = dict(self.terms)
        for k, v in o.terms.items():
            out[k] = out.get(k, 0.0) + v
        return LinPoly(self.varset, out)

    __radd__ = __add__

    def __neg__(self):
        return LinPoly(self.varset, {k: -v for k, v in self.terms.items()})

    def __sub__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        return self + (-o)

    def __rsub__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        return o - self

    def scale(self, s: float) -> "LinPoly":
        return LinPoly(self.varset, {k: v * s for k, v in self.terms.items()})

    def keys(self) -> set:
        return {k for (_, k) in self.terms if k is not None}

    def is_data(self) -> bool:
        return not self.keys()

    def __mul__(self, other):
        if isinstance(other, _Scalar):
            return self.scale(float(other))
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        mine, theirs = self.keys(), o.keys()
        if mine and theirs:
            a, b = sorted(mine, key=str)[0], sorted(theirs, key=str)[0]
            raise BilinearError(f"bilinear product of decision variables {_key_name(a)} and {_key_name(b)}")
        if theirs:
            return o * self
        # o is pure data
        out: dict = {}
        for (m1, k), c1 in self.terms.items():
            for (m2, _), c2 in o.terms.items():
                key = (tuple(a + b for a, b in zip(m1, m2)), k)
                out[key] = out.get(key, 0.0) + c1 * c2
        return LinPoly(self.varset, out)

    __rmul__ = __mul__

    def __pow__(self, k: int):
        if k == 0:
            return LinPoly(self.varset, {(self.varset.zero(), None): 1.0})
        if k == 1:
            return self
        if self.is_data():
            return LinPoly.from_poly(self.data_part() ** k)
        raise BilinearError("power of a decision-dependent expression")

    def diff(self, name: str) -> "LinPoly":
        i = self.varset.index(name)
        out = {}
        for (m, k), c in self.terms.items():
            e = m[i]
            if e:
                out[(m[:i] + (e - 1,) + m[i + 1:], k)] = c * e
        return LinPoly(self.varset, out)

    def parts(self) -> dict:
        """``{key: Poly}`` with key ``None`` for the data part."""
        groups: dict = {}
        for (m, k), c in self.terms.items():
            groups.setdefault(k, {})[m] = c
        return {k: Poly(self.varset, t) for k, t in groups.items()}

    def data_part(self) -> Poly:
        return Poly(self.varset, {m: c for (m, k), c in self.terms.items() if k is None})

    def fix(self, values: Mapping) -> Poly:
        """Substitute numeric decision values; missing keys raise KeyError."""
        out: dict = {}
        for (m, k), c in self.terms.items():
            v = c if k is None else c * values[k]
            out[m] = out.get(m, 0.0) + v
        return Poly(self.varset, out)

    def subs(self, bindings, target: VarSet | None = None) -> "LinPoly":
        parts = self.parts()
        out = None
        for k, p in parts.items():
            q = p.subs(bindings, target)
            q = q if isinstance(q, LinPoly) else LinPoly.from_poly(q)
            if k is not None:
                q = LinPoly(q.varset, {(m, k): c for (m, _), c in q.terms.items()})
            out = q if out is None else out + q
        if out is None:
            tv = target if target is not None else self.varset.without(bindings)
            return LinPoly(tv)
        return out

    def lift(self, target: VarSet) -> "LinPoly":
        out = None
        for k, p in self.parts().items():
            q = p.lift(target)
            q = LinPoly(target, {(m, k): c for m, c in q.terms.items()})
            out = q if out is None else out + q
        return out if out is not None else LinPoly(target)

    @property
    def degree(self) -> int:
        return max((sum(m) for (m, _) in self.terms), default=0)

    def support(self) -> set:
        return {m for (m, _) in self.terms}

    def __repr__(self):
        parts = self.parts()
        s = ", ".join(f"{_key_name(k)}: {p.to_str()}" for k, p in parts.items())
        return f"LinPoly({s})"


def as_lin(p, varset: VarSet | None = None) -> LinPoly:
    if isinstance(p, LinPoly):
        return p
    if isinstance(p, Poly):
        return LinPoly.from_poly(p)
    if varset is None:
        raise TypeError("scalar needs a varset")
    return LinPoly(varset, {(varset.zero(), None): float(p)})


# ---------------------------------------------------------------------------
# Gram bases


def gram_basis(varset: VarSet | Sequence[str], degree: int) -> list[tuple[int, ...]]:
    """All monomials of total degree <= degree/2, graded-lex order."""
    if degree < 0 or degree % 2:
        raise ValueError(f"Gram basis needs an even non-negative degree, got {degree}")
    n = len(varset)
    return monomials_up_to(n, degree // 2)


def reduced_basis(support: Iterable[tuple[int, ...]], nvars: int) -> list[tuple[int, ...]]:
    """Gram basis for a polynomial with the given support, after pruning.

    Starts from per-variable half-degree bounds and total-degree bounds, then
    repeatedly drops basis monomials ``b`` whose square ``2b`` is neither in
    the support nor obtainable as a sum of two distinct basis elements (such
    rows of the Gram matrix are forced to zero).
    """
    support = set(support)
    if not support:
        return []
    maxdeg = [max(m[i] for m in support) for i in range(nvars)]
    tot_hi = max(sum(m) for m in support)
    tot_lo = min(sum(m) for m in support)
    half_hi = tot_hi // 2
    half_lo = (tot_lo + 1) // 2
    cand = [b for b in monomials_up_to(nvars, half_hi, half_lo)
            if all(2 * b[i] <= maxdeg[i] for i in range(nvars))]
    # variables absent as even powers cannot appear at all
    basis = set(cand)
    changed = True
    while changed:
        changed = False
        sums: dict = {}
        bl = sorted(basis)
        for a_i, a in enumerate(bl):
            for b in bl[a_i + 1:]:
                s = tuple(x + y for x, y in zip(a, b))
                sums[s] = sums.get(s, 0) + 1
        for b in bl:
            sq = tuple(2 * x for x in b)
            if sq not in support and sq not in sums:
                basis.discard(b)
                changed = True
    return [b for b in cand if b in basis]


# ---------------------------------------------------------------------------
# programs


@dataclass
class PolyVar:
    name: str
    varset: VarSet
    degree: int
    basis: list
    kind: str  # "free" or "sos"
    expr: LinPoly


@dataclass
class _SosConstraint:
    name: str
    expr: LinPoly
    strict: bool
    margin: float


class SosProgram:
    """A sum-of-squares program over a fixed indeterminate set.

    Decision polynomials are created with :meth:`free_poly` and
    :meth:`sos_poly`; scalars with :meth:`scalar`. Constraints are added as
    LinPoly expressions required to be SOS, polynomial identities, or scalar
    inequalities. The objective (minimized) is an affine scalar expression.
    """

    def __init__(self, indets: VarSet | Sequence[str]):
        self.varset = indets if isinstance(indets, VarSet) else VarSet(indets)
        self.poly_vars: dict[str, PolyVar] = {}
        self.scalar_vars: dict[str, bool] = {}  # name -> nonneg
        self.gram_blocks: dict[str, int] = {}
        self.sos_constraints: list[_SosConstraint] = []
        self.equalities: list[tuple[str, LinPoly]] = []
        self.inequalities: list[tuple[str, LinPoly]] = []
        self.objective: LinPoly | None = None

    def _fresh(self, name: str) -> str:
        if name in self.poly_vars or name in self.scalar_vars or name in self.gram_blocks:
            raise ValueError(f"duplicate decision name {name!r}")
        return name

    @property
    def zero(self) -> LinPoly:
        return LinPoly(self.varset)

    def poly(self, p) -> LinPoly:
        return as_lin(p, self.varset)

    def scalar(self, name: str, nonneg: bool = False) -> LinPoly:
        self._fresh(name)
        self.scalar_vars[name] = nonneg
        return LinPoly.decision(self.varset, ("s", name))

    def free_poly(self, name: str, monomials: Sequence[tuple[int, ...]]) -> LinPoly:
        """Polynomial with one free scalar coefficient per monomial."""
        self._fresh(name)
        terms = {}
        for idx, m in enumerate(monomials):
            cname = f"{name}#{idx}"
            self.scalar_vars[cname] = False
            terms[(tuple(m), ("s", cname))] = 1.0
        expr = LinPoly(self.varset, terms)
        deg = max((sum(m) for m in monomials), default=0)
        self.poly_vars[name] = PolyVar(name, self.varset, deg, list(monomials), "free", expr)
        return expr

    def sos_poly(self, name: str, basis: Sequence[tuple[int, ...]]) -> LinPoly:
        """SOS polynomial ``z^T S z`` over the given half-degree basis."""
        self._fresh(name)
        basis = [tuple(b) for b in basis]
        self.gram_blocks[name] = len(basis)
        terms: dict = {}
        for i, a in enumerate(basis):
            for k in range(i, len(basis)):
                m = tuple(x + y for x, y in zip(a, basis[k]))
                terms[(m, ("g", name, i, k))] = 1.0 if i == k else 2.0
        expr = LinPoly(self.varset, terms)
        deg = 2 * max((sum(b) for b in basis), default=0)
        self.poly_vars[name] = PolyVar(name, self.varset, deg, basis, "sos", expr)
        return expr

    def add_sos(self, expr, name: str | None = None, strict: bool = False, margin: float = STRICT_MARGIN) -> None:
        expr = as_lin(expr, self.varset)
        if expr.varset != self.varset:
            raise VarSetMismatch(f"constraint over {expr.varset}, program over {self.varset}")
        self.sos_constraints.append(_SosConstraint(name or f"sos{len(self.sos_constraints)}", expr, strict, margin))

    def add_eq(self, expr, name: str | None = None) -> None:
        """Polynomial identity ``expr == 0`` (coefficient-wise)."""
        self.equalities.append((name or f"eq{len(self.equalities)}", as_lin(expr, self.varset)))

    def add_ge(self, expr, name: str | None = None) -> None:
        """Scalar inequality ``expr >= 0``; ``expr`` must be a constant LinPoly."""
        expr = as_lin(expr, self.varset)
        if expr.degree > 0:
            raise ValueError("add_ge takes constant (degree-0) expressions; use add_sos for polynomials")
        self.inequalities.append((name or f"ge{len(self.inequalities)}", expr))

    def minimize(self, expr) -> None:
        expr = as_lin(expr, self.varset)
        if expr.degree > 0:
            raise ValueError("objective must be a constant expression in the indeterminates")
        self.objective = expr

    def decision_keys(self) -> set:
        keys = set()
        for c in self.sos_constraints:
            keys |= c.expr.keys()
        for _, e in self.equalities + self.inequalities:
            keys |= e.keys()
        if self.objective is not None:
            keys |= self.objective.keys()
        return keys


@dataclass
class Recovery:
    """Maps SDP variables back to polynomial decision variables."""
    constraint_blocks: list[tuple[str, list]]  # (block name, basis) per SOS constraint
    scalar_location: dict  # scalar name -> ("free", name) or ("block", name)
    sdp_problem: sdpmod.SdpProblem


def compile(prog: SosProgram) -> tuple[sdpmod.SdpProblem, Recovery]:
    """Compile to an SdpProblem with one Gram block per SOS constraint."""
    P = sdpmod.SdpProblem()
    loc = {}
    used = prog.decision_keys()
    for name, nonneg in prog.scalar_vars.items():
        if ("s", name) not in used:
            continue
        if nonneg:
            P.add_block("nn:" + name, 1)
            loc[name] = ("block", "nn:" + name)
        else:
            P.add_free(name)
            loc[name] = ("free", name)
    for name, dim in prog.gram_blocks.items():
        P.add_block(name, dim)

    def lin_terms(coeffs: Mapping) -> tuple[dict, dict]:
        """Split ``{key: coef}`` into SDP block and free coefficient maps."""
        bt: dict = {}
        ft: dict = {}
        for key, v in coeffs.items():
            if key[0] == "s":
                where = loc[key[1]]
                if where[0] == "free":
                    ft[where[1]] = ft.get(where[1], 0.0) + v
                else:
                    bt.setdefault(where[1], []).append((0, 0, v))
            else:
                bt.setdefault(key[1], []).append((key[2], key[3], v))
        return bt, ft

    def coeff_rows(expr: LinPoly) -> dict:
        rows: dict = {}
        for (m, k), c in expr.terms.items():
            rows.setdefault(m, {})
            rows[m][k] = rows[m].get(k, 0.0) + c
        return rows

    blocks_info = []
    nv = len(prog.varset)
    for ci, con in enumerate(prog.sos_constraints):
        expr = con.expr
        if con.strict:
            sq = sum((Poly.var(prog.varset, n) ** 2 for n in _used_vars(expr)), Poly.const(prog.varset, 1.0))
            expr = expr - as_lin(sq * con.margin)
        rows = coeff_rows(expr)
        basis = reduced_basis(rows.keys(), nv)
        bname = f"Q{ci}:{con.name}"
        while bname in P.blocks:
            bname += "'"
        gram_terms: dict = {}
        for i, a in enumerate(basis):
            for k in range(i, len(basis)):
                m = tuple(x + y for x, y in zip(a, basis[k]))
                gram_terms.setdefault(m, []).append((i, k, 1.0 if i == k else 2.0))
        if basis:
            P.add_block(bname, len(basis))
        blocks_info.append((bname if basis else None, basis))
        for m in set(rows) | set(gram_terms):
            coeffs = rows.get(m, {})
            const = coeffs.get(None, 0.0)
            dec = {k: -v for k, v in coeffs.items() if k is not None}
            bt, ft = lin_terms(dec)
            if m in gram_terms:
                bt.setdefault(bname, []).extend(gram_terms[m])
            if not bt and not ft:
                if abs(const) > 1e-12:
                    # no decision variable can absorb a nonzero coefficient
                    P.add_constraint({}, {}, const)
                continue
            P.add_constraint(bt, ft, const)
    for name, expr in prog.equalities:
        for m, coeffs in coeff_rows(expr).items():
            const = coeffs.get(None, 0.0)
            dec = {k: v for k, v in coeffs.items() if k is not None}
            bt, ft = lin_terms(dec)
            P.add_constraint(bt, ft, -const)
    for idx, (name, expr) in enumerate(prog.inequalities):
        coeffs = coeff_rows(expr).get(prog.varset.zero(), {})
        const = coeffs.get(None, 0.0)
        dec = {k: v for k, v in coeffs.items() if k is not None}
        slack = f"slack{idx}:{name}"
        P.add_block(slack, 1)
        bt, ft = lin_terms(dec)
        bt.setdefault(slack, []).append((0, 0, -1.0))
        P.add_constraint(bt, ft, -const)
    if prog.objective is not None:
        coeffs = coeff_rows(prog.objective).get(prog.varset.zero(), {})
        dec = {k: v for k, v in coeffs.items() if k is not None}
        bt, ft = lin_terms(dec)
        P.add_objective(bt, ft)
    return P, Recovery(blocks_info, loc, P)


def _used_vars(expr: LinPoly) -> list[str]:
    used = set()
    for (m, _) in expr.terms:
        for i, e in enumerate(m):
            if e:
                used.add(i)
    return [expr.varset.names[i] for i in sorted(used)]


@dataclass
class SosResult:
    status: str
    values: dict = field(default_factory=dict)   # decision key -> float
    polys: dict = field(default_factory=dict)    # PolyVar name -> Poly
    scalars: dict = field(default_factory=dict)  # scalar name -> float
    objective: float = math.nan
    gram: list = field(default_factory=list)     # (basis, Q) per SOS constraint
    min_gram_eig: float = math.nan
    sdp: sdpmod.SdpSolution | None = None

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")


def recover(prog: SosProgram, rec: Recovery, sol: sdpmod.SdpSolution) -> SosResult:
    """Read decision values out of a solved SDP."""
    if not sol.ok:
        raise SosInfeasible(f"cannot recover from SDP status {sol.status!r}")
    values: dict = {}
    for name, where in rec.scalar_location.items():
        if where[0] == "free":
            values[("s", name)] = sol.scalars[where[1]]
        else:
            values[("s", name)] = float(sol.blocks[where[1]][0, 0])
    for name, dim in prog.gram_blocks.items():
        S = sol.blocks[name]
        for i in range(dim):
            for k in range(i, dim):
                values[("g", name, i, k)] = float(S[i, k])
    # unused scalars default to zero
    for name in prog.scalar_vars:
        values.setdefault(("s", name), 0.0)
    polys = {n: pv.expr.fix(values) for n, pv in prog.poly_vars.items()}
    scalars = {n: values[("s", n)] for n in prog.scalar_vars if "#" not in n}
    gram = []
    eigs = []
    for bname, basis in rec.constraint_blocks:
        if bname is None:
            gram.append((basis, np.zeros((0, 0))))
            continue
        Q = sol.blocks[bname]
        gram.append((basis, Q))
        eigs.append(np.linalg.eigvalsh(Q)[0])
    for name in prog.gram_blocks:
        eigs.append(np.linalg.eigvalsh(sol.blocks[name])[0])
    obj = prog.objective.fix(values).constant_term() if prog.objective is not None else 0.0
    return SosResult(sol.status, values, polys, scalars, obj, gram,
                     float(min(eigs)) if eigs else math.inf, sol)


def solve(prog: SosProgram, tolerances: sdpmod.Tolerances | None = None, backend: str = "ipm") -> SosResult:
    P, rec = compile(prog)
    sol = sdpmod.solve(P, tolerances, backend=backend)
    if not sol.ok:
        return SosResult(sol.status, sdp=sol)
    return recover(prog, rec, sol)


def gram_reconstruct(varset: VarSet, basis: Sequence, Q: np.ndarray) -> Poly:
    """``z^T Q z`` as a Poly."""
    out: dict = {}
    for i, a in enumerate(basis):
        for k, b in enumerate(basis):
            m = tuple(x + y for x, y in zip(a, b))
            out[m] = out.get(m, 0.0) + Q[i, k]
    return Poly(varset, out)


def is_sos(p: Poly, tolerances: sdpmod.Tolerances | None = None, backend: str = "ipm") -> SosResult:
    """Feasibility check ``p in SOS``; ``result.gram[0]`` holds the certificate."""
    prog = SosProgram(p.varset)
    prog.add_sos(p, name="p")
    return solve(prog, tolerances, backend)


def check_constraints(prog: SosProgram, values: Mapping, tol: float = 1e-7) -> list[tuple[str, float]]:
    """Re-verify every SOS constraint at fixed decision values.

    Each constraint becomes a constant polynomial and is re-submitted as a
    fresh feasibility program; returns ``(name, min Gram eigenvalue)``
    for each, ``-inf`` where the check failed.
    """
    out = []
    for con in prog.sos_constraints:
        p = con.expr.fix(values)
        if con.strict:
            sq = sum((Poly.var(prog.varset, n) ** 2 for n in p.variables()), Poly.const(prog.varset, 1.0))
            p = p - sq * con.margin
        if p.is_zero():
            out.append((con.name, 0.0))
            continue
        r = is_sos(p)
        out.append((con.name, r.min_gram_eig if r.ok else -math.inf))
    return out
