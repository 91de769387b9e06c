"""Sparse multivariate polynomials over named variables.

Every polynomial carries a :class:`VarSet`; exponent tuples are dense and
indexed by the position of each name in that set. Coefficients are floats and
canonical form drops any term whose magnitude falls below ``ZERO_TOL``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations_with_replacement
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

ZERO_TOL = 1e-14

Exponent = tuple[int, ...]


class VarSetMismatch(ValueError):
    """Raised when two polynomials over different variable sets are combined."""


@dataclass(frozen=True)
class VarSet:
    names: tuple[str, ...]

    def __init__(self, names: Iterable[str]):
        names = tuple(names)
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate variable names: {dup}")
        object.__setattr__(self, "names", names)

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name) -> bool:
        return name in self._index

    @cached_property
    def _index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.names)}

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"variable {name!r} not in {self.names}") from None

    def union(self, other: Iterable[str]) -> "VarSet":
        extra = [n for n in other if n not in self]
        return VarSet(self.names + tuple(extra)) if extra else self

    def without(self, drop: Iterable[str]) -> "VarSet":
        drop = set(drop)
        return VarSet(n for n in self.names if n not in drop)

    def zero(self) -> Exponent:
        return (0,) * len(self.names)

    def var(self, name: str) -> "Poly":
        return Poly.var(self, name)

    def vars(self, *names: str) -> list["Poly"]:
        return [Poly.var(self, n) for n in names]

    def __repr__(self) -> str:
        return f"VarSet({list(self.names)})"


def _canon(terms: dict) -> dict:
    return {m: c for m, c in terms.items() if abs(c) >= ZERO_TOL}


class Poly:
    """Immutable sparse polynomial ``sum c_m * z**m`` over ``varset``."""

    __slots__ = ("varset", "terms", "_hash", "_compiled")

    def __init__(self, varset: VarSet, terms: Mapping[Exponent, float] | None = None, *, _canon_done=False):
        self.varset = varset
        if terms is None:
            terms = {}
        if not _canon_done:
            n = len(varset)
            clean = {}
            for m, c in terms.items():
                m = tuple(int(e) for e in m)
                if len(m) != n:
                    raise ValueError(f"exponent {m} does not match {n} variables")
                if any(e < 0 for e in m):
                    raise ValueError(f"negative exponent in {m}")
                clean[m] = clean.get(m, 0.0) + float(c)
            terms = _canon(clean)
        self.terms = terms
        self._hash = None
        self._compiled = None

    # -- constructors -------------------------------------------------------
    @classmethod
    def const(cls, varset: VarSet, c: float) -> "Poly":
        return cls(varset, {varset.zero(): c})

    @classmethod
    def var(cls, varset: VarSet, name: str) -> "Poly":
        m = [0] * len(varset)
        m[varset.index(name)] = 1
        return cls(varset, {tuple(m): 1.0}, _canon_done=True)

    @classmethod
    def monomial(cls, varset: VarSet, exps: Exponent, c: float = 1.0) -> "Poly":
        return cls(varset, {tuple(exps): c})

    @classmethod
    def from_dict(cls, varset: VarSet, powers: Mapping[str, int], c: float = 1.0) -> "Poly":
        m = [0] * len(varset)
        for n, e in powers.items():
            m[varset.index(n)] = e
        return cls(varset, {tuple(m): c})

    # -- basic queries ------------------------------------------------------
    def __repr__(self) -> str:
        return f"Poly({self.to_str()})"

    def to_str(self, fmt: str = ".6g") -> str:
        if not self.terms:
            return "0"
        parts = []
        for m in sorted(self.terms, key=lambda m: (sum(m), tuple(-e for e in m))):
            c = self.terms[m]
            mono = "*".join(
                n if e == 1 else f"{n}^{e}" for n, e in zip(self.varset.names, m) if e
            )
            parts.append(f"{c:{fmt}}" + (f"*{mono}" if mono else ""))
        return " + ".join(parts).replace("+ -", "- ")

    def __bool__(self) -> bool:
        return bool(self.terms)

    def is_zero(self) -> bool:
        return not self.terms

    def is_constant(self) -> bool:
        return all(sum(m) == 0 for m in self.terms)

    def constant_term(self) -> float:
        return self.terms.get(self.varset.zero(), 0.0)

    def coefficient(self, m: Exponent) -> float:
        return self.terms.get(tuple(m), 0.0)

    @property
    def degree(self) -> int:
        return max((sum(m) for m in self.terms), default=0)

    def degree_in(self, names: Iterable[str]) -> int:
        idx = [self.varset.index(n) for n in names]
        return max((sum(m[i] for i in idx) for m in self.terms), default=0)

    def variables(self) -> list[str]:
        """Names that actually occur with a nonzero exponent."""
        used = [False] * len(self.varset)
        for m in self.terms:
            for i, e in enumerate(m):
                if e:
                    used[i] = True
        return [n for n, u in zip(self.varset.names, used) if u]

    def __eq__(self, other) -> bool:
        if isinstance(other, (int, float)):
            other = Poly.const(self.varset, other)
        if not isinstance(other, Poly):
            return NotImplemented
        return self.varset == other.varset and self.terms == other.terms

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self.varset, frozenset(self.terms.items())))
        return self._hash

    def allclose(self, other: "Poly", atol: float = 1e-9) -> bool:
        _check_same(self, other)
        keys = set(self.terms) | set(other.terms)
        return all(abs(self.coefficient(k) - other.coefficient(k)) <= atol for k in keys)

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    # -- arithmetic ---------------------------------------------------------
    def _coerce(self, other) -> "Poly | None":
        if isinstance(other, Poly):
            _check_same(self, other)
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Poly.const(self.varset, float(other))
        return None

    def __add__(self, other) -> "Poly":
        other = self._coerce(other)
        if other is None:
            return NotImplemented
        out = dict(self.terms)
        for m, c in other.terms.items():
            out[m] = out.get(m, 0.0) + c
        return Poly(self.varset, _canon(out), _canon_done=True)

    __radd__ = __add__

    def __neg__(self) -> "Poly":
        return Poly(self.varset, {m: -c for m, c in self.terms.items()}, _canon_done=True)

    def __sub__(self, other) -> "Poly":
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        return self + (-o)

    def __rsub__(self, other) -> "Poly":
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        return o - self

    def scale(self, s: float) -> "Poly":
        s = float(s)
        return Poly(self.varset, _canon({m: c * s for m, c in self.terms.items()}), _canon_done=True)

    def __mul__(self, other) -> "Poly":
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.scale(other)
        other = self._coerce(other)
        if other is None:
            return NotImplemented
        out: dict = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                m = tuple(a + b for a, b in zip(m1, m2))
                out[m] = out.get(m, 0.0) + c1 * c2
        return Poly(self.varset, _canon(out), _canon_done=True)

    __rmul__ = __mul__

    def __truediv__(self, s) -> "Poly":
        if isinstance(s, Poly):
            raise TypeError("polynomial division is not supported")
        return self.scale(1.0 / s)

    def __pow__(self, k: int) -> "Poly":
        if not isinstance(k, (int, np.integer)) or k < 0:
            raise ValueError("only non-negative integer powers")
        out = Poly.const(self.varset, 1.0)
        base = self
        while k:
            if k & 1:
                out = out * base
            base = base * base
            k >>= 1
        return out

    # -- calculus / composition --------------------------------------------
    def diff(self, name: str) -> "Poly":
        i = self.varset.index(name)
        out = {}
        for m, c in self.terms.items():
            e = m[i]
            if e:
                mm = m[:i] + (e - 1,) + m[i + 1:]
                out[mm] = c * e
        return Poly(self.varset, _canon(out), _canon_done=True)

    def gradient(self, names: Sequence[str]) -> list["Poly"]:
        return [self.diff(n) for n in names]

    def subs(self, bindings: Mapping[str, Union["Poly", float]], target: VarSet | None = None) -> "Poly":
        """Compose: replace each bound variable by a polynomial or constant.

        ``target`` is the variable set of the result. When omitted it is the
        common variable set of the substituted polynomials, or, with only
        constant bindings, ``self.varset`` minus the bound names.
        """
        for n in bindings:
            self.varset.index(n)
        if target is None:
            polys = [b for b in bindings.values() if isinstance(b, Poly)]
            if polys:
                target = polys[0].varset
            else:
                target = self.varset.without(bindings)
        if not all(isinstance(b, (Poly, int, float, np.floating, np.integer)) for b in bindings.values()):
            return self._subs_generic(bindings, target)
        tpos = []
        images = []
        for i, n in enumerate(self.varset.names):
            if n in bindings:
                b = bindings[n]
                if isinstance(b, Poly):
                    if b.varset != target:
                        raise VarSetMismatch(f"binding for {n!r} is over {b.varset}, expected {target}")
                    images.append(b)
                else:
                    images.append(Poly.const(target, float(b)))
                tpos.append(None)
            else:
                if n not in target:
                    if any(m[i] for m in self.terms):
                        raise VarSetMismatch(f"free variable {n!r} missing from target {target}")
                    tpos.append(-1)
                else:
                    tpos.append(target.index(n))
                images.append(None)
        power_cache: dict = {}

        def power(i, e):
            key = (i, e)
            if key not in power_cache:
                power_cache[key] = images[i] if e == 1 else power(i, e - 1) * images[i]
            return power_cache[key]

        out: dict = {}
        nt = len(target)
        for m, c in self.terms.items():
            base = [0] * nt
            factor = None
            for i, e in enumerate(m):
                if not e:
                    continue
                if tpos[i] is None:
                    pe = power(i, e)
                    factor = pe if factor is None else factor * pe
                else:
                    base[tpos[i]] += e
            base = tuple(base)
            if factor is None:
                out[base] = out.get(base, 0.0) + c
            else:
                for fm, fc in factor.terms.items():
                    mm = tuple(a + b for a, b in zip(base, fm))
                    out[mm] = out.get(mm, 0.0) + c * fc
        return Poly(target, _canon(out), _canon_done=True)

    def _subs_generic(self, bindings, target: VarSet):
        """Substitution with non-Poly images (e.g. affine decision polynomials)."""
        rest = {}
        for n in self.varset.names:
            if n in bindings:
                continue
            if n in target:
                rest[n] = Poly.var(target, n)
            elif any(m[self.varset.index(n)] for m in self.terms):
                raise VarSetMismatch(f"free variable {n!r} missing from target {target}")
        images = []
        for n in self.varset.names:
            b = bindings.get(n, rest.get(n))
            if isinstance(b, (int, float, np.floating, np.integer)):
                b = Poly.const(target, float(b))
            images.append(b)
        cache: dict = {}

        def power(i, e):
            if (i, e) not in cache:
                cache[(i, e)] = images[i] if e == 1 else power(i, e - 1) * images[i]
            return cache[(i, e)]

        out = Poly(target)
        for m, c in self.terms.items():
            term = None
            for i, e in enumerate(m):
                if e:
                    pe = power(i, e)
                    term = pe if term is None else term * pe
            out = out + (Poly.const(target, c) if term is None else term * c)
        return out

    def lift(self, target: VarSet) -> "Poly":
        """Re-express over a variable set that contains every used variable."""
        if target == self.varset:
            return self
        pos = []
        for i, n in enumerate(self.varset.names):
            if n in target:
                pos.append(target.index(n))
            else:
                if any(m[i] for m in self.terms):
                    raise VarSetMismatch(f"variable {n!r} used but absent from {target}")
                pos.append(None)
        out = {}
        nt = len(target)
        for m, c in self.terms.items():
            mm = [0] * nt
            for i, e in enumerate(m):
                if e:
                    mm[pos[i]] = e
            out[tuple(mm)] = c
        return Poly(target, out, _canon_done=True)

    def evaluate(self, point: Sequence[float]) -> float:
        point = np.asarray(point, dtype=float)
        if point.shape != (len(self.varset),):
            raise ValueError(f"point has shape {point.shape}, expected ({len(self.varset)},)")
        return float(self.evaluate_many(point[None, :])[0])

    def evaluate_many(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at each row of ``points`` (shape ``(N, nvars)``)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != len(self.varset):
            raise ValueError(f"points have {points.shape[1]} columns, expected {len(self.varset)}")
        if not self.terms:
            return np.zeros(points.shape[0])
        if self._compiled is None:
            exps = np.array(list(self.terms.keys()), dtype=int)
            coeffs = np.array(list(self.terms.values()))
            used = np.nonzero(exps.any(axis=0))[0]
            self._compiled = (used, exps[:, used], coeffs)
        used, exps, coeffs = self._compiled
        if len(used) == 0:
            return np.full(points.shape[0], coeffs.sum())
        vals = np.ones((points.shape[0], len(coeffs)))
        # power table per used variable, gathered by exponent
        for j, col in enumerate(used):
            e = exps[:, j]
            powers = points[:, [col]] ** np.arange(e.max() + 1)
            vals *= powers[:, e]
        return vals @ coeffs

    def __call__(self, **values) -> float:
        return self.evaluate([values[n] for n in self.varset.names])

    # -- serialization ------------------------------------------------------
    def dumps(self) -> str:
        lines = ["vars " + " ".join(self.varset.names)]
        for m in sorted(self.terms):
            lines.append(repr(float(self.terms[m])) + " " + " ".join(str(e) for e in m))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Poly":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("vars"):
            raise ValueError("polynomial text must start with a 'vars' header line")
        vs = VarSet(lines[0].split()[1:])
        terms = {}
        for ln in lines[1:]:
            fields = ln.split()
            if len(fields) != len(vs) + 1:
                raise ValueError(f"bad term line {ln!r}: expected {len(vs) + 1} fields")
            terms[tuple(int(e) for e in fields[1:])] = float(fields[0])
        return cls(vs, terms)


def _check_same(a: Poly, b: Poly) -> None:
    if a.varset != b.varset:
        raise VarSetMismatch(f"{a.varset} vs {b.varset}")


def add(a: Poly, b) -> Poly:
    return a + b


def sub(a: Poly, b) -> Poly:
    return a - b


def mul(a: Poly, b) -> Poly:
    return a * b


def scale(a: Poly, s: float) -> Poly:
    return a.scale(s)


def differentiate(p: Poly, name: str) -> Poly:
    return p.diff(name)


def substitute(p: Poly, bindings, target: VarSet | None = None) -> Poly:
    return p.subs(bindings, target)


def evaluate(p: Poly, point) -> float:
    return p.evaluate(point)


def monomials_up_to(nvars: int, degree: int, min_degree: int = 0) -> list[Exponent]:
    """All exponent tuples of total degree in ``[min_degree, degree]``, graded-lex order."""
    out = []
    for d in range(min_degree, degree + 1):
        block = []
        for combo in combinations_with_replacement(range(nvars), d):
            m = [0] * nvars
            for i in combo:
                m[i] += 1
            block.append(tuple(m))
        block.sort(reverse=True)
        out.extend(block)
    return out


def n_monomials(nvars: int, degree: int) -> int:
    return math.comb(nvars + degree, degree)


def quadratic_form(varset: VarSet, names: Sequence[str], P: np.ndarray, center: Sequence | None = None) -> Poly:
    """``(z - c)^T P (z - c)`` over ``names``; ``center`` entries may be floats or Polys."""
    P = np.asarray(P, dtype=float)
    zs = []
    for k, n in enumerate(names):
        z = Poly.var(varset, n)
        if center is not None:
            z = z - center[k]
        zs.append(z)
    out = Poly(varset)
    for i in range(len(names)):
        for j in range(len(names)):
            if P[i, j]:
                out = out + zs[i] * zs[j] * P[i, j]
    return out
